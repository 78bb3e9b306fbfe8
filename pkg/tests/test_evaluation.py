import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import brute_force, random_instance
from sketchreid import encoder
from sketchreid.core import Modality, Sample, ShapeMismatchError, seeded_rng
from sketchreid.evaluation import (cmc, diagnose, discrepancy_proxy, estimate_gamma, evaluate_retrieval,
                                   lipschitz_ratio, mean_ap, pairwise_distances)


def test_ap_hand_case():
    dist = np.array([[0.1, 0.2, 0.3, 0.4]])
    assert abs(mean_ap(dist, [7], [7, 1, 7, 2]) - 5 / 6) < 1e-9


def test_cmc_hand_case():
    dist = np.array([[0.5, 0.1, 0.9], [0.2, 0.3, 0.1]])
    r = cmc(dist, [0, 2], [0, 1, 2], ks=(1, 2, 3))
    assert r == {1: 0.5, 2: 1.0, 3: 1.0}


def test_ties_resolve_to_lower_gallery_index():
    dist = np.zeros((1, 3))
    assert cmc(dist, [1], [0, 1, 1], ks=(1, 2)) == {1: 0.0, 2: 1.0}
    assert cmc(dist, [0], [0, 1, 1], ks=(1,)) == {1: 1.0}


@pytest.mark.parametrize("seed", range(200))
def test_metrics_match_brute_force(seed):
    dist, q_ids, g_ids = random_instance(seed)
    ranks, ap = brute_force(dist.tolist(), q_ids.tolist(), g_ids.tolist())
    assert cmc(dist, q_ids, g_ids) == ranks
    assert mean_ap(dist, q_ids, g_ids) == pytest.approx(ap, abs=1e-12)


def test_missing_gallery_identity_raises():
    with pytest.raises(ValueError, match="no gallery entry"):
        cmc(np.zeros((1, 2)), [5], [0, 1])
    with pytest.raises(ShapeMismatchError):
        mean_ap(np.zeros((2, 2)), [0], [0, 1])


def test_pairwise_distances():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = np.array([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(pairwise_distances(q, g), [[0, 2], [1, 1]])
    with pytest.raises(ShapeMismatchError):
        pairwise_distances(q, np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_bounds(seed):
    dist, q_ids, g_ids = random_instance(seed)
    r = cmc(dist, q_ids, g_ids, ks=(1, 3, 50))
    assert 0 <= r[1] <= r[3] <= r[50] == 1.0
    assert 0 < mean_ap(dist, q_ids, g_ids) <= 1


def test_evaluate_retrieval_on_encoder(rng):
    p = encoder.init_params(3, seeded_rng(0))
    imgs = [rng.random((16, 8, 3)).astype(np.float32) for _ in range(3)]
    gallery = [Sample(im, i, Modality.RGB) for i, im in enumerate(imgs)]
    # identical input routed through the same stem: perfect retrieval
    queries = [Sample(im, i, Modality.RGB) for i, im in enumerate(imgs)]
    rep = evaluate_retrieval(p, queries, gallery)
    assert rep.rank_k[1] == 1.0 and rep.map == 1.0
    assert rep.n_queries == 3 and rep.n_gallery == 3


# ---------------------------------------------------------------------------
# diagnostics

def linear_toy(seed=0, shape=(3, 4, 4)):
    r = np.random.default_rng(seed)
    u = torch.from_numpy(r.normal(size=5))
    v = torch.from_numpy(r.normal(size=int(np.prod(shape))))
    model = lambda x: (x.reshape(len(x), -1) @ v)[:, None] * u[None, :]
    x = torch.full((4,) + shape, 0.5, dtype=torch.float64)
    return model, x, float(u.norm()), float(v.abs().sum())


def test_gamma_zero_at_zero_epsilon():
    model, x, *_ = linear_toy()
    assert estimate_gamma(model, x, 0.0, np.random.default_rng(0)) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_gamma_matches_linear_maximum(seed):
    model, x, un, v1 = linear_toy(seed)
    for eps in (0.01, 0.05, 0.2):
        _, adv = estimate_gamma(model, x, eps, np.random.default_rng(seed))
        assert adv == pytest.approx(eps * un * v1, rel=0.05)


def test_gamma_non_decreasing_in_epsilon():
    model, x, *_ = linear_toy(3)
    prev = (0.0, 0.0)
    for eps in np.linspace(0, 0.4, 9):
        cur = estimate_gamma(model, x, float(eps), np.random.default_rng(11))
        assert cur[0] >= prev[0] - 1e-12 and cur[1] >= prev[1] - 1e-12
        assert cur[1] >= cur[0]
        prev = cur


def test_lipschitz_ratio_of_linear_map():
    # f(x) = 2x has ratio exactly 2 for every pair
    model = lambda x: 2 * x.reshape(len(x), -1)
    x = torch.from_numpy(np.random.default_rng(0).random((6, 3, 2, 2)))
    assert lipschitz_ratio(model, x, np.random.default_rng(1)) == pytest.approx(2.0)


@pytest.mark.parametrize("seed", range(5))
def test_proxy_identical_domains_low(seed):
    r = np.random.default_rng(seed)
    feats = r.normal(size=(400, 16))
    assert discrepancy_proxy(feats[:200], feats[200:], np.random.default_rng(seed)) < 0.15


@pytest.mark.parametrize("seed", range(5))
def test_proxy_separated_gaussians_high(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(200, 16))
    b = r.normal(size=(200, 16)) + 4.0
    assert discrepancy_proxy(a, b, np.random.default_rng(seed)) > 0.9


def test_proxy_input_checks():
    with pytest.raises(ValueError):
        discrepancy_proxy(np.zeros((5, 2)), np.zeros((20, 2)), np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        discrepancy_proxy(np.zeros((20, 2)), np.zeros((20, 3)), np.random.default_rng(0))


def test_diagnose_leaves_params_untouched(small_splits):
    p = encoder.init_params(small_splits.n_classes, seeded_rng(0))
    before = {k: v.clone() for k, v in p.items()}
    rep = diagnose(p, small_splits.meta_train, small_splits.query, 8 / 255, np.random.default_rng(0), n=12)
    for k in p:
        assert torch.equal(p[k], before[k])
    assert 0 <= rep.gamma_hat <= rep.gamma_adv_hat
    assert rep.delta_local_mean <= rep.delta_global_mean
    assert 0 <= rep.discrepancy_proxy <= 1
    assert "heuristic" in rep.notes["discrepancy_proxy"]
