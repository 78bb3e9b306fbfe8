"""Acceptance criteria 1-8.

Each test prints one ``CRITERION n: PASS|FAIL ...`` line (collected in the
terminal summary) and then asserts, so a failing criterion is red in the
pytest report as well.
"""

import multiprocessing as mp
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import helpers
from helpers import brute_force, fd_check, gradcheck_setup, loss_functions, random_instance, sketch_oracle
from sketchreid import aa, encoder, metaloop
from sketchreid.core import TrainConfig, seeded_rng
from sketchreid.data import SyntheticSpec, generate_synthetic
from sketchreid.evaluation import cmc, discrepancy_proxy, estimate_gamma, mean_ap
from sketchreid.ktc import PerturbationState, perturb_step

REPO = Path(__file__).resolve().parents[1]

# Shared by every ablation variant: 200 cycles are only 200 outer steps, and at the
# default outer_lr (0.01) no variant leaves chance level; see README "Acceptance suite".
ABLATION_OVERRIDES: dict = {"outer_lr": 0.03}
ABLATION_SEEDS = range(5)
ABLATION_CYCLES = 200
REFERENCE_CORES = 4


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    helpers.ACCEPTANCE_LINES.append(line)
    print(line)


def test_criterion_1_irreproducibility_declared():
    readme = (REPO / "README.md").read_text()
    declared = "not reproducible" in readme.lower()
    try:
        encoder.init_params(10, seeded_rng(0), profile="resnet50")
        refused = False
    except NotImplementedError:
        refused = True
    ok = declared and refused
    report(1, ok, f"(README declaration: {declared}, ResNet-50 profile refused: {refused})")
    assert ok


def test_criterion_2_metric_oracles():
    t0 = time.time()
    mismatches = 0
    for seed in range(200):
        dist, q_ids, g_ids = random_instance(seed)
        ranks, ap = brute_force(dist.tolist(), q_ids.tolist(), g_ids.tolist())
        if cmc(dist, q_ids, g_ids) != ranks or mean_ap(dist, q_ids, g_ids) != pytest.approx(ap, abs=1e-12):
            mismatches += 1
    hand = mean_ap(np.array([[0.1, 0.2, 0.3, 0.4]]), [7], [7, 1, 7, 2])
    elapsed = time.time() - t0
    ok = mismatches == 0 and abs(hand - 5 / 6) < 1e-9 and elapsed < 10
    report(2, ok, f"(200 instances, {mismatches} mismatches; hand AP {hand:.12f}; {elapsed:.2f}s < 10s)")
    assert ok


def test_criterion_3_gradient_correctness():
    t0 = time.time()
    p, x, x_pos, eta, ids, rgb, sk = gradcheck_setup(seed=0, size=(64, 32), n_classes=5)
    worst, resampled = {}, 0
    for name, fn in loss_functions(x, x_pos, eta, ids, rgb, sk).items():
        worst[name], _, r = fd_check(fn, p, np.random.default_rng(len(name)), coords_per_tensor=5)
        resampled += r
    elapsed = time.time() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, ok, f"(max rel err: {detail}; {resampled} kink-straddling coordinates resampled; "
                  f"{elapsed:.1f}s < 60s)")
    assert ok


def test_criterion_4_ktc_invariants(small_splits, monkeypatch):
    t0 = time.time()
    rng = np.random.default_rng(0)
    eps = 8 / 255
    z = np.zeros((8, 8, 3))

    s = PerturbationState(z, z.copy(), eps, eps / 3, 0.9)
    bound_ok = True
    for _ in range(1000):
        g = rng.normal(size=z.shape) * rng.choice([1e-6, 1.0, 1e6])
        s = perturb_step(s, g, int(rng.choice([1, -1])))
        bound_ok &= bool(np.abs(s.eta).max() <= eps + 1e-9)

    g = rng.normal(size=z.shape)
    s = PerturbationState(z, z.copy(), eps, eps / 10, 0.9)
    geo_err = 0.0
    for k in range(1, 31):
        s = perturb_step(s, g)
        geo_err = max(geo_err, float(np.abs(s.delta - (1 - 0.9 ** k) / 0.1 * g / np.abs(g).sum()).max()))

    s = PerturbationState(z, z.copy(), eps, eps / 10, 0.0)
    sign_ok = True
    for _ in range(20):
        g = rng.normal(size=z.shape)
        nxt = perturb_step(s, g)
        sign_ok &= np.array_equal(nxt.eta, np.clip(s.eta + s.alpha * np.sign(g), -eps, eps))
        s = nxt

    # momentum buffer threading across one full cycle and into the next
    calls = []
    real = metaloop.optimize_eta

    def spy(params, x, route, ids, bank, ids_bank, pert, *a, **kw):
        out = real(params, x, route, ids, bank, ids_bank, pert, *a, **kw)
        calls.append((pert.phase, pert.delta.copy(), out.delta.copy()))
        return out

    monkeypatch.setattr(metaloop, "optimize_eta", spy)
    cfg = TrainConfig(cycles=1)
    state = metaloop.init_state(cfg, small_splits.n_classes, small_splits.image_shape, small_splits.label_map)
    srng = seeded_rng(0)
    for _ in range(cfg.meta_test_period):
        state, _ = metaloop.meta_train_step(
            state, metaloop.sample_meta_train_batch(small_splits.meta_train, srng, cfg), cfg)
    ep = metaloop.sample_episode(small_splits.support, small_splits.query, srng, cfg.n_way, state.train_identities)
    state, _ = metaloop.meta_test_step(state, ep, cfg)
    state = metaloop.meta_update(state, cfg)
    metaloop.meta_train_step(state, metaloop.sample_meta_train_batch(small_splits.meta_train, srng, cfg), cfg)
    chain_ok = len(calls) == 12 and all(np.array_equal(calls[i][2], calls[i + 1][1]) for i in range(11))
    phases = [c[0].value for c in calls]
    chain_ok &= phases[9:12] == ["meta_train", "meta_test", "meta_train"]

    elapsed = time.time() - t0
    ok = bound_ok and geo_err <= 1e-9 and sign_ok and chain_ok and elapsed < 30
    report(4, ok, f"(bound {bound_ok}, geometric err {geo_err:.1e}, theta=0 sign {sign_ok}, "
                  f"cross-phase buffer {chain_ok}; {elapsed:.1f}s < 30s)")
    assert ok


def test_criterion_5_aa_invariants():
    t0 = time.time()
    rng = np.random.default_rng(0)
    replace_ok = norms_ok = True
    for _ in range(100):
        h, w = int(rng.integers(8, 65)), int(rng.integers(8, 65))
        img, sk = rng.random((h, w, 3)), rng.random((h, w, 3))
        rect = aa.sample_rect(rng, h, w)
        out = aa.local_sketch_replace(img, sk, rect)
        mask = aa.rect_mask(rect, h, w).astype(bool)
        replace_ok &= np.array_equal(out[mask], sk[mask]) and np.array_equal(out[~mask], img[~mask])
        g, l = aa.delta_norms(img, sk, mask)
        norms_ok &= l <= g
    img, sk = rng.random((16, 12, 3)), rng.random((16, 12, 3))
    ident_ok = (np.array_equal(aa.local_sketch_replace(img, sk, aa.Rect.full(16, 12)), sk)
                and np.array_equal(aa.local_sketch_replace(img, sk, aa.Rect.empty()), img))
    oracle_err = max(float(np.abs(aa.sketch_transform(im) - sketch_oracle(im)).max())
                     for im in (rng.random((16, 12, 3)) for _ in range(3)))
    elapsed = time.time() - t0
    ok = replace_ok and norms_ok and ident_ok and oracle_err < 1e-6 and elapsed < 30
    report(5, ok, f"(replace exact {replace_ok}, local<=global {norms_ok}, full/empty {ident_ok}, "
                  f"oracle err {oracle_err:.1e}; {elapsed:.1f}s < 30s)")
    assert ok


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_corpus")
    generate_synthetic(SyntheticSpec(), root)
    return root / "manifest.csv"


def test_criterion_6_desk_learning_effect(default_corpus):
    ncpu = mp.cpu_count()
    # the budget is stated for a 4-core machine; scale it to the cores present
    budget = 30 * 60 * max(1.0, REFERENCE_CORES / ncpu)
    t0 = time.time()
    results = helpers.run_ablation(default_corpus, ABLATION_SEEDS, ABLATION_CYCLES, ABLATION_OVERRIDES)
    elapsed = time.time() - t0
    mean = {v: 100 * np.mean([r[2] for r in results if r[0] == v]) for v in helpers.ABLATION}
    per_seed = {v: [round(100 * r[2], 1) for r in sorted(results, key=lambda r: r[1]) if r[0] == v]
                for v in helpers.ABLATION}
    gain = mean["full"] - mean["baseline"]
    order = [mean[v] for v in ("baseline", "+AA", "+AA+KTC", "full")]
    monotone = all(b >= a - 1.0 for a, b in zip(order, order[1:]))
    ok_a = gain >= 5.0
    ok_time = elapsed < budget
    ok = ok_a and monotone and ok_time
    means = ", ".join(f"{v} {m:.1f}" for v, m in mean.items())
    report(6, ok, f"(mean Rank-1 %: {means}; full - baseline {gain:+.1f} >= 5: {ok_a}; "
                  f"ordering within 1 pt: {monotone}; {elapsed / 60:.1f} min on {ncpu} core(s), "
                  f"budget {budget / 60:.0f} min: {ok_time}; overrides {ABLATION_OVERRIDES})")
    print("per-seed Rank-1 %:", per_seed)
    assert ok


def test_criterion_7_schedule_and_determinism(small_splits, tmp_path):
    cfg = TrainConfig(cycles=3, seed=7, checkpoint_every=1)
    a = metaloop.run(cfg, small_splits, tmp_path / "a")
    metaloop.run(cfg, small_splits, tmp_path / "b")
    per_cycle = [[r["phase"] for r in a.records if r["cycle"] == c] for c in range(3)]
    schedule_ok = all(p == ["meta_train"] * 10 + ["meta_test", "meta_update"] for p in per_cycle)
    identical = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    resumed = metaloop.run(cfg, small_splits, tmp_path / "r", resume_from=tmp_path / "a" / "ckpt_00001")
    resume_ok = resumed.records == a.records[12:] and all(
        torch.equal(a.state.params[k], resumed.state.params[k]) for k in a.state.params)
    ok = schedule_ok and identical and resume_ok
    report(7, ok, f"(10/1/1 per cycle {schedule_ok}, bit-identical logs {identical}, resume {resume_ok})")
    assert ok


def test_criterion_8_diagnostics_sanity():
    g = np.random.default_rng(0)
    u = torch.from_numpy(g.normal(size=5))
    v = torch.from_numpy(g.normal(size=48))
    model = lambda x: (x.reshape(len(x), -1) @ v)[:, None] * u[None, :]
    x = torch.full((4, 3, 4, 4), 0.5, dtype=torch.float64)
    zero_ok = estimate_gamma(model, x, 0.0, np.random.default_rng(1)) == (0.0, 0.0)
    prev, mono_ok, worst = -1.0, True, 0.0
    for eps in np.linspace(0.01, 0.4, 8):
        _, adv = estimate_gamma(model, x, float(eps), np.random.default_rng(1))
        mono_ok &= adv >= prev
        prev = adv
        analytic = eps * float(u.norm()) * float(v.abs().sum())
        worst = max(worst, abs(adv - analytic) / analytic)
    same, sep = [], []
    for seed in range(5):
        r = np.random.default_rng(seed)
        f = r.normal(size=(400, 16))
        same.append(discrepancy_proxy(f[:200], f[200:], np.random.default_rng(seed)))
        sep.append(discrepancy_proxy(r.normal(size=(200, 16)), r.normal(size=(200, 16)) + 4.0,
                                     np.random.default_rng(seed)))
    ok = zero_ok and mono_ok and worst < 0.05 and max(same) < 0.15 and min(sep) > 0.9
    report(8, ok, f"(gamma(0)=0 {zero_ok}, monotone {mono_ok}, max rel err vs analytic {worst:.1e}; "
                  f"proxy identical max {max(same):.3f} < 0.15, separated min {min(sep):.3f} > 0.9)")
    assert ok
