"""Retrieval metrics and robustness diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from . import encoder
from .aa import delta_norms, rect_mask, sample_rect, sketch_transform
from .core import Sample, ShapeMismatchError


@dataclass
class MetricsReport:
    rank_k: dict
    map: float
    n_queries: int
    n_gallery: int

    def as_dict(self) -> dict:
        return {"rank_k": {str(k): v for k, v in self.rank_k.items()}, "map": self.map,
                "n_queries": self.n_queries, "n_gallery": self.n_gallery}


@dataclass
class DiagnosticsReport:
    gamma_hat: float
    gamma_adv_hat: float
    lipschitz_ratio: float
    delta_global_mean: float
    delta_local_mean: float
    discrepancy_proxy: float
    notes: dict = field(default_factory=lambda: {
        "discrepancy_proxy": "heuristic linear-probe separability, not an H-divergence estimate"})

    def as_dict(self) -> dict:
        # NaN (estimate unavailable) becomes None so records stay valid JSON
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in self.__dict__.items()}


def pairwise_distances(queries, gallery) -> np.ndarray:
    """Cosine distance 1 - <q, g> between unit-norm embeddings."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeMismatchError(f"query {q.shape} and gallery {g.shape} dimensions differ")
    return 1.0 - q @ g.T


def _ranked_matches(dist: np.ndarray, q_ids, g_ids) -> np.ndarray:
    dist = np.asarray(dist)
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    if dist.shape != (len(q_ids), len(g_ids)):
        raise ShapeMismatchError(f"distance matrix {dist.shape} vs {len(q_ids)} queries, {len(g_ids)} gallery")
    missing = sorted(set(q_ids.tolist()) - set(g_ids.tolist()))
    if missing:
        raise ValueError(f"query identities {missing} have no gallery entry")
    # stable sort: ties resolve to the lower gallery index
    order = np.argsort(dist, axis=1, kind="stable")
    return g_ids[order] == q_ids[:, None]


def cmc(dist, q_ids, g_ids, ks: Sequence[int] = (1, 5, 10)) -> dict:
    matches = _ranked_matches(dist, q_ids, g_ids)
    first_hit = matches.argmax(axis=1)
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


def mean_ap(dist, q_ids, g_ids) -> float:
    matches = _ranked_matches(dist, q_ids, g_ids)
    hits = np.cumsum(matches, axis=1)
    ranks = np.arange(1, matches.shape[1] + 1)
    ap = (hits / ranks * matches).sum(axis=1) / matches.sum(axis=1)
    return float(ap.mean())


def retrieval_report(q_emb, q_ids, g_emb, g_ids, ks=(1, 5, 10)) -> MetricsReport:
    dist = pairwise_distances(q_emb, g_emb)
    return MetricsReport(cmc(dist, q_ids, g_ids, ks), mean_ap(dist, q_ids, g_ids), len(q_ids), len(g_ids))


def evaluate_retrieval(params: Mapping, queries: Sequence[Sample], gallery: Sequence[Sample],
                       ks=(1, 5, 10)) -> MetricsReport:
    q = encoder.encode(queries, params)
    g = encoder.encode(gallery, params)
    return retrieval_report(q, [s.identity for s in queries], g, [s.identity for s in gallery], ks)


# ---------------------------------------------------------------------------
# diagnostics

def estimate_gamma(model: Callable[[torch.Tensor], torch.Tensor], images, epsilon: float,
                   rng: np.random.Generator, n: Optional[int] = None,
                   n_steps: int = 10) -> tuple[float, float]:
    """Mean feature shift under random and under adversarial bounded perturbations.

    ``model`` maps an N x 3 x H x W tensor to N x D features. The random
    estimate draws delta ~ U[-eps, eps] per element (image then clamped to
    [0, 1]). The adversarial estimate starts from that same delta and takes
    ``n_steps`` sign-gradient ascent steps on ||f(x + eta) - f(x)||^2 with
    step eps / 4, keeping the largest shift seen, so it never falls below
    the random one for the same sample.
    """
    x = images if isinstance(images, torch.Tensor) else encoder.to_tensor(np.asarray(images), torch.float64)
    if n is not None:
        x = x[:n]
    if len(x) < 1:
        raise ValueError("estimate_gamma needs at least one sample")
    if epsilon == 0:
        return 0.0, 0.0
    delta = torch.from_numpy(rng.uniform(-epsilon, epsilon, size=tuple(x.shape))).to(x.dtype)
    with torch.no_grad():
        f0 = model(x)
        shift = (model((x + delta).clamp(0, 1)) - f0).norm(dim=1)
    gamma_hat = float(shift.mean())

    best = shift.clone()
    eta = delta.clone()
    step = epsilon / 4
    for _ in range(n_steps):
        eta.requires_grad_(True)
        obj = (model((x + eta).clamp(0, 1)) - f0).pow(2).sum()
        (g,) = torch.autograd.grad(obj, eta)
        with torch.no_grad():
            eta = (eta + step * g.sign()).clamp(-epsilon, epsilon)
            cur = (model((x + eta).clamp(0, 1)) - f0).norm(dim=1)
            best = torch.maximum(best, cur)
    return gamma_hat, float(best.mean())


def lipschitz_ratio(model: Callable[[torch.Tensor], torch.Tensor], images, rng: np.random.Generator,
                    n_pairs: int = 64) -> float:
    """max ||f(x) - f(x')|| / ||x - x'|| over random pairs of distinct images."""
    x = images if isinstance(images, torch.Tensor) else encoder.to_tensor(np.asarray(images), torch.float64)
    if len(x) < 2:
        raise ValueError("need at least two images")
    with torch.no_grad():
        f = model(x)
    best = 0.0
    for _ in range(n_pairs):
        i, j = rng.choice(len(x), size=2, replace=False)
        dx = float((x[i] - x[j]).norm())
        if dx > 0:
            best = max(best, float((f[i] - f[j]).norm()) / dx)
    return best


def _probe_balanced_accuracy(x_tr, y_tr, x_te, y_te, steps: int, lr: float) -> float:
    mu, sd = x_tr.mean(0), x_tr.std(0) + 1e-8
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    # class-balanced weights so unequal domain sizes do not bias the probe
    n1 = y_tr.sum()
    sw = np.where(y_tr == 1, 0.5 / n1, 0.5 / (len(y_tr) - n1))
    w = np.zeros(x_tr.shape[1])
    bias = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(x_tr @ w + bias)))
        r = (p - y_tr) * sw
        w -= lr * (x_tr.T @ r)
        bias -= lr * r.sum()
    pred = (x_te @ w + bias) > 0
    return (np.mean(pred[y_te == 1]) + np.mean(~pred[y_te == 0])) / 2.0


def discrepancy_proxy(features_src, features_tgt, rng: np.random.Generator, steps: int = 100,
                      lr: float = 0.5, repeats: int = 5) -> float:
    """Linear-probe domain separability, 2 * (balanced accuracy - 0.5) clipped to [0, 1].

    Each domain is split into random halves; a logistic separator trained
    for ``steps`` full-batch gradient steps on one half is scored on the
    other, in both directions. Balanced accuracy is averaged over both
    directions and ``repeats`` random splits.
    This is a heuristic stand-in for a hypothesis-class divergence.
    """
    a = np.asarray(features_src, dtype=np.float64)
    b = np.asarray(features_tgt, dtype=np.float64)
    if len(a) < 10 or len(b) < 10:
        raise ValueError("discrepancy_proxy needs at least 10 features per domain")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    ha, hb = len(a) // 2, len(b) // 2
    accs = []
    for _ in range(repeats):
        pa, pb = rng.permutation(len(a)), rng.permutation(len(b))
        folds = [(np.concatenate([a[ia], b[ib]]), np.concatenate([np.zeros(len(ia)), np.ones(len(ib))]))
                 for ia, ib in ((pa[:ha], pb[:hb]), (pa[ha:], pb[hb:]))]
        accs += [_probe_balanced_accuracy(*folds[i], *folds[1 - i], steps, lr) for i in (0, 1)]
    acc = np.mean(accs)
    return float(np.clip(2.0 * (acc - 0.5), 0.0, 1.0))


def diagnose(params: Mapping, rgb: Sequence[Sample], sketches: Sequence[Sample], epsilon: float,
             rng: np.random.Generator, sigma: float = 2.0, guard: float = 1e-4,
             n: int = 32) -> DiagnosticsReport:
    """Robustness and modality-gap diagnostics for an encoder."""
    p64 = encoder.cast(params, torch.float64)
    rgb = list(rgb)[:n]
    x = encoder.to_tensor(np.stack([s.image for s in rgb]), torch.float64)
    route = torch.zeros(len(rgb), dtype=torch.bool)

    def model(t: torch.Tensor) -> torch.Tensor:
        return encoder.embed(p64, t, route[: len(t)])[1]

    before = encoder.params_digest(params)
    gamma_hat, gamma_adv = estimate_gamma(model, x, epsilon, rng)
    lip = lipschitz_ratio(model, x, rng)
    g_norms, l_norms = [], []
    for s in rgb:
        sk = sketch_transform(s.image, sigma, guard)
        rect = sample_rect(rng, s.image.shape[0], s.image.shape[1])
        gn, ln = delta_norms(s.image, sk, rect_mask(rect, *s.image.shape[:2]))
        g_norms.append(gn)
        l_norms.append(ln)
    f_src = encoder.encode(rgb, params)
    f_tgt = encoder.encode(list(sketches)[: max(n, 10)], params)
    proxy = discrepancy_proxy(f_src, f_tgt, rng) if min(len(f_src), len(f_tgt)) >= 10 else float("nan")
    assert encoder.params_digest(params) == before
    return DiagnosticsReport(gamma_hat, gamma_adv, lip, float(np.mean(g_norms)), float(np.mean(l_norms)), proxy)
