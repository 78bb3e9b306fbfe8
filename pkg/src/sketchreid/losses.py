"""Training objectives.

All functions take and return torch tensors so they compose with the
encoder under autograd; numpy inputs are accepted and converted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import ShapeMismatchError


def _t(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def _ids(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.long)


def info_nce(anchors, positives, ids, tau: float = 0.1) -> torch.Tensor:
    """Temperature-scaled InfoNCE over unit-norm embeddings.

    For anchor i the denominator holds its positive plus every other anchor
    with a different identity; same-identity anchors are not negatives.
    """
    a = _t(anchors)
    p = _t(positives, a.dtype)
    ids = _ids(ids)
    if a.shape != p.shape:
        raise ShapeMismatchError(f"anchors {tuple(a.shape)} vs positives {tuple(p.shape)}")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    neg_mask = ids[:, None] != ids[None, :]
    if not bool(neg_mask.any(dim=1).all()):
        raise ValueError("an anchor has no negative in the batch; use a larger batch with mixed identities")
    pos = (a * p).sum(dim=1, keepdim=True) / tau
    sim = (a @ a.T) / tau
    sim = sim.masked_fill(~neg_mask, float("-inf"))
    logits = torch.cat([pos, sim], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos.squeeze(1)).mean()


def _distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # clamp keeps the sqrt differentiable when a == b
    return (a - b).pow(2).sum(dim=-1).clamp_min(1e-24).sqrt()


def mine_batch_hard(f_adv, bank, ids_adv, ids_bank) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices of the farthest same-identity and nearest other-identity bank entries."""
    ids_adv, ids_bank = _ids(ids_adv), _ids(ids_bank)
    with torch.no_grad():
        d2 = torch.cdist(f_adv.detach(), bank.detach()).pow(2)
    same = ids_adv[:, None] == ids_bank[None, :]
    if not bool(same.any(dim=1).all()):
        raise ValueError("an adversarial anchor has no same-identity entry in the bank")
    if not bool((~same).any(dim=1).all()):
        raise ValueError("an adversarial anchor has no different-identity entry in the bank")
    pos_idx = d2.masked_fill(~same, float("-inf")).argmax(dim=1)
    neg_idx = d2.masked_fill(same, float("inf")).argmin(dim=1)
    return pos_idx, neg_idx


def adv_triplet(f_adv, bank, ids_adv, ids_bank, rho: float = 0.5) -> torch.Tensor:
    """mean_i max(||f_n - f_adv_i|| - ||f_p - f_adv_i|| + rho, 0) with batch-hard mining."""
    f_adv = _t(f_adv)
    bank = _t(bank, f_adv.dtype)
    if rho < 0:
        raise ValueError("rho must be >= 0")
    pos_idx, neg_idx = mine_batch_hard(f_adv, bank, ids_adv, ids_bank)
    d_pos = _distance(bank[pos_idx], f_adv)
    d_neg = _distance(bank[neg_idx], f_adv)
    return F.relu(d_neg - d_pos + rho).mean()


def adv_ce(logits, labels) -> torch.Tensor:
    logits = _t(logits)
    labels = _ids(labels)
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return F.cross_entropy(logits, labels)


def align_loss(f_clean, f_adv) -> torch.Tensor:
    f_clean = _t(f_clean)
    f_adv = _t(f_adv, f_clean.dtype)
    if f_clean.shape != f_adv.shape:
        raise ShapeMismatchError(f"clean {tuple(f_clean.shape)} vs adversarial {tuple(f_adv.shape)}")
    return (f_clean - f_adv).pow(2).sum(dim=1).mean()


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_adv: float
    l_align: float
    total: float

    def as_dict(self) -> dict:
        return {"l_c": self.l_c, "l_adv": self.l_adv, "l_align": self.l_align, "total": self.total}


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def phase_loss(l_c, l_adv, l_align) -> LossBreakdown:
    vals = [_scalar(v) for v in (l_c, l_adv, l_align)]
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite loss component in {vals}")
    return LossBreakdown(vals[0], vals[1], vals[2], vals[0] + vals[1] + vals[2])


def total_loss(meta_train: LossBreakdown, meta_test: LossBreakdown) -> float:
    out = meta_train.total + meta_test.total
    if not math.isfinite(out):
        raise ValueError("non-finite total loss")
    return out
