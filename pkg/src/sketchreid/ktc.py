"""Universal adversarial perturbation with momentum sign-gradient updates.

One perturbation ``eta`` (H x W x 3, bounded in L-inf by ``epsilon``) is
shared by every image in a run. Its momentum buffer ``delta`` is a single
persistent array: meta-train and meta-test iterations both read the value
left by whichever phase ran last.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from . import encoder
from .core import Sample, ShapeMismatchError, TrainConfig, stack_images
from .losses import adv_triplet

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    META_TRAIN = "meta_train"
    META_TEST = "meta_test"


@dataclass(frozen=True, eq=False)
class PerturbationState:
    eta: np.ndarray
    delta: np.ndarray
    epsilon: float
    alpha: float
    theta: float
    phase: Phase = Phase.META_TRAIN
    iteration: int = 0
    skipped: int = 0

    def __post_init__(self):
        if self.eta.shape != self.delta.shape:
            raise ShapeMismatchError(f"eta {self.eta.shape} and delta {self.delta.shape} differ")
        if self.epsilon < 0 or self.alpha <= 0 or not 0 <= self.theta < 1:
            raise ValueError("invalid epsilon/alpha/theta")

    @classmethod
    def zeros(cls, height: int, width: int, epsilon: float, alpha: float, theta: float,
              dtype=np.float32) -> "PerturbationState":
        z = np.zeros((height, width, 3), dtype=dtype)
        return cls(z, z.copy(), epsilon, alpha, theta)

    @classmethod
    def from_config(cls, config: TrainConfig, height: int, width: int,
                    dtype=np.float32) -> "PerturbationState":
        return cls.zeros(height, width, config.epsilon_unit, config.alpha_unit, config.theta, dtype)

    def replace(self, **changes) -> "PerturbationState":
        return dataclasses.replace(self, **changes)

    def scalars(self) -> dict:
        return {"epsilon": self.epsilon, "alpha": self.alpha, "theta": self.theta,
                "phase": self.phase.value, "iteration": self.iteration, "skipped": self.skipped}

    @classmethod
    def from_scalars(cls, d: Mapping, eta: np.ndarray, delta: np.ndarray) -> "PerturbationState":
        return cls(eta, delta, float(d["epsilon"]), float(d["alpha"]), float(d["theta"]),
                   Phase(d["phase"]), int(d["iteration"]), int(d["skipped"]))


def perturb_step(state: PerturbationState, grad_eta: np.ndarray, direction: int = 1) -> PerturbationState:
    """delta <- theta * delta + g / ||g||_1;  eta <- clip(eta + direction * alpha * sign(delta))."""
    g = np.asarray(grad_eta)
    if g.shape != state.eta.shape:
        raise ShapeMismatchError(f"gradient {g.shape} does not match eta {state.eta.shape}")
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    if np.isnan(g).any():
        raise FloatingPointError("NaN in perturbation gradient")
    dtype = state.delta.dtype
    l1 = np.abs(g, dtype=dtype).sum()
    if l1 == 0:
        log.debug("zero perturbation gradient at iteration %d; step skipped", state.iteration)
        return state.replace(skipped=state.skipped + 1)
    delta = (dtype.type(state.theta) * state.delta + g.astype(dtype) / l1).astype(dtype)
    step = dtype.type(direction * state.alpha) * np.sign(delta)
    eta = np.clip(state.eta + step, -state.epsilon, state.epsilon).astype(state.eta.dtype)
    return state.replace(eta=eta, delta=delta, iteration=state.iteration + 1)


def apply(x: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """x + eta clamped to the valid image range."""
    x = np.asarray(x)
    eta = np.asarray(eta)
    if x.shape[-3:] != eta.shape:
        raise ShapeMismatchError(f"image {x.shape} and perturbation {eta.shape} differ")
    return np.clip(x + eta, 0.0, 1.0).astype(x.dtype)


def apply_tensor(x: torch.Tensor, eta: torch.Tensor) -> torch.Tensor:
    """Tensor version of :func:`apply` for N x 3 x H x W batches and a 3 x H x W eta."""
    return (x + eta).clamp(0.0, 1.0)


def eta_tensor(eta: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(eta)).to(dtype).permute(2, 0, 1)


def optimize_eta(params: Mapping, x: torch.Tensor, route: torch.Tensor, ids, bank_z: torch.Tensor,
                 ids_bank, state: PerturbationState, rho: float, direction: int, max_iter: int,
                 history: Optional[list] = None, on_step=None) -> PerturbationState:
    """Core loop over pre-stacked tensors; see :func:`optimize_perturbation`."""
    params = {k: v.detach() for k, v in params.items()}
    bank_z = bank_z.detach()
    for _ in range(max_iter):
        eta = eta_tensor(state.eta, x.dtype).requires_grad_(True)
        _, f_adv = encoder.embed(params, apply_tensor(x, eta), route)
        loss = adv_triplet(f_adv, bank_z, ids, ids_bank, rho)
        (g,) = torch.autograd.grad(loss, eta)
        if history is not None:
            history.append(float(loss.detach()))
        if on_step is not None:
            on_step(state)
        state = perturb_step(state, g.permute(1, 2, 0).numpy(), direction)
    return state


def optimize_perturbation(params: Mapping, batch: Sequence[Sample], bank: Sequence[Sample],
                          state: PerturbationState, config: TrainConfig,
                          history: Optional[list] = None) -> PerturbationState:
    """Run ``config.max_iter`` momentum sign-gradient steps on the shared perturbation.

    Each iteration perturbs every image in ``batch`` with the same eta,
    scores the perturbed embeddings against the clean ``bank`` embeddings
    with the batch-hard triplet objective and steps eta along
    ``config.update_direction``.
    """
    if len(batch) == 0:
        raise ValueError("perturbation batch is empty")
    if config.max_iter == 0:
        return state
    dtype = params["embed.weight"].dtype
    x = encoder.to_tensor(stack_images(batch), dtype)
    if tuple(x.shape[2:]) != state.eta.shape[:2]:
        raise ShapeMismatchError(f"images {tuple(x.shape[2:])} vs perturbation {state.eta.shape[:2]}")
    route = encoder.sketch_route([s.modality for s in batch], config.augmented_route)
    bank_x = encoder.to_tensor(stack_images(bank), dtype)
    bank_route = encoder.sketch_route([s.modality for s in bank], config.augmented_route)
    with torch.no_grad():
        _, bank_z = encoder.embed(params, bank_x, bank_route)
    return optimize_eta(params, x, route, [s.identity for s in batch], bank_z,
                        [s.identity for s in bank], state, config.rho, config.update_direction,
                        config.max_iter, history)
