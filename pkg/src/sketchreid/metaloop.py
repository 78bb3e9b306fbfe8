"""Episodic training: meta-train on RGB (+ augmented) batches, meta-test on
sketch episodes, then one outer update on the combined gradient.

Draw order from the run's single random source, per cycle:

1. for each meta-train step: identity choice, instance choice, then per
   sample an augmentation coin and (if taken) the rect draws;
2. the episode identity choice.

Nothing else consumes randomness during training, so equal seeds give
identical runs and a checkpoint that stores the generator state resumes
the exact trajectory.
"""

from __future__ import annotations

import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import aa, encoder
from .core import (Episode, Modality, Sample, TrainConfig, load_checkpoint, rng_from_state,
                   rng_state, save_checkpoint, seeded_rng)
from .ktc import Phase, PerturbationState, apply_tensor, eta_tensor, optimize_eta
from .losses import (LossBreakdown, adv_ce, align_loss, info_nce, phase_loss, total_loss)

log = logging.getLogger(__name__)


@dataclass
class MetaBatch:
    anchors: list
    positives: list

    @property
    def ids(self) -> list[int]:
        return [s.identity for s in self.anchors]


@dataclass
class MetaState:
    params: dict
    perturbation: PerturbationState
    velocity: dict
    train_identities: frozenset = frozenset()
    adapted: Optional[dict] = None
    step: int = 0
    cycle: int = 0
    train_grads: list = field(default_factory=list)
    test_grad: Optional[dict] = None

    @property
    def steps_this_cycle(self) -> int:
        return len(self.train_grads)


def init_state(config: TrainConfig, n_classes: int, image_shape: tuple,
               train_identities=(), dtype=torch.float32) -> MetaState:
    """Fresh state; encoder init draws from its own generator seeded by ``config.seed``."""
    params = encoder.init_params(n_classes, seeded_rng(config.seed + 1_000_003), config.encoder_profile,
                                 config.embed_dim, dtype)
    np_dtype = np.float64 if dtype == torch.float64 else np.float32
    pert = PerturbationState.from_config(config, image_shape[0], image_shape[1], np_dtype)
    velocity = {k: torch.zeros_like(v) for k, v in params.items()}
    return MetaState(params, pert, velocity, frozenset(train_identities))


# ---------------------------------------------------------------------------
# sampling

def sample_meta_train_batch(rgb_dataset: Sequence[Sample], rng: np.random.Generator,
                            config: TrainConfig, sketch_cache: Optional[dict] = None) -> MetaBatch:
    """P identities x K instances, each paired with a positive view.

    With probability ``aa_probability`` (when AA is enabled) the positive is
    the locally sketch-replaced version of the sample itself; otherwise it is
    the next instance of the same identity in the batch.
    """
    by_id: dict[int, list[int]] = {}
    for i, s in enumerate(rgb_dataset):
        by_id.setdefault(s.identity, []).append(i)
    if len(by_id) < 2:
        raise ValueError("meta-train dataset needs at least 2 identities")
    eligible = sorted(i for i, idx in by_id.items() if len(idx) >= config.k_instances)
    if len(eligible) < config.p_identities:
        raise ValueError(
            f"dataset too small for P x K = {config.p_identities} x {config.k_instances}: "
            f"only {len(eligible)} identities have {config.k_instances} images"
        )
    ids = rng.choice(eligible, size=config.p_identities, replace=False)
    chosen: list[int] = []
    for ident in ids:
        chosen.extend(int(j) for j in rng.choice(by_id[int(ident)], size=config.k_instances, replace=False))
    anchors = [rgb_dataset[j] for j in chosen]
    positives = []
    k = config.k_instances
    for n, j in enumerate(chosen):
        s = rgb_dataset[j]
        if config.use_aa and rng.random() < config.aa_probability:
            if sketch_cache is not None and j in sketch_cache:
                sk = sketch_cache[j]
            else:
                sk = aa.sketch_transform(s.image, config.sketch_sigma, config.sketch_guard)
                if sketch_cache is not None:
                    sketch_cache[j] = sk
            rect = aa.sample_rect(rng, s.image.shape[0], s.image.shape[1], config.rect_area, config.rect_aspect)
            positives.append(Sample(aa.local_sketch_replace(s.image, sk, rect), s.identity, Modality.AUGMENTED))
        else:
            group = n - n % k
            positives.append(anchors[group + (n + 1) % k])
    return MetaBatch(anchors, positives)


def sample_episode(support: Sequence[Sample], query: Sequence[Sample], rng: np.random.Generator,
                   n_way: int = 5, exclude_ids=()) -> Episode:
    """n_way identities with both RGB support and sketch query views, never from ``exclude_ids``."""
    exclude = set(exclude_ids)
    sup_ids = {s.identity for s in support if s.modality is Modality.RGB} - exclude
    q_ids = {s.identity for s in query if s.modality is Modality.SKETCH} - exclude
    eligible = sorted(sup_ids & q_ids)
    if len(eligible) < n_way:
        raise ValueError(f"only {len(eligible)} eligible episode identities, need {n_way}")
    chosen = set(int(i) for i in rng.choice(eligible, size=n_way, replace=False))
    return Episode(tuple(s for s in support if s.identity in chosen and s.modality is Modality.RGB),
                   tuple(s for s in query if s.identity in chosen and s.modality is Modality.SKETCH),
                   n_way)


# ---------------------------------------------------------------------------
# steps

def _stack(samples: Sequence[Sample], dtype, route_mode: str):
    x = encoder.to_tensor(np.stack([s.image for s in samples]), dtype)
    return x, encoder.sketch_route([s.modality for s in samples], route_mode)


def _loss_and_grads(fn, params: dict):
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    parts = fn(leaves)
    total = parts[0] + parts[1] + parts[2]
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss {float(total.detach())}")
    names = list(leaves)
    grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
    grads = {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, grads)}
    return phase_loss(*parts), grads


def _zero_if(flag: bool, like: torch.Tensor) -> torch.Tensor:
    return like if flag else like.new_zeros(())


def meta_train_loss(params: dict, x, route, pos_x, pos_route, ids, eta, config: TrainConfig):
    """(l_c, l_adv, l_align) tensors for one meta-train batch."""
    raw, z = encoder.embed(params, x, route)
    _, z_pos = encoder.embed(params, pos_x, pos_route)
    l_c = info_nce(z, z_pos, ids, config.tau)
    if eta is not None:
        raw_adv, z_adv = encoder.embed(params, apply_tensor(x, eta), route)
        l_adv = adv_ce(encoder.classify(raw_adv, params), ids)
        l_align = _zero_if(config.use_align, align_loss(z, z_adv))
    else:
        # eta == 0: the adversarial view is the clean view
        l_adv = adv_ce(encoder.classify(raw, params), ids)
        l_align = raw.new_zeros(())
    return l_c, l_adv, l_align


def meta_train_step(state: MetaState, batch: MetaBatch, config: TrainConfig) -> tuple[MetaState, LossBreakdown]:
    dtype = state.params["embed.weight"].dtype
    x, route = _stack(batch.anchors, dtype, config.augmented_route)
    pos_x, pos_route = _stack(batch.positives, dtype, config.augmented_route)
    ids = torch.tensor(batch.ids)
    eta = None
    if config.use_ktc:
        pert = state.perturbation.replace(phase=Phase.META_TRAIN)
        if not config.universal:
            pert = pert.replace(eta=np.zeros_like(pert.eta))
        with torch.no_grad():
            _, bank_z = encoder.embed(state.params, torch.cat([x, pos_x]), torch.cat([route, pos_route]))
        pert = optimize_eta(state.params, x, route, ids, bank_z, torch.cat([ids, ids]), pert,
                            config.rho, config.update_direction, config.max_iter)
        state.perturbation = pert
        eta = eta_tensor(pert.eta, dtype)

    breakdown, grads = _loss_and_grads(
        lambda p: meta_train_loss(p, x, route, pos_x, pos_route, ids, eta, config), state.params)
    state.train_grads.append(grads)
    state.step += 1
    if len(state.train_grads) == config.meta_test_period:
        state.adapted = {k: (v - config.inner_lr * grads[k]).detach() for k, v in state.params.items()}
    return state, breakdown


def _episode_tensors(episode: Episode, dtype):
    ids = episode.identities
    local = {ident: i for i, ident in enumerate(ids)}
    sup_x, sup_route = _stack(episode.support, dtype, "sketch")
    q_x, q_route = _stack(episode.query, dtype, "sketch")
    sup_lab = torch.tensor([local[s.identity] for s in episode.support])
    q_lab = torch.tensor([local[s.identity] for s in episode.query])
    # pair the k-th support view of an identity with its k-th sketch (cyclically)
    q_by_id: dict[int, list[int]] = {}
    for j, s in enumerate(episode.query):
        q_by_id.setdefault(s.identity, []).append(j)
    seen: dict[int, int] = {}
    match = []
    for s in episode.support:
        k = seen.get(s.identity, 0)
        seen[s.identity] = k + 1
        opts = q_by_id[s.identity]
        match.append(opts[k % len(opts)])
    return sup_x, sup_route, q_x, q_route, sup_lab, q_lab, torch.tensor(match)


def meta_test_loss(params: dict, sup_x, sup_route, q_x, q_route, sup_lab, match, n_way, eta,
                   config: TrainConfig):
    raw_s, z_s = encoder.embed(params, sup_x, sup_route)
    _, z_q = encoder.embed(params, q_x, q_route)
    l_c = info_nce(z_s, z_q[match], sup_lab, config.tau)
    head = encoder.prototype_head(raw_s, sup_lab, n_way)
    if eta is not None:
        raw_a, z_a = encoder.embed(params, apply_tensor(sup_x, eta), sup_route)
        l_adv = adv_ce(encoder.classify(raw_a, head), sup_lab)
        l_align = _zero_if(config.use_align, align_loss(z_s, z_a))
    else:
        l_adv = adv_ce(encoder.classify(raw_s, head), sup_lab)
        l_align = raw_s.new_zeros(())
    return l_c, l_adv, l_align


def meta_test_step(state: MetaState, episode: Episode, config: TrainConfig) -> tuple[MetaState, LossBreakdown]:
    """Evaluate the adapted parameters on a sketch episode and cache the gradient."""
    if state.adapted is None:
        raise RuntimeError("meta_test_step needs adapted parameters; run the meta-train phase first")
    leaked = set(episode.identities) & state.train_identities
    if leaked:
        raise ValueError(f"episode identities {sorted(leaked)} overlap the meta-train pool")
    w_adapted = state.adapted
    dtype = w_adapted["embed.weight"].dtype
    sup_x, sup_route, q_x, q_route, sup_lab, q_lab, match = _episode_tensors(episode, dtype)
    eta = None
    if config.use_ktc:
        pert = state.perturbation.replace(phase=Phase.META_TEST)
        with torch.no_grad():
            _, bank_z = encoder.embed(w_adapted, q_x, q_route)
        pert = optimize_eta(w_adapted, sup_x, sup_route, sup_lab, bank_z, q_lab, pert,
                            config.rho, config.update_direction, config.max_iter)
        state.perturbation = pert
        eta = eta_tensor(pert.eta, dtype)
    breakdown, grads = _loss_and_grads(
        lambda p: meta_test_loss(p, sup_x, sup_route, q_x, q_route, sup_lab, match,
                                 episode.n_way, eta, config), w_adapted)
    # first-order: the gradient at w' stands in for the gradient at w
    state.test_grad = grads
    return state, breakdown


def meta_update(state: MetaState, config: TrainConfig) -> MetaState:
    """w <- w - outer_lr * v,  v <- mu * v + (mean meta-train grad + meta-test grad)."""
    if not state.train_grads or state.test_grad is None:
        raise RuntimeError("meta_update needs cached meta-train and meta-test gradients")
    n = len(state.train_grads)
    new_params, new_vel = {}, {}
    for k, w in state.params.items():
        g = sum(gr[k] for gr in state.train_grads) / n + state.test_grad[k]
        v = config.outer_momentum * state.velocity[k] + g
        new_vel[k] = v
        new_params[k] = w - config.outer_lr * v
    state.params = new_params
    state.velocity = new_vel
    state.adapted = None
    state.train_grads = []
    state.test_grad = None
    state.cycle += 1
    return state


# ---------------------------------------------------------------------------
# full run

def _record(cycle: int, step: int, phase: str, bd: LossBreakdown) -> dict:
    return {"cycle": cycle, "step": step, "phase": phase, **bd.as_dict()}


def _mean_breakdown(items: Sequence[LossBreakdown]) -> LossBreakdown:
    n = len(items)
    return phase_loss(sum(b.l_c for b in items) / n, sum(b.l_adv for b in items) / n,
                      sum(b.l_align for b in items) / n)


def save_state(path, state: MetaState, config: TrainConfig, rng: np.random.Generator,
               label_map: Optional[dict] = None) -> Path:
    if state.train_grads or state.adapted is not None:
        raise RuntimeError("checkpoints are only written between cycles")
    meta = {"cycle": state.cycle, "step": state.step, "rng": rng_state(rng),
            "train_identities": sorted(int(i) for i in state.train_identities),
            "label_map": {str(k): v for k, v in (label_map or {}).items()},
            "dtype": str(state.params["embed.weight"].dtype)}
    extra = {f"velocity/{k}": v for k, v in state.velocity.items()}
    return save_checkpoint(path, state.params, state.perturbation, config, extra, meta)


def load_state(path, like: Optional[dict] = None) -> tuple[MetaState, TrainConfig, np.random.Generator, dict]:
    ckpt = load_checkpoint(path, like)
    params = {k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()}
    velocity = {k[len("velocity/"):]: torch.from_numpy(v.copy())
                for k, v in ckpt.extra.items() if k.startswith("velocity/")}
    for k in params:
        velocity.setdefault(k, torch.zeros_like(params[k]))
    meta = ckpt.meta
    state = MetaState(params, ckpt.perturbation, velocity,
                      frozenset(meta.get("train_identities", ())),
                      step=int(meta.get("step", 0)), cycle=int(meta.get("cycle", 0)))
    rng = rng_from_state(meta["rng"]) if "rng" in meta else seeded_rng(ckpt.config.seed)
    label_map = {int(k): v for k, v in meta.get("label_map", {}).items()}
    return state, ckpt.config, rng, label_map


@dataclass
class RunResult:
    state: MetaState
    records: list
    rng: np.random.Generator


def run(config: TrainConfig, splits, out_dir=None, resume_from=None, on_cycle=None) -> RunResult:
    """Repeat [meta_test_period x meta_train_step, sample_episode, meta_test_step,
    meta_update] until ``config.cycles`` cycles are done.

    ``splits`` is a :class:`~sketchreid.data.Splits`. With ``out_dir`` the
    metrics log is appended to ``metrics.jsonl`` and checkpoints are written
    every ``checkpoint_every`` cycles plus once at the end.
    """
    train_ids = frozenset(splits.label_map)
    if resume_from is not None:
        state, _, rng, _ = load_state(resume_from)
    else:
        state = init_state(config, splits.n_classes, splits.image_shape, train_ids)
        rng = seeded_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.jsonl", "a" if resume_from is not None else "w")
    records: list[dict] = []
    sketch_cache: dict = {}

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")

    try:
        while state.cycle < config.cycles:
            cycle = state.cycle
            train_bds = []
            for _ in range(config.meta_test_period):
                try:
                    batch = sample_meta_train_batch(splits.meta_train, rng, config, sketch_cache)
                    state, bd = meta_train_step(state, batch, config)
                except Exception as exc:
                    raise RuntimeError(f"cycle {cycle}, step {state.step}: {exc}") from exc
                train_bds.append(bd)
                emit(_record(cycle, state.step, "meta_train", bd))
            try:
                episode = sample_episode(splits.support, splits.query, rng, config.n_way, train_ids)
                state, test_bd = meta_test_step(state, episode, config)
                state = meta_update(state, config)
            except Exception as exc:
                raise RuntimeError(f"cycle {cycle}, meta-test/update: {exc}") from exc
            emit(_record(cycle, state.step, "meta_test", test_bd))
            mean_train = _mean_breakdown(train_bds)
            upd = phase_loss(mean_train.l_c + test_bd.l_c, mean_train.l_adv + test_bd.l_adv,
                             mean_train.l_align + test_bd.l_align)
            assert math.isclose(upd.total, total_loss(mean_train, test_bd), rel_tol=1e-12, abs_tol=1e-12)
            emit(_record(cycle, state.step, "meta_update", upd))
            if log_file is not None:
                log_file.flush()
            if out is not None and config.checkpoint_every and state.cycle % config.checkpoint_every == 0:
                save_state(out / f"ckpt_{state.cycle:05d}", state, config, rng, splits.label_map)
            if on_cycle is not None:
                on_cycle(state, rng)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_state(out / "final", state, config, rng, splits.label_map)
    return RunResult(state, records, rng)


def adapt(params: dict, episode: Episode, config: TrainConfig, eta: Optional[np.ndarray] = None,
          steps: int = 1) -> dict:
    """Fine-tune on one target episode with the meta-test objective (``steps`` plain SGD steps)."""
    w = {k: v.detach() for k, v in params.items()}
    dtype = w["embed.weight"].dtype
    sup_x, sup_route, q_x, q_route, sup_lab, _, match = _episode_tensors(episode, dtype)
    eta_t = None if eta is None or not np.any(eta) else eta_tensor(eta, dtype)
    for _ in range(steps):
        _, grads = _loss_and_grads(
            lambda p: meta_test_loss(p, sup_x, sup_route, q_x, q_route, sup_lab, match,
                                     episode.n_way, eta_t, config), w)
        w = {k: (v - config.inner_lr * grads[k]).detach() for k, v in w.items()}
    return w
