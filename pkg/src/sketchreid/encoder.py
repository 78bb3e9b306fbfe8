"""Dual-path convolutional encoder.

Two modality-specific stems feed a shared trunk, an embedding head and an
identity classifier. Parameters live in a plain ``dict[str, Tensor]`` so the
meta-learning loop can hold base and adapted copies side by side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Modality, Sample, ShapeMismatchError, stack_images

Params = dict


@dataclass(frozen=True)
class EncoderProfile:
    name: str
    stem_channels: tuple
    trunk_channels: tuple
    supported: bool = True


PROFILES = {
    "desk": EncoderProfile("desk", stem_channels=(3, 16, 32), trunk_channels=(32, 64, 64)),
    # declared for completeness; ResNet-50 training is not available at desk scale
    "resnet50": EncoderProfile("resnet50", stem_channels=(3, 64, 256),
                               trunk_channels=(256, 2048), supported=False),
}


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(n_classes: int, rng: np.random.Generator, profile: str = "desk",
                embed_dim: int = 64, dtype=torch.float32) -> Params:
    """Seeded fan-in scaled uniform init; biases start at zero."""
    prof = PROFILES[profile]
    if not prof.supported:
        raise NotImplementedError(f"encoder profile {profile!r} is not supported at desk scale")
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    shapes: list[tuple[str, tuple, int]] = []
    for stem in ("rgb_stem", "sketch_stem"):
        chans = prof.stem_channels
        for i in range(len(chans) - 1):
            shapes.append((f"{stem}.{i}.weight", (chans[i + 1], chans[i], 3, 3), chans[i] * 9))
            shapes.append((f"{stem}.{i}.bias", (chans[i + 1],), 0))
    chans = prof.trunk_channels
    for i in range(len(chans) - 1):
        shapes.append((f"trunk.{i}.weight", (chans[i + 1], chans[i], 3, 3), chans[i] * 9))
        shapes.append((f"trunk.{i}.bias", (chans[i + 1],), 0))
    shapes.append(("embed.weight", (embed_dim, chans[-1]), chans[-1]))
    shapes.append(("embed.bias", (embed_dim,), 0))
    shapes.append(("classifier.weight", (n_classes, embed_dim), embed_dim))
    shapes.append(("classifier.bias", (n_classes,), 0))

    params = {}
    for name, shape, fan_in in shapes:
        values = _uniform(rng, shape, fan_in) if fan_in else np.zeros(shape)
        params[name] = torch.tensor(values, dtype=dtype)
    return params


def parameter_count(params: Mapping) -> int:
    return int(sum(p.numel() for p in params.values()))


def cast(params: Mapping, dtype) -> Params:
    return {k: v.to(dtype) for k, v in params.items()}


def clone(params: Mapping) -> Params:
    return {k: v.detach().clone() for k, v in params.items()}


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """N x H x W x 3 array (or tensor) -> N x 3 x H x W tensor."""
    if isinstance(images, torch.Tensor):
        t = images.to(dtype)
    else:
        t = torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ShapeMismatchError(f"expected N x H x W x 3 images, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2)


def sketch_route(modalities: Sequence[Modality], augmented_route: str = "sketch") -> torch.Tensor:
    """Boolean mask selecting the samples that go through the sketch stem."""
    out = []
    for m in modalities:
        if m is Modality.RGB:
            out.append(False)
        elif m is Modality.SKETCH:
            out.append(True)
        elif m is Modality.AUGMENTED:
            out.append(augmented_route == "sketch")
        else:
            raise ValueError(f"unknown modality tag {m!r}")
    return torch.tensor(out, dtype=torch.bool)


INPUT_CENTER = 0.5


def _stem(params: Mapping, prefix: str, x: torch.Tensor) -> torch.Tensor:
    # centre [0, 1] pixels; mostly-white sketches otherwise saturate the first layer
    x = x - INPUT_CENTER
    i = 0
    while f"{prefix}.{i}.weight" in params:
        x = F.relu(F.conv2d(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"],
                            stride=2, padding=1))
        i += 1
    return x


def features(params: Mapping, x: torch.Tensor, route: torch.Tensor) -> torch.Tensor:
    """Pre-normalization embeddings for an N x 3 x H x W batch.

    ``route[i]`` selects the sketch stem for sample ``i``.
    """
    if x.shape[1] != params["rgb_stem.0.weight"].shape[1]:
        raise ShapeMismatchError(f"expected 3 input channels, got {x.shape[1]}")
    if len(route) != x.shape[0]:
        raise ShapeMismatchError(f"route has {len(route)} entries for batch of {x.shape[0]}")
    n_sk = int(route.sum())
    if n_sk == 0:
        h = _stem(params, "rgb_stem", x)
    elif n_sk == len(route):
        h = _stem(params, "sketch_stem", x)
    else:
        idx_rgb = torch.nonzero(~route).squeeze(1)
        idx_sk = torch.nonzero(route).squeeze(1)
        h_rgb = _stem(params, "rgb_stem", x[idx_rgb])
        h_sk = _stem(params, "sketch_stem", x[idx_sk])
        h = h_rgb.new_empty((x.shape[0],) + h_rgb.shape[1:])
        h = h.index_copy(0, idx_rgb, h_rgb).index_copy(0, idx_sk, h_sk)
    i = 0
    while f"trunk.{i}.weight" in params:
        h = F.relu(F.conv2d(h, params[f"trunk.{i}.weight"], params[f"trunk.{i}.bias"], padding=1))
        i += 1
    h = h.mean(dim=(2, 3))
    return F.linear(h, params["embed.weight"], params["embed.bias"])


def normalize(raw: torch.Tensor) -> torch.Tensor:
    return raw / raw.norm(dim=1, keepdim=True).clamp_min(1e-12)


def embed(params: Mapping, x: torch.Tensor, route: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(raw, unit-normalized) embeddings."""
    raw = features(params, x, route)
    return raw, normalize(raw)


def encode(batch: Sequence[Sample], params: Mapping, augmented_route: str = "sketch") -> np.ndarray:
    """Unit-norm embeddings for a list of samples, as an N x D array."""
    if len(batch) == 0:
        return np.zeros((0, params["embed.weight"].shape[0]))
    dtype = params["embed.weight"].dtype
    x = to_tensor(stack_images(batch), dtype)
    route = sketch_route([s.modality for s in batch], augmented_route)
    with torch.no_grad():
        _, z = embed(params, x, route)
    return z.numpy()


def classify(embeddings, params: Mapping) -> torch.Tensor:
    emb = torch.as_tensor(embeddings, dtype=params["classifier.weight"].dtype)
    if emb.ndim != 2 or emb.shape[1] != params["classifier.weight"].shape[1]:
        raise ShapeMismatchError(
            f"classifier expects N x {params['classifier.weight'].shape[1]}, got {tuple(emb.shape)}"
        )
    return F.linear(emb, params["classifier.weight"], params["classifier.bias"])


def grad(loss_fn: Callable[[Params], torch.Tensor], params: Mapping) -> Params:
    """Gradient of a scalar loss with respect to every parameter tensor.

    ``loss_fn`` receives a differentiable copy of ``params``. Parameters the
    loss does not touch get exact zeros.
    """
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(leaves[k]) if g is None else g.detach())
            for k, g in zip(names, grads)}


def params_digest(params: Mapping) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def prototype_head(raw_support: torch.Tensor, labels: torch.Tensor, n_way: int) -> Params:
    """Temporary classifier over episode identities: unit class-mean directions, zero bias."""
    raw_support = raw_support.detach()
    protos = torch.stack([raw_support[labels == c].mean(0) for c in range(n_way)])
    return {"classifier.weight": normalize(protos),
            "classifier.bias": torch.zeros(n_way, dtype=raw_support.dtype)}

