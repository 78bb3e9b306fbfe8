"""Shared domain types, run configuration, seeded randomness and checkpoints."""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
MIN_SIDE = 8


class ConfigError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class Modality(enum.Enum):
    RGB = "rgb"
    SKETCH = "sketch"
    AUGMENTED = "augmented"


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an H x W x 3 float image and return it as an ndarray."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatchError(f"{name}: expected HxWx3, got {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ShapeMismatchError(
            f"{name}: height and width must be >= {MIN_SIDE}, got {img.shape[:2]}"
        )
    if not np.issubdtype(img.dtype, np.floating):
        raise TypeError(f"{name}: expected floating dtype, got {img.dtype}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name}: non-finite values")
    return img


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    identity: int
    modality: Modality
    camera: Optional[int] = None

    def __post_init__(self):
        if self.identity < 0:
            raise ValueError(f"identity must be non-negative, got {self.identity}")
        if self.camera is not None and self.camera < 0:
            raise ValueError(f"camera must be non-negative, got {self.camera}")
        if not isinstance(self.modality, Modality):
            raise ValueError(f"unknown modality tag {self.modality!r}")


@dataclass(frozen=True, eq=False)
class Episode:
    support: tuple
    query: tuple
    n_way: int = 5

    @property
    def identities(self) -> list[int]:
        return sorted({s.identity for s in self.support} | {s.identity for s in self.query})

    def __post_init__(self):
        if any(s.modality is not Modality.RGB for s in self.support):
            raise ValueError("episode support must be RGB samples")
        if any(s.modality is not Modality.SKETCH for s in self.query):
            raise ValueError("episode query must be SKETCH samples")
        ids = self.identities
        if len(ids) != self.n_way:
            raise ValueError(f"episode spans {len(ids)} identities, expected {self.n_way}")


def seeded_rng(seed: int) -> np.random.Generator:
    """All sampling decisions in a run draw from one of these, in program order."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: Mapping) -> np.random.Generator:
    bitgen = np.random.PCG64()
    bitgen.state = dict(state)
    return np.random.Generator(bitgen)


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``epsilon`` is given in 8-bit pixel units and converted to the [0, 1]
    image scale by :attr:`epsilon_unit`. ``alpha`` defaults to ``epsilon / 10``
    in the same units.
    """

    tau: float = 0.1
    rho: float = 0.5
    theta: float = 0.9
    epsilon: float = 8.0
    alpha: Optional[float] = None
    max_iter: int = 10
    meta_test_period: int = 10
    batch_size: int = 32
    p_identities: int = 8
    k_instances: int = 4
    inner_lr: float = 0.01
    outer_lr: float = 0.01
    outer_momentum: float = 0.9
    seed: int = 0
    update_direction: int = 1
    encoder_profile: str = "desk"
    embed_dim: int = 64
    n_way: int = 5
    cycles: int = 200
    checkpoint_every: int = 0
    adaptation_steps: int = 1
    # augmentation
    use_aa: bool = True
    aa_probability: float = 0.5
    sketch_sigma: float = 2.0
    sketch_guard: float = 1e-4
    rect_area: tuple = (0.2, 0.5)
    rect_aspect: tuple = (0.5, 2.0)
    augmented_route: str = "sketch"
    # perturbation
    use_ktc: bool = True
    use_align: bool = True
    universal: bool = True
    # data
    data_root: str = ""
    manifest: str = "manifest.csv"

    def __post_init__(self):
        self.rect_area = tuple(float(v) for v in self.rect_area)
        self.rect_aspect = tuple(float(v) for v in self.rect_aspect)
        if self.alpha is None:
            self.alpha = self.epsilon / 10.0
        self.validate()

    @property
    def epsilon_unit(self) -> float:
        return self.epsilon / 255.0

    @property
    def alpha_unit(self) -> float:
        return self.alpha / 255.0

    def validate(self) -> None:
        checks = [
            ("tau", self.tau > 0, "must be > 0"),
            ("rho", self.rho >= 0, "must be >= 0"),
            ("theta", 0 <= self.theta < 1, "must lie in [0, 1)"),
            ("epsilon", self.epsilon > 0, "must be > 0"),
            ("alpha", self.alpha is not None and self.alpha > 0, "must be > 0"),
            ("max_iter", self.max_iter >= 0, "must be >= 0"),
            ("meta_test_period", self.meta_test_period >= 1, "must be >= 1"),
            ("p_identities", self.p_identities >= 2, "must be >= 2"),
            ("k_instances", self.k_instances >= 2, "must be >= 2"),
            ("batch_size", self.batch_size == self.p_identities * self.k_instances,
             "must equal p_identities * k_instances"),
            ("inner_lr", self.inner_lr >= 0, "must be >= 0"),
            ("outer_lr", self.outer_lr >= 0, "must be >= 0"),
            ("outer_momentum", 0 <= self.outer_momentum < 1, "must lie in [0, 1)"),
            ("update_direction", self.update_direction in (1, -1), "must be +1 or -1"),
            ("encoder_profile", self.encoder_profile in ("desk", "resnet50"),
             "must be 'desk' or 'resnet50'"),
            ("embed_dim", self.embed_dim >= 1, "must be >= 1"),
            ("n_way", self.n_way >= 2, "must be >= 2"),
            ("cycles", self.cycles >= 0, "must be >= 0"),
            ("checkpoint_every", self.checkpoint_every >= 0, "must be >= 0"),
            ("adaptation_steps", self.adaptation_steps >= 0, "must be >= 0"),
            ("aa_probability", 0 <= self.aa_probability <= 1, "must lie in [0, 1]"),
            ("sketch_sigma", self.sketch_sigma > 0, "must be > 0"),
            ("sketch_guard", self.sketch_guard > 0, "must be > 0"),
            ("rect_area", len(self.rect_area) == 2
             and 0 < self.rect_area[0] <= self.rect_area[1] <= 1, "must be 0 < lo <= hi <= 1"),
            ("rect_aspect", len(self.rect_aspect) == 2
             and 0 < self.rect_aspect[0] <= self.rect_aspect[1], "must be 0 < lo <= hi"),
            ("augmented_route", self.augmented_route in ("sketch", "rgb"),
             "must be 'sketch' or 'rgb'"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name} {msg} (got {getattr(self, name)!r})")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["rect_area"] = list(self.rect_area)
        d["rect_aspect"] = list(self.rect_aspect)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**dict(d))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# checkpoints

def _tensor_to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".bin"


def save_checkpoint(path, params: Mapping, perturbation=None, config: Optional[TrainConfig] = None,
                    extra_tensors: Optional[Mapping] = None, meta: Optional[Mapping] = None) -> Path:
    """Write a checkpoint directory.

    Every tensor is stored as little-endian float32, row-major, one file per
    tensor. ``manifest.json`` records the format version, encoder profile,
    tensor shapes, the config echo and any extra JSON-serializable ``meta``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    for name, t in params.items():
        tensors[f"params/{name}"] = _tensor_to_numpy(t)
    pert_meta = None
    if perturbation is not None:
        tensors["ktc/eta"] = np.asarray(perturbation.eta)
        tensors["ktc/delta"] = np.asarray(perturbation.delta)
        pert_meta = perturbation.scalars()
    for name, t in (extra_tensors or {}).items():
        tensors[f"extra/{name}"] = _tensor_to_numpy(t)

    shapes = {}
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        arr.tofile(path / _blob_name(name))
        shapes[name] = list(arr.shape)

    manifest = {
        "format_version": FORMAT_VERSION,
        "encoder_profile": config.encoder_profile if config is not None else None,
        "tensors": shapes,
        "config": config.to_dict() if config is not None else None,
        "perturbation": pert_meta,
        "meta": dict(meta or {}),
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return path


@dataclass
class Checkpoint:
    params: dict
    perturbation: Any
    config: Optional[TrainConfig]
    extra: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def load_checkpoint(path, like: Optional[Mapping] = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``like`` is an optional parameter dict (e.g. a freshly initialized
    encoder); every stored parameter shape is checked against it and the
    first mismatch is reported.
    """
    from .ktc import PerturbationState  # local import: ktc depends on core

    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointVersionError(
            f"unreadable manifest {manifest_path}: expected format_version {FORMAT_VERSION}"
        ) from exc
    found = manifest.get("format_version") if isinstance(manifest, dict) else None
    if found != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version mismatch: expected {FORMAT_VERSION}, found {found!r}"
        )

    tensors = {}
    for name, shape in manifest["tensors"].items():
        blob = path / _blob_name(name)
        if not blob.exists():
            raise FileNotFoundError(f"missing tensor blob {blob}")
        arr = np.fromfile(blob, dtype="<f4")
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise ShapeMismatchError(
                f"tensor {name}: expected {expected} values for shape {shape}, found {arr.size}"
            )
        tensors[name] = arr.reshape(shape).astype(np.float32)

    params = {k[len("params/"):]: v for k, v in tensors.items() if k.startswith("params/")}
    if like is not None:
        for name, ref in like.items():
            ref_shape = tuple(ref.shape)
            if name not in params:
                raise ShapeMismatchError(f"tensor {name}: expected shape {ref_shape}, found nothing")
            if tuple(params[name].shape) != ref_shape:
                raise ShapeMismatchError(
                    f"tensor {name}: expected shape {ref_shape}, found {tuple(params[name].shape)}"
                )
        extra_names = sorted(set(params) - set(like))
        if extra_names:
            raise ShapeMismatchError(f"tensor {extra_names[0]}: not present in target encoder")

    perturbation = None
    if manifest.get("perturbation") is not None:
        perturbation = PerturbationState.from_scalars(
            manifest["perturbation"], tensors["ktc/eta"], tensors["ktc/delta"]
        )
    config = TrainConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    extra = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return Checkpoint(params, perturbation, config, extra, manifest.get("meta", {}))


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"samples have differing image shapes: {sorted(shapes)}")
    return np.stack([s.image for s in samples])
