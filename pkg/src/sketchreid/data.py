"""Dataset manifests and a procedural RGB + sketch person generator."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import Modality, Sample

SPLITS = ("meta_train", "support", "query", "gallery")
EPISODE_SPLITS = ("support", "query", "gallery")
HEADER = ["path", "identity", "modality", "split"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    identity: int
    modality: Modality
    split: str


@dataclass
class DatasetManifest:
    root: Path
    records: list = field(default_factory=list)

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in self.records:
            w.writerow([r.path, r.identity, r.modality.value, r.split])
        return buf.getvalue()

    def write(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.csv"
        path.write_bytes(self.to_csv().encode("utf-8"))
        return path

    def select(self, split: Optional[str] = None, modality: Optional[Modality] = None) -> list:
        return [r for r in self.records
                if (split is None or r.split == split) and (modality is None or r.modality is modality)]

    def identities(self, split: Optional[str] = None) -> set:
        return {r.identity for r in self.select(split)}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or next(csv.reader([lines[0]])) != HEADER:
        raise ManifestError(f"{path}:1: expected header {','.join(HEADER)}")
    records = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        rel, ident, modality, split = row
        try:
            ident_i = int(ident)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: identity {ident!r} is not an integer") from None
        if ident_i < 0:
            raise ManifestError(f"{path}:{lineno}: identity must be non-negative")
        try:
            mod = Modality(modality)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: unknown modality {modality!r}") from None
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        records.append(Record(rel, ident_i, mod, split))
    return DatasetManifest(path.parent, records)


def validate(manifest: DatasetManifest) -> list[str]:
    """Human-readable violations: missing files, split leakage, non-dense labels."""
    problems = []
    for r in manifest.records:
        if not (manifest.root / r.path).exists():
            problems.append(f"missing file: {r.path}")
    train_ids = manifest.identities("meta_train")
    episode_ids = set().union(*(manifest.identities(s) for s in EPISODE_SPLITS))
    for ident in sorted(train_ids & episode_ids):
        problems.append(f"split leakage: identity {ident} appears in meta_train and an episode split")
    all_ids = sorted(train_ids | episode_ids)
    if all_ids and all_ids != list(range(len(all_ids))):
        missing = sorted(set(range(max(all_ids) + 1)) - set(all_ids))
        problems.append(f"non-dense labels: identities {missing} are unused")
    return problems


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------------------
# split views used by training and evaluation

@dataclass
class Splits:
    """Decoded samples grouped by role.

    ``meta_train`` carries dense labels 0..C-1 (``label_map`` maps original
    identity -> dense label). Episode and evaluation samples keep their
    original identities.
    """

    meta_train: list
    support: list
    query: list
    eval_query: list
    gallery: list
    label_map: dict

    @property
    def n_classes(self) -> int:
        return len(self.label_map)

    @property
    def image_shape(self) -> tuple:
        return self.meta_train[0].image.shape


def load_splits(manifest: DatasetManifest) -> Splits:
    cache: dict[str, np.ndarray] = {}

    def sample(r: Record, identity: Optional[int] = None) -> Sample:
        if r.path not in cache:
            cache[r.path] = read_image(manifest.root / r.path)
        return Sample(cache[r.path], r.identity if identity is None else identity, r.modality)

    train_recs = manifest.select("meta_train", Modality.RGB)
    label_map = {ident: i for i, ident in enumerate(sorted({r.identity for r in train_recs}))}
    meta_train = [sample(r, label_map[r.identity]) for r in train_recs]
    train_ids = set(label_map)
    support_ids = manifest.identities("support") - train_ids
    gallery_ids = manifest.identities("gallery") - train_ids
    support = [sample(r) for r in manifest.select("support", Modality.RGB) if r.identity in support_ids]
    sketches = [r for r in manifest.select("query", Modality.SKETCH) if r.identity not in train_ids]
    query = [sample(r) for r in sketches if r.identity in support_ids]
    eval_query = [sample(r) for r in sketches if r.identity in gallery_ids]
    gallery = [sample(r) for r in manifest.select("gallery", Modality.RGB) if r.identity in gallery_ids]
    return Splits(meta_train, support, query, eval_query, gallery, label_map)


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SyntheticSpec:
    """Procedural corpus layout.

    The last ``n_episode_identities`` identities are episode identities; the
    final ``n_eval_identities`` of those are held out for retrieval
    evaluation (RGB in ``gallery``), the rest feed meta-test episodes (RGB in
    ``support``). Sketches of all episode identities go to ``query``.
    """

    n_identities: int = 70
    images_per_identity_per_modality: int = 4
    height: int = 64
    width: int = 32
    n_artists: int = 3
    seed: int = 0
    n_episode_identities: int = 20
    n_eval_identities: int = 10

    def validate(self) -> None:
        if self.n_identities < 7:
            raise ValueError("n_identities must be >= 7")
        if self.images_per_identity_per_modality < 2:
            raise ValueError("images_per_identity_per_modality must be >= 2")
        if self.height < 32 or self.width < 16:
            raise ValueError("synthetic images must be at least 32x16")
        if self.n_artists < 1:
            raise ValueError("n_artists must be >= 1")
        if self.n_identities - self.n_episode_identities < 2:
            raise ValueError("need at least 2 meta-train identities")
        if not 0 <= self.n_eval_identities <= self.n_episode_identities - 5:
            raise ValueError("need at least 5 episode identities outside the evaluation set")

    @property
    def n_train_identities(self) -> int:
        return self.n_identities - self.n_episode_identities


PALETTE_SKIN = np.array([[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.63, 0.45, 0.33], [0.40, 0.27, 0.20]])


@dataclass(frozen=True)
class _Figure:
    skin: np.ndarray
    hair: np.ndarray
    shirt: np.ndarray
    accent: np.ndarray
    pants: np.ndarray
    shoes: np.ndarray
    head_r: float
    torso_w: float
    torso_h: float
    leg_w: float
    leg_gap: float
    pattern: int
    long_hair: bool
    bag: int


def _identity_figure(seed: int, identity: int) -> _Figure:
    rng = np.random.Generator(np.random.PCG64([seed, identity, 7]))
    shirt = rng.uniform(0.05, 0.95, 3)
    return _Figure(
        skin=PALETTE_SKIN[rng.integers(len(PALETTE_SKIN))],
        hair=rng.uniform(0.0, 0.45, 3) * rng.uniform(0.3, 1.0),
        shirt=shirt,
        accent=1.0 - shirt * rng.uniform(0.3, 0.9),
        pants=rng.uniform(0.05, 0.8, 3),
        shoes=rng.uniform(0.0, 0.3, 3),
        head_r=rng.uniform(0.085, 0.12),
        torso_w=rng.uniform(0.45, 0.7),
        torso_h=rng.uniform(0.26, 0.36),
        leg_w=rng.uniform(0.12, 0.2),
        leg_gap=rng.uniform(0.02, 0.1),
        pattern=int(rng.integers(4)),
        long_hair=bool(rng.integers(2)),
        bag=int(rng.integers(3)),
    )


def _part_masks(fig: _Figure, h: int, w: int, dy: float, dx: float) -> list[tuple[str, np.ndarray]]:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = w / 2 + dx
    head_cy = h * 0.13 + dy
    head_r = fig.head_r * h
    head = ((yy - head_cy) / head_r) ** 2 + ((xx - cx) / (head_r * 0.8)) ** 2 <= 1.0
    hair_rows = yy <= head_cy - (0.1 if fig.long_hair else 0.45) * head_r
    hair = head & hair_rows
    if fig.long_hair:
        hair |= (np.abs(xx - cx) <= head_r * 0.85) & (np.abs(xx - cx) >= head_r * 0.55) \
            & (yy >= head_cy) & (yy <= head_cy + head_r * 1.6)
    torso_top = head_cy + head_r * 1.05
    torso_bot = torso_top + fig.torso_h * h
    half_tw = fig.torso_w * w / 2
    torso = (yy >= torso_top) & (yy < torso_bot) & (np.abs(xx - cx) <= half_tw)
    leg_bot = min(h - 1.5, torso_bot + h * 0.4) + dy * 0.3
    gap = fig.leg_gap * w / 2
    lw = fig.leg_w * w
    legs = (yy >= torso_bot) & (yy < leg_bot) & (np.abs(xx - cx) >= gap) & (np.abs(xx - cx) <= gap + lw)
    shoes = legs & (yy >= leg_bot - 2.5)
    legs &= ~shoes
    parts = [("legs", legs), ("shoes", shoes), ("torso", torso), ("head", head & ~hair), ("hair", hair)]
    if fig.bag:
        side = 1 if fig.bag == 1 else -1
        bx = cx + side * (half_tw + 1.5)
        bag = (np.abs(xx - bx) <= 2.5) & (yy >= torso_top + fig.torso_h * h * 0.45) \
            & (yy < torso_top + fig.torso_h * h * 0.9)
        parts.append(("bag", bag))
    pattern = np.zeros_like(torso)
    rel_y = yy - torso_top
    if fig.pattern == 1:
        pattern = torso & (np.floor(rel_y / 3) % 2 == 1)
    elif fig.pattern == 2:
        pattern = torso & (np.floor((xx - cx + half_tw) / 3) % 2 == 1)
    elif fig.pattern == 3:
        pattern = torso & (np.abs(xx - cx) <= half_tw * 0.45) & (rel_y >= fig.torso_h * h * 0.2) \
            & (rel_y < fig.torso_h * h * 0.55)
    parts.append(("pattern", pattern))
    return parts


def _colors(fig: _Figure) -> dict:
    return {"legs": fig.pants, "shoes": fig.shoes, "torso": fig.shirt, "head": fig.skin,
            "hair": fig.hair, "bag": fig.shoes * 0.5 + 0.3, "pattern": fig.accent}


def render_rgb(fig: _Figure, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.uniform(-1, 1), rng.uniform(-1, 1)
    bg = rng.uniform(0.4, 0.7)
    grad = np.linspace(-0.05, 0.05, h)[:, None, None] * rng.choice([-1, 1])
    img = np.broadcast_to(bg + grad, (h, w, 3)).copy()
    img += rng.uniform(-0.05, 0.05, 3)
    colors = _colors(fig)
    for name, mask in _part_masks(fig, h, w, dy, dx):
        img[mask] = colors[name]
    img *= rng.uniform(0.9, 1.1)
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def _outline(mask: np.ndarray, width: int) -> np.ndarray:
    if not mask.any():
        return mask
    return mask & ~ndimage.binary_erosion(mask, iterations=width, border_value=0)


def render_sketch(fig: _Figure, h: int, w: int, artist: int, rng: np.random.Generator) -> np.ndarray:
    stroke = 1 + artist % 2
    dropout = (0.0, 0.12, 0.25)[artist % 3]
    ink = 0.08 + 0.06 * (artist % 3)
    dy, dx = rng.uniform(-2, 2), rng.uniform(-2, 2)
    sheet = rng.uniform(0.92, 1.0)
    img = np.full((h, w), sheet)
    yy, xx = np.mgrid[0:h, 0:w]
    colors = _colors(fig)
    for name, mask in _part_masks(fig, h, w, dy, dx):
        luma = float(colors[name] @ np.array([0.299, 0.587, 0.114]))
        if name != "pattern" and luma < 0.4:
            # dark garments get hatching, denser for darker colours
            period = 3 if luma < 0.2 else 4
            hatch = mask & ((yy + xx + artist) % period == 0)
            img[hatch] = np.minimum(img[hatch], ink + 0.3)
        if name == "pattern":
            img[_outline(mask, 1)] = ink + 0.15
            continue
        edge = _outline(mask, stroke)
        keep = rng.random(edge.shape) >= dropout
        img[edge & keep] = ink
    img += rng.normal(0.0, 0.015, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], 3, axis=2)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a procedural corpus (PNG images + ``manifest.csv``) into ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    n_train = spec.n_train_identities
    first_eval = spec.n_identities - spec.n_eval_identities
    records = []
    for ident in range(spec.n_identities):
        fig = _identity_figure(spec.seed, ident)
        rng = np.random.Generator(np.random.PCG64([spec.seed, ident, 11]))
        if ident < n_train:
            rgb_split, sk_split = "meta_train", "meta_train"
        elif ident < first_eval:
            rgb_split, sk_split = "support", "query"
        else:
            rgb_split, sk_split = "gallery", "query"
        for v in range(spec.images_per_identity_per_modality):
            rel = f"images/{ident:04d}_rgb_{v}.png"
            write_image(out / rel, render_rgb(fig, spec.height, spec.width, rng))
            records.append(Record(rel, ident, Modality.RGB, rgb_split))
        for v in range(spec.images_per_identity_per_modality):
            artist = int(rng.integers(spec.n_artists))
            rel = f"images/{ident:04d}_sketch_{v}.png"
            write_image(out / rel, render_sketch(fig, spec.height, spec.width, artist, rng))
            records.append(Record(rel, ident, Modality.SKETCH, sk_split))
    manifest = DatasetManifest(out, records)
    manifest.write()
    return manifest
