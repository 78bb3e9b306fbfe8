"""Localized sketch-style augmentation.

An RGB image is rendered as a pencil sketch with a colour-dodge of its
luma against a blurred negative, and a random rectangle of the original is
replaced by the sketch rendering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import ShapeMismatchError, check_image

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    @classmethod
    def empty(cls) -> "Rect":
        return cls(0, 0, 0, 0)

    @classmethod
    def full(cls, height: int, width: int) -> "Rect":
        return cls(0, 0, height, width)

    @property
    def is_empty(self) -> bool:
        return self.height == 0 and self.width == 0

    def validate(self, height: int, width: int) -> None:
        if self.is_empty:
            return
        if self.height < 1 or self.width < 1:
            raise ValueError(f"degenerate rect {self}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"rect {self} has negative origin")
        if self.top + self.height > height or self.left + self.width > width:
            raise ValueError(f"rect {self} exceeds image bounds {height}x{width}")

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


def blur_radius(sigma: float) -> int:
    return int(math.ceil(2.0 * sigma))


def sketch_transform(img: np.ndarray, sigma: float = 2.0, guard: float = 1e-4) -> np.ndarray:
    """Pencil-sketch rendering of an RGB image, replicated over 3 channels.

    gray = luma(img); blurred = gaussian(1 - gray); out = gray / max(1 - blurred, guard),
    clipped to [0, 1]. The Gaussian has radius ceil(2 sigma) and uses
    edge-exclusive reflection at the borders.
    """
    img = check_image(img)
    gray = img @ LUMA.astype(img.dtype)
    inv = 1.0 - gray
    # scipy "mirror" is the d c b | a b c d reflection
    blurred = ndimage.gaussian_filter(inv, sigma, mode="mirror", radius=blur_radius(sigma))
    out = np.clip(gray / np.maximum(1.0 - blurred, guard), 0.0, 1.0)
    return np.repeat(out[:, :, None], 3, axis=2).astype(img.dtype)


def sample_rect_with_info(rng: np.random.Generator, height: int, width: int,
                          area: tuple = (0.2, 0.5), aspect: tuple = (0.5, 2.0),
                          max_attempts: int = 10) -> tuple[Rect, bool]:
    """Like :func:`sample_rect` but also reports whether the fallback rect was used."""
    if height < 8 or width < 8:
        raise ValueError(f"image must be at least 8x8, got {height}x{width}")
    total = height * width
    for _ in range(max_attempts):
        target = rng.uniform(area[0], area[1]) * total
        ratio = rng.uniform(aspect[0], aspect[1])
        rh = int(round(math.sqrt(target * ratio)))
        rw = int(round(math.sqrt(target / ratio)))
        if 1 <= rh <= height and 1 <= rw <= width:
            top = int(rng.integers(0, height - rh + 1))
            left = int(rng.integers(0, width - rw + 1))
            return Rect(top, left, rh, rw), False
    side = int(round(math.sqrt(0.25 * total)))
    rh, rw = min(side, height), min(side, width)
    return Rect((height - rh) // 2, (width - rw) // 2, rh, rw), True


def sample_rect(rng: np.random.Generator, height: int, width: int,
                area: tuple = (0.2, 0.5), aspect: tuple = (0.5, 2.0),
                max_attempts: int = 10) -> Rect:
    """Draw a rectangle with uniform area fraction and aspect ratio (height / width).

    Rejection-samples placements; after ``max_attempts`` misses a centred
    square of a quarter of the image area is returned.
    """
    return sample_rect_with_info(rng, height, width, area, aspect, max_attempts)[0]


def rect_mask(rect: Rect, height: int, width: int) -> np.ndarray:
    rect.validate(height, width)
    mask = np.zeros((height, width), dtype=np.uint8)
    if not rect.is_empty:
        mask[rect.slices()] = 1
    return mask


def local_sketch_replace(rgb: np.ndarray, sketch: np.ndarray, rect: Rect) -> np.ndarray:
    rgb = np.asarray(rgb)
    sketch = np.asarray(sketch)
    if rgb.shape != sketch.shape:
        raise ShapeMismatchError(f"rgb {rgb.shape} and sketch {sketch.shape} differ")
    rect.validate(rgb.shape[0], rgb.shape[1])
    out = rgb.copy()
    if not rect.is_empty:
        rs, cs = rect.slices()
        out[rs, cs] = sketch[rs, cs]
    return out


def delta_norms(rgb: np.ndarray, sketch: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """L2 norms of the full sketch-minus-rgb difference and of its masked part."""
    rgb = np.asarray(rgb, dtype=np.float64)
    sketch = np.asarray(sketch, dtype=np.float64)
    mask = np.asarray(mask)
    if rgb.shape != sketch.shape:
        raise ShapeMismatchError(f"rgb {rgb.shape} and sketch {sketch.shape} differ")
    if mask.shape != rgb.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} does not match image {rgb.shape[:2]}")
    diff = sketch - rgb
    return float(np.linalg.norm(diff)), float(np.linalg.norm(diff * mask[:, :, None]))


def augment(rgb: np.ndarray, rng: np.random.Generator, sigma: float = 2.0, guard: float = 1e-4,
            area: tuple = (0.2, 0.5), aspect: tuple = (0.5, 2.0),
            sketch: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray, Rect]:
    """Return (locally replaced image, full sketch, rect)."""
    if sketch is None:
        sketch = sketch_transform(rgb, sigma, guard)
    rect = sample_rect(rng, rgb.shape[0], rgb.shape[1], area, aspect)
    return local_sketch_replace(rgb, sketch, rect), sketch, rect
