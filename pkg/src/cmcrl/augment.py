"""Stochastic augmentation family for pre-training images.

Transforms run in the fixed order Pad -> RC -> RHF -> RE on (H, W, C) float
arrays in [0, 1]. Every random draw comes from the generator passed in, so
fixing the generator fixes the output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data import ConfigurationError

ALL_TRANSFORMS = frozenset({"RC", "RE", "Pad", "RHF"})
_ORDER = ("Pad", "RC", "RHF", "RE")


@dataclass(frozen=True)
class AugmentSpec:
    enabled: frozenset = ALL_TRANSFORMS
    rhf_probability: float = 0.5
    pad_pixels: int = 10
    re_fill: tuple = (0.485, 0.456, 0.406)
    re_probability: float = 0.5
    re_area_range: tuple = (0.02, 0.2)
    re_aspect_range: tuple = (0.3, 3.3)
    crop_size: int | None = None  # None: crop back to the input size
    seed: int = 0
    name: str = "T"

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - ALL_TRANSFORMS
        if unknown:
            raise ConfigurationError(f"unknown transforms {sorted(unknown)}; choose from {sorted(ALL_TRANSFORMS)}")
        for key in ("rhf_probability", "re_probability"):
            p = getattr(self, key)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{key} must be in [0, 1], got {p}")
        if self.pad_pixels < 0:
            raise ConfigurationError("pad_pixels must be >= 0")
        lo, hi = self.re_area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigurationError(f"re_area_range must satisfy 0 < min <= max < 1, got {self.re_area_range}")
        alo, ahi = self.re_aspect_range
        if not 0.0 < alo <= ahi:
            raise ConfigurationError(f"invalid re_aspect_range {self.re_aspect_range}")
        if len(self.re_fill) != 3 or not all(0.0 <= v <= 1.0 for v in self.re_fill):
            raise ConfigurationError("re_fill must be three values in [0, 1]")


def pad(image: np.ndarray, pixels: int) -> np.ndarray:
    if pixels == 0:
        return image
    return np.pad(image, ((pixels, pixels), (pixels, pixels), (0, 0)), mode="constant")


def random_crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ConfigurationError(f"crop window {size} larger than (padded) image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def random_erase(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    if rng.random() >= spec.re_probability:
        return image
    h, w = image.shape[:2]
    area = h * w
    for _ in range(100):
        target = area * rng.uniform(*spec.re_area_range)
        aspect = rng.uniform(*spec.re_aspect_range)
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out = image.copy()
            out[top:top + eh, left:left + ew] = np.asarray(spec.re_fill, dtype=image.dtype)[: image.shape[2]]
            return out
    return image


def apply(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Augment one (H, W, C) image; only transforms in ``spec.enabled`` run."""
    out = image
    size = spec.crop_size or image.shape[0]
    for name in _ORDER:
        if name not in spec.enabled:
            continue
        if name == "Pad":
            out = pad(out, spec.pad_pixels)
        elif name == "RC":
            out = random_crop(out, size, rng)
        elif name == "RHF":
            if rng.random() < spec.rhf_probability:
                out = out[:, ::-1]
        else:
            out = random_erase(out, spec, rng)
    if out.shape != image.shape:
        # Pad without RC leaves a larger canvas: shrink it back (zoom-out with border).
        factors = (image.shape[0] / out.shape[0], image.shape[1] / out.shape[1], 1.0)
        out = np.clip(ndimage.zoom(out, factors, order=1, grid_mode=True, mode="nearest"), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=image.dtype)


def apply_batch(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Augment (N, H, W, C); each sample gets its own child stream of ``rng``."""
    if not spec.enabled:
        return images.copy()
    streams = rng.spawn(len(images))
    return np.stack([apply(img, spec, r) for img, r in zip(images, streams)])


def ablation_subsets(base: AugmentSpec | None = None) -> list[AugmentSpec]:
    """The full family plus the six leave-out subsets used in augmentation ablations."""
    base = base or AugmentSpec()
    removed = [(), ("RC",), ("RE",), ("Pad",), ("RHF",), ("RC", "RE"), ("Pad", "RHF")]
    out = []
    for r in removed:
        name = "T" if not r else "T/{" + ",".join(r) + "}"
        out.append(replace(base, enabled=ALL_TRANSFORMS - set(r), name=name))
    return out
