"""Online augmentation: crop, flips, noise, in-plane rotation, contrast."""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np
from scipy import ndimage

from .phantom import SampleVolume, brain_mask

AXIS_PAIRS = tuple(combinations(range(3), 2))


@dataclass
class AugmentConfig:
    crop: tuple | None = None  # None keeps the full extents
    flip_prob: float = 0.5
    noise_sigma: float = 0.01
    max_rotation_deg: float = 10.0
    contrast_range: tuple = (0.8, 1.2)
    jitter: bool = True
    seed: int = 0

    def validate(self, extents=None):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.noise_sigma < 0 or self.max_rotation_deg < 0:
            raise ValueError("noise sigma and rotation range must be non-negative")
        lo, hi = self.contrast_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid contrast range {self.contrast_range}")
        if extents is not None and self.crop is not None:
            if len(self.crop) != 3 or any(c > n or c < 1 for c, n in zip(self.crop, extents)):
                raise ValueError(f"crop {self.crop} does not fit volume extents {extents}")


@dataclass
class AugmentDraw:
    crop_start: tuple
    flips: tuple
    angle_deg: float
    axes: tuple
    contrast: np.ndarray


def crop_bounds(mask, crop, rng=None, jitter=True):
    """Crop start per axis keeping the mask's bounding box when it fits."""
    starts = []
    for axis, c in enumerate(crop):
        n = mask.shape[axis]
        other = tuple(a for a in range(mask.ndim) if a != axis)
        present = np.flatnonzero(mask.any(axis=other))
        lo, hi = (present[0], present[-1] + 1) if present.size else (0, n)
        a, b = max(0, hi - c), min(lo, n - c)
        if a <= b:
            start = int(rng.integers(a, b + 1)) if (jitter and rng is not None) else (a + b) // 2
        else:
            start = int(np.clip((lo + hi) // 2 - c // 2, 0, n - c))
        starts.append(start)
    return tuple(starts)


def draw_augmentation(sample: SampleVolume, cfg: AugmentConfig, rng) -> AugmentDraw:
    crop = tuple(cfg.crop) if cfg.crop is not None else sample.extents
    start = crop_bounds(brain_mask(sample.image), crop, rng, cfg.jitter)
    flips = tuple(bool(f) for f in rng.random(3) < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    axes = AXIS_PAIRS[int(rng.integers(len(AXIS_PAIRS)))]
    contrast = rng.uniform(*cfg.contrast_range, size=sample.image.shape[0])
    return AugmentDraw(start, flips, angle, axes, contrast)


def flip(sample: SampleVolume, axis) -> SampleVolume:
    return replace(
        sample,
        image=np.ascontiguousarray(np.flip(sample.image, axis + 1)),
        labels=np.ascontiguousarray(np.flip(sample.labels, axis)),
    )


def add_noise(image, sigma, rng):
    """Gaussian noise on voxels where any modality is non-zero."""
    mask = brain_mask(image)
    out = image.copy()
    if sigma > 0:
        out[:, mask] += rng.normal(0.0, sigma, size=(image.shape[0], int(mask.sum()))).astype(image.dtype)
    return out


def rotate(sample: SampleVolume, angle_deg, axes) -> SampleVolume:
    """Rotate about the volume centre; image trilinear, labels nearest, zero fill."""
    if angle_deg == 0:
        return sample
    image = np.stack(
        [ndimage.rotate(ch, angle_deg, axes=axes, reshape=False, order=1, mode="constant", cval=0.0) for ch in sample.image]
    ).astype(sample.image.dtype)
    labels = ndimage.rotate(sample.labels, angle_deg, axes=axes, reshape=False, order=0, mode="constant", cval=0)
    return replace(sample, image=image, labels=labels.astype(sample.labels.dtype))


def adjust_contrast(image, factors):
    """``m + f (x - m)`` per modality over brain voxels; background stays zero."""
    mask = brain_mask(image)
    out = image.copy()
    if not mask.any():
        return out
    for c, f in enumerate(factors):
        vals = image[c][mask].astype(np.float64)
        m = vals.mean()
        out[c][mask] = (m + f * (vals - m)).astype(image.dtype)
    return out


def augment(sample: SampleVolume, cfg: AugmentConfig, draw_seed) -> SampleVolume:
    cfg.validate(sample.extents)
    rng = np.random.default_rng([cfg.seed, draw_seed])
    d = draw_augmentation(sample, cfg, rng)
    crop = tuple(cfg.crop) if cfg.crop is not None else sample.extents
    win = tuple(slice(s, s + c) for s, c in zip(d.crop_start, crop))
    out = replace(sample, image=sample.image[(slice(None),) + win].copy(), labels=sample.labels[win].copy())
    for axis, do in enumerate(d.flips):
        if do:
            out = flip(out, axis)
    out = replace(out, image=add_noise(out.image, cfg.noise_sigma, rng))
    out = rotate(out, d.angle_deg, d.axes)
    if not np.all(d.contrast == 1.0):
        out = replace(out, image=adjust_contrast(out.image, d.contrast))
    return out
