"""Geometric preprocessing, training augmentations and segmentation scoring.

Pipeline order for a raw sample: resize to the working grid, locate the
joint ROI from the segmentation mask, crop, z-score normalize. The four
stochastic augmentations (noise, intensity scale, in-plane rotation,
size scale) are applied at training time, each independently with
probability 0.5, in that fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import LocalizationError
from .volumes import BACKGROUND, SegmentationMask, VolumeSample


def resize_volume(v: VolumeSample, target_shape, mode: str = "trilinear") -> VolumeSample:
    """Resample to target_shape; spacing rescaled by the shape ratio.
    mode 'trilinear' for intensities, 'nearest' for the mask (the mask,
    when present, always uses nearest)."""
    target_shape = tuple(int(s) for s in target_shape)
    if any(s <= 0 for s in target_shape):
        raise ValueError(f"target_shape must be positive, got {target_shape}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown mode {mode!r}")
    if target_shape == v.shape:
        return v
    m, off = kernels.resize_transform(v.shape, target_shape)
    voxels = kernels.affine_sample(v.voxels, m, off, target_shape,
                                   order=0 if mode == "nearest" else 1, edge=True)
    mask = None
    if v.mask is not None:
        mask = SegmentationMask(
            kernels.affine_sample(v.mask.labels, m, off, target_shape,
                                  order=0, edge=True))
    spacing = tuple(sp * i / t for sp, i, t in zip(v.spacing, v.shape, target_shape))
    return replace(v, voxels=voxels, spacing=spacing, mask=mask)


def locate_roi(mask: SegmentationMask, crop_shape=(256, 256, 128)) -> tuple[int, int, int]:
    """Center of the union bounding box over all non-background
    compartments, clamped per axis so a crop_shape window maximally
    overlaps the volume."""
    nonbg = mask.labels != BACKGROUND
    if not nonbg.any():
        raise LocalizationError("mask has no non-background voxels")
    center = []
    for axis, (dim, size) in enumerate(zip(mask.shape, crop_shape)):
        proj = nonbg.any(axis=tuple(a for a in range(3) if a != axis))
        idx = np.flatnonzero(proj)
        c = int(idx[0] + idx[-1] + 1) // 2
        a, b = size // 2, dim - size + size // 2
        lo, hi = min(a, b), max(a, b)
        center.append(int(np.clip(c, lo, hi)))
    return tuple(center)


def crop_roi(v: VolumeSample, center, crop_shape=(256, 256, 128)) -> VolumeSample:
    """Extract a crop_shape window centered at ``center``; out-of-volume
    regions are zero-filled (mask: background-filled)."""
    crop_shape = tuple(int(s) for s in crop_shape)
    if any(s <= 0 for s in crop_shape):
        raise ValueError(f"crop_shape must be positive, got {crop_shape}")
    voxels = _crop_array(v.voxels, center, crop_shape, fill=0.0)
    mask = None
    if v.mask is not None:
        mask = SegmentationMask(
            _crop_array(v.mask.labels, center, crop_shape, fill=BACKGROUND))
    return replace(v, voxels=voxels, mask=mask)


def _crop_array(arr, center, crop_shape, fill):
    out = np.full(crop_shape, fill, dtype=arr.dtype)
    src = []
    dst = []
    for dim, c, size in zip(arr.shape, center, crop_shape):
        start = int(c) - size // 2
        s0, s1 = max(start, 0), min(start + size, dim)
        if s0 >= s1:
            return out
        src.append(slice(s0, s1))
        dst.append(slice(s0 - start, s1 - start))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def zscore_normalize(v: VolumeSample, eps: float = 1e-8) -> VolumeSample:
    """Per-volume z-score; cross-scanner intensity scales are incommensurable."""
    x = v.voxels.astype(np.float64)
    out = (x - x.mean()) / (x.std() + eps)
    return replace(v, voxels=out.astype(np.float32))


# ---------------------------------------------------------------------------
# Augmentation

@dataclass
class AugmentConfig:
    noise_sd: float = 0.05
    intensity_scale_range: tuple[float, float] = (0.8, 1.2)
    rotation_deg_range: tuple[float, float] = (-10.0, 10.0)
    size_scale_range: tuple[float, float] = (1.0, 1.1)
    per_transform_probability: float = 0.5

    def __post_init__(self):
        for name in ("intensity_scale_range", "rotation_deg_range", "size_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well-ordered: ({lo}, {hi})")
        if not (0.0 <= self.per_transform_probability <= 1.0):
            raise ValueError("per_transform_probability must be in [0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")


def augment(v: VolumeSample, cfg: AugmentConfig, rng: np.random.Generator) -> VolumeSample:
    """Apply noise -> intensity scale -> rotation -> size scale, each with
    cfg.per_transform_probability; output shape equals input shape and is
    fully determined by the rng state. The rng is always advanced through
    the same number of draws regardless of which transforms fire."""
    p = cfg.per_transform_probability
    apply = rng.random(4) < p
    noise = rng.standard_normal(v.shape).astype(np.float32)
    intensity = rng.uniform(*cfg.intensity_scale_range)
    angle = rng.uniform(*cfg.rotation_deg_range)
    zoom = rng.uniform(*cfg.size_scale_range)

    voxels = v.voxels
    if apply[0] and cfg.noise_sd > 0:
        voxels = voxels + cfg.noise_sd * noise
    if apply[1]:
        voxels = voxels * np.float32(intensity)
    if apply[2]:
        m, off = kernels.rotation_transform(voxels.shape, angle)
        voxels = kernels.affine_sample(voxels, m, off, voxels.shape, order=1)
    if apply[3]:
        m, off = kernels.zoom_transform(voxels.shape, zoom)
        voxels = kernels.affine_sample(voxels, m, off, voxels.shape, order=1)
    return replace(v, voxels=np.ascontiguousarray(voxels, dtype=np.float32))


def sample_rng(global_seed: int, *stream) -> np.random.Generator:
    """Deterministic per-sample rng derived from (global seed, stream ids);
    stream ids may be strings (hashed stably) or ints."""
    entropy = [int(global_seed)]
    for item in stream:
        if isinstance(item, str):
            entropy.append(int.from_bytes(item.encode(), "little") % (2 ** 63))
        else:
            entropy.append(int(item))
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# Segmentation scoring

def dsc(a: SegmentationMask, b: SegmentationMask, compartment: int) -> float:
    """Dice coefficient 2|A∩B| / (|A| + |B|) for one compartment id;
    1.0 when the compartment is empty in both masks."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    in_a = a.labels == compartment
    in_b = b.labels == compartment
    denom = int(in_a.sum()) + int(in_b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((in_a & in_b).sum()) / denom
