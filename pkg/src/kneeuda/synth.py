"""Synthetic domain-shifted dataset generator.

Each sample is a knee-like phantom: smooth ellipsoidal compartments on a
low-frequency tissue background (which also yields a nontrivial
segmentation mask). Positive samples carry a soft spherical lesion
signal that defines the binary label. Domain parameters shift intensity
statistics (gain/offset), texture (noise, smoothing) and geometry so
that a probe on raw intensity histograms separates the two domains.
Everything is deterministic per (seed, sample index).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .evaluation import _largest_remainder
from .manifest import DatasetManifest, ManifestEntry, save_manifest
from .phenotype import PhenotypeLabel
from .preprocess import sample_rng
from .volumes import MASK_VOCABULARY, SegmentationMask, VolumeSample, save_volume

# compartment name -> (center, semi-axes) in normalized [-1, 1] coordinates
_COMPARTMENTS = {
    "femoral_cartilage": ((0.0, 0.3, 0.0), (0.55, 0.18, 0.55)),
    "medial_tibial_cartilage": ((-0.35, -0.3, 0.0), (0.28, 0.14, 0.5)),
    "lateral_tibial_cartilage": ((0.35, -0.3, 0.0), (0.28, 0.14, 0.5)),
    "medial_meniscus": ((-0.38, 0.0, 0.0), (0.2, 0.11, 0.45)),
    "lateral_meniscus": ((0.38, 0.0, 0.0), (0.2, 0.11, 0.45)),
    "patellar_cartilage": ((0.0, 0.72, 0.0), (0.22, 0.13, 0.4)),
}

_COMPARTMENT_INTENSITY = {
    "femoral_cartilage": 0.75,
    "medial_tibial_cartilage": 0.7,
    "lateral_tibial_cartilage": 0.7,
    "medial_meniscus": 0.15,
    "lateral_meniscus": 0.15,
    "patellar_cartilage": 0.75,
}


@dataclass
class ShiftParams:
    shape: tuple[int, int, int] = (48, 48, 24)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    intensity_offset: float = 0.0
    intensity_gain: float = 1.0
    noise_sd: float = 0.03
    smoothing: float = 0.4  # gaussian width, voxels
    geometry_jitter: float = 0.03  # sd of compartment center jitter, normalized units
    lesion_radius: tuple[float, float] = (3.0, 5.0)  # voxels
    lesion_contrast: float = 0.6
    lesion_region: tuple[float, float] = (0.45, 0.35)  # max |x|, |y| of lesion center
    prevalence: Fraction = Fraction(1, 3)

    def __post_init__(self):
        if not (0 < Fraction(self.prevalence) < 1):
            raise ConfigError(f"prevalence must be in (0,1), got {self.prevalence}")
        if min(self.lesion_radius) <= 0:
            raise ConfigError("lesion radii must be positive")
        if self.noise_sd < 0 or self.smoothing < 0:
            raise ConfigError("noise_sd and smoothing must be nonnegative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["prevalence"] = str(Fraction(self.prevalence))
        return d


def source_params(**overrides) -> ShiftParams:
    return ShiftParams(**overrides)


def target_params(**overrides) -> ShiftParams:
    """Default target-domain shift: brighter/stretched intensities, heavier
    smoothing and noise, slightly different geometry and weaker lesions."""
    defaults = dict(intensity_offset=0.35, intensity_gain=1.6, noise_sd=0.06,
                    smoothing=1.1, geometry_jitter=0.05,
                    lesion_contrast=0.45)
    defaults.update(overrides)
    return ShiftParams(**defaults)


SHIFT_PRESETS = {"source": source_params, "target": target_params}


def _normalized_grid(shape):
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    return np.meshgrid(*axes, indexing="ij")


def _smooth_field(rng, shape, scale=0.1):
    coarse = rng.standard_normal([max(2, s // 8) for s in shape])
    coarse = gaussian_filter(coarse, 1.0)
    from .kernels import affine_sample, resize_transform
    m, off = resize_transform(coarse.shape, shape)
    field_ = affine_sample(coarse, m, off, tuple(shape), order=1)
    return scale * field_ / (np.abs(field_).max() + 1e-8)


def make_phantom(params: ShiftParams, rng: np.random.Generator,
                 positive: bool) -> tuple[np.ndarray, np.ndarray]:
    """One phantom: (float32 volume, uint16 mask)."""
    shape = params.shape
    gx, gy, gz = _normalized_grid(shape)
    vol = 0.35 + _smooth_field(rng, shape, scale=0.08)
    mask = np.zeros(shape, dtype=np.uint16)
    for name, (center, axes) in _COMPARTMENTS.items():
        jitter = params.geometry_jitter * rng.standard_normal(3)
        cx, cy, cz = (c + j for c, j in zip(center, jitter))
        ax, ay, az = axes
        inside = (((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2
                  + ((gz - cz) / az) ** 2) <= 1.0
        mask[inside] = MASK_VOCABULARY[name]
        vol[inside] = _COMPARTMENT_INTENSITY[name]

    if positive:
        radius = rng.uniform(*params.lesion_radius)
        mx, my = params.lesion_region
        lx = rng.uniform(-mx, mx)
        ly = rng.uniform(-my, my)
        lz = rng.uniform(-0.4, 0.4)
        # voxel-space distances so the blob is round regardless of shape
        vx = (gx - lx) * (shape[0] - 1) / 2.0
        vy = (gy - ly) * (shape[1] - 1) / 2.0
        vz = (gz - lz) * (shape[2] - 1) / 2.0
        r2 = vx ** 2 + vy ** 2 + vz ** 2
        sigma = radius / 1.5
        vol = vol + params.lesion_contrast * np.exp(-r2 / (2.0 * sigma ** 2))

    if params.smoothing > 0:
        vol = gaussian_filter(vol, params.smoothing)
    vol = params.intensity_gain * vol + params.intensity_offset
    if params.noise_sd > 0:
        vol = vol + params.noise_sd * rng.standard_normal(shape)
    return vol.astype(np.float32), mask


def generate_synthetic(n: int, domain: str, params: ShiftParams, seed: int,
                       out_dir, id_prefix: str | None = None) -> DatasetManifest:
    """Generate n samples, store them under out_dir/data/ and write
    out_dir/manifest.json. Positive count follows the largest-remainder
    rule on params.prevalence."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if domain not in ("source", "target"):
        raise ConfigError(f"domain must be source/target, got {domain!r}")
    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    prefix = id_prefix if id_prefix is not None else f"{domain[0]}"

    p = Fraction(params.prevalence)
    n_pos, _ = _largest_remainder(n, [p, 1 - p])
    order = sample_rng(seed, 0, 0 if domain == "source" else 1).permutation(n)
    positive = np.zeros(n, dtype=bool)
    positive[order[:n_pos]] = True

    entries = []
    for i in range(n):
        rng = sample_rng(seed, 1 if domain == "target" else 0, i)
        vol, mask = make_phantom(params, rng, positive=bool(positive[i]))
        sid = f"{prefix}{i:04d}"
        label = PhenotypeLabel(cartilage_meniscus=bool(positive[i]),
                               subchondral_bone=bool(positive[i]))
        sample = VolumeSample(voxels=vol, spacing=params.spacing, domain=domain,
                              sample_id=sid, mask=SegmentationMask(mask), label=label)
        header_path = save_volume(sample, data_dir)
        entries.append(ManifestEntry(
            sample_id=sid,
            volume=str(header_path.relative_to(out_dir)),
            domain=domain,
            mask=f"data/{sid}.mask.u16",
            labels={"cartilage_meniscus": bool(positive[i]),
                    "subchondral_bone": bool(positive[i])}))
    manifest = DatasetManifest(
        entries=entries,
        metadata={"generator": "phantom-v1", "seed": int(seed), "n": int(n),
                  "domain": domain, "params": params.to_json()},
        root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def trivial_segmenter(sample: VolumeSample, quantile: float = 0.85) -> SegmentationMask:
    """Stand-in segmenter for tests: labels the brightest voxels as
    femoral cartilage. Real masks are pipeline inputs."""
    thr = np.quantile(sample.voxels, quantile)
    labels = np.where(sample.voxels >= thr,
                      MASK_VOCABULARY["femoral_cartilage"], 0).astype(np.uint16)
    return SegmentationMask(labels)
