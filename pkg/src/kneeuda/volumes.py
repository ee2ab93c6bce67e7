"""Volume and segmentation-mask containers plus their on-disk format.

A sample on disk is a little-endian float32 blob (``<id>.vol.f32``), an
optional little-endian uint16 mask blob (``<id>.mask.u16``) and a JSON
sidecar header (``<id>.json``) recording shape, spacing, domain,
sample_id and optional phenotype labels. Arrays are C-ordered with axes
(x, y, z).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ManifestMalformed
from .phenotype import PhenotypeLabel

MASK_VOCABULARY = {
    "background": 0,
    "femoral_cartilage": 1,
    "medial_tibial_cartilage": 2,
    "lateral_tibial_cartilage": 3,
    "medial_meniscus": 4,
    "lateral_meniscus": 5,
    "patellar_cartilage": 6,
}
BACKGROUND = 0
COMPARTMENT_IDS = tuple(v for v in MASK_VOCABULARY.values() if v != BACKGROUND)

VOL_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("<u2")


@dataclass
class SegmentationMask:
    labels: np.ndarray  # uint16, same shape as its volume

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=MASK_DTYPE)
        if self.labels.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.labels.shape}")
        bad = set(np.unique(self.labels)) - set(MASK_VOCABULARY.values())
        if bad:
            raise ValueError(f"mask contains values outside the vocabulary: {sorted(bad)}")

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class VolumeSample:
    voxels: np.ndarray  # float32, shape (x, y, z)
    spacing: tuple[float, float, float]
    domain: str  # "source" | "target"
    sample_id: str
    mask: Optional[SegmentationMask] = None
    label: Optional[PhenotypeLabel] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be source/target, got {self.domain!r}")
        if self.mask is not None and self.mask.shape != self.voxels.shape:
            raise ValueError("mask shape does not match voxel shape")

    @property
    def shape(self):
        return self.voxels.shape

    def with_(self, **kw) -> "VolumeSample":
        return replace(self, **kw)

    def stripped(self) -> "VolumeSample":
        """Copy without labels; used when a sample enters an unsupervised stage."""
        return replace(self, label=None)


def _label_to_json(label: Optional[PhenotypeLabel]):
    if label is None:
        return None
    return {"cartilage_meniscus": label.cartilage_meniscus,
            "subchondral_bone": label.subchondral_bone}


def _label_from_json(obj) -> Optional[PhenotypeLabel]:
    if obj is None:
        return None
    return PhenotypeLabel(cartilage_meniscus=obj.get("cartilage_meniscus"),
                          subchondral_bone=obj.get("subchondral_bone"))


def save_volume(sample: VolumeSample, directory) -> Path:
    """Write blob(s) + sidecar header; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vol_path = directory / f"{sample.sample_id}.vol.f32"
    np.ascontiguousarray(sample.voxels, dtype=VOL_DTYPE).tofile(vol_path)
    header = {
        "sample_id": sample.sample_id,
        "shape": list(sample.shape),
        "spacing": list(sample.spacing),
        "domain": sample.domain,
        "volume_dtype": "<f4",
        "volume_file": vol_path.name,
        "mask_file": None,
        "label": _label_to_json(sample.label),
    }
    if sample.mask is not None:
        mask_path = directory / f"{sample.sample_id}.mask.u16"
        np.ascontiguousarray(sample.mask.labels, dtype=MASK_DTYPE).tofile(mask_path)
        header["mask_file"] = mask_path.name
        header["mask_dtype"] = "<u2"
    header_path = directory / f"{sample.sample_id}.json"
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return header_path


def load_volume(header_path) -> VolumeSample:
    header_path = Path(header_path)
    try:
        with open(header_path) as fh:
            header = json.load(fh)
        shape = tuple(header["shape"])
        voxels = np.fromfile(header_path.parent / header["volume_file"],
                             dtype=VOL_DTYPE)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ManifestMalformed(f"cannot load volume header {header_path}: {e}") from e
    if voxels.size != int(np.prod(shape)):
        raise ManifestMalformed(
            f"{header_path}: blob has {voxels.size} voxels, header says {shape}")
    voxels = voxels.reshape(shape)
    mask = None
    if header.get("mask_file"):
        labels = np.fromfile(header_path.parent / header["mask_file"], dtype=MASK_DTYPE)
        if labels.size != voxels.size:
            raise ManifestMalformed(f"{header_path}: mask blob size mismatch")
        mask = SegmentationMask(labels.reshape(shape))
    return VolumeSample(
        voxels=voxels,
        spacing=tuple(header["spacing"]),
        domain=header["domain"],
        sample_id=header["sample_id"],
        mask=mask,
        label=_label_from_json(header.get("label")),
    )
