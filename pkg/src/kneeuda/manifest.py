"""Dataset manifests: a JSON index of samples (volume header paths,
domain, optional labels and split assignment) plus global metadata.
Paths are stored relative to the manifest file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ManifestDuplicateId, ManifestMalformed, ManifestMissingFile
from .volumes import VolumeSample, load_volume

MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    sample_id: str
    volume: str  # path to the per-sample JSON header, relative to the manifest
    domain: str
    mask: Optional[str] = None
    labels: Optional[dict] = None  # phenotype name -> bool
    split: Optional[str] = None  # train | val | test

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "volume": self.volume,
                "domain": self.domain, "mask": self.mask,
                "labels": self.labels, "split": self.split}


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    metadata: dict = field(default_factory=dict)
    root: Optional[Path] = None  # directory the relative paths resolve against

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.sample_id in seen:
                raise ManifestDuplicateId(f"duplicate sample_id {e.sample_id!r}")
            seen.add(e.sample_id)

    def __len__(self):
        return len(self.entries)

    def resolve(self, relpath: str) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / relpath

    def load_sample(self, entry: ManifestEntry) -> VolumeSample:
        return load_volume(self.resolve(entry.volume))

    def load_all(self) -> list[VolumeSample]:
        return [self.load_sample(e) for e in self.entries]

    def subset(self, sample_ids) -> "DatasetManifest":
        wanted = set(sample_ids)
        return DatasetManifest(
            entries=[e for e in self.entries if e.sample_id in wanted],
            metadata=dict(self.metadata), root=self.root)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    doc = {"version": MANIFEST_VERSION,
           "metadata": manifest.metadata,
           "entries": [e.to_json() for e in manifest.entries]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ManifestMissingFile(f"cannot open manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestMalformed(f"manifest {path} is not valid JSON: {e}") from e
    entries = []
    for raw in doc.get("entries", []):
        try:
            entries.append(ManifestEntry(
                sample_id=raw["sample_id"], volume=raw["volume"],
                domain=raw["domain"], mask=raw.get("mask"),
                labels=raw.get("labels"), split=raw.get("split")))
        except (KeyError, TypeError) as e:
            raise ManifestMalformed(f"malformed manifest entry {raw!r}: {e}") from e
    manifest = DatasetManifest(entries=entries, metadata=doc.get("metadata", {}),
                               root=path.parent)
    for e in entries:
        vol_path = manifest.resolve(e.volume)
        if not vol_path.exists():
            raise ManifestMissingFile(f"manifest references missing file {vol_path}")
        if e.mask is not None and not manifest.resolve(e.mask).exists():
            raise ManifestMissingFile(
                f"manifest references missing mask {manifest.resolve(e.mask)}")
        try:
            with open(vol_path) as fh:
                header = json.load(fh)
        except json.JSONDecodeError as err:
            raise ManifestMalformed(
                f"volume header {vol_path} is not valid JSON: {err}") from err
        for key in ("volume_file", "mask_file"):
            name = header.get(key)
            if name and not (vol_path.parent / name).exists():
                raise ManifestMissingFile(
                    f"{vol_path} references missing blob {name}")
    return manifest
