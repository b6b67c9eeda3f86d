"""Task manifests: which samples exist, where their tensors live, their labels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ManifestError, ValidationError
from .umtf import read_umtf

SPLITS = ("train", "test")


@dataclass
class SampleRecord:
    sample_id: str
    class_id: int
    split: str
    label: int
    files: dict[str, str]
    mask: str | None = None
    task_id: str = ""


@dataclass
class TaskManifest:
    task_id: str
    modalities: list[tuple[str, int]]
    image_size: tuple[int, int]
    samples: list[SampleRecord] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def modality_names(self) -> list[str]:
        return [m for m, _ in self.modalities]

    @property
    def class_counts(self) -> dict[int, dict[str, int]]:
        counts: dict[int, dict[str, int]] = {}
        for s in self.samples:
            counts.setdefault(s.class_id, {k: 0 for k in SPLITS})[s.split] += 1
        return dict(sorted(counts.items()))

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "image_size": list(self.image_size),
            "modalities": [{"name": m, "channels": c} for m, c in self.modalities],
            "classes": {str(k): v for k, v in self.class_counts.items()},
            "samples": [
                {k: v for k, v in asdict(s).items() if k != "task_id"} for s in self.samples
            ],
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    def validate(self, check_files: bool = True) -> None:
        for s in self.samples:
            if s.split not in SPLITS:
                raise ValidationError(f"{self.task_id}/{s.sample_id}: unknown split {s.split!r}")
            if s.split == "train" and (s.label != 0 or s.mask is not None):
                raise ValidationError(f"{self.task_id}/{s.sample_id}: training samples must be normal and mask-free")
            missing = set(self.modality_names) - set(s.files)
            if missing:
                raise ManifestError(f"{self.task_id}/{s.sample_id}: no file for modalities {sorted(missing)}")
            if check_files:
                for rel in list(s.files.values()) + ([s.mask] if s.mask else []):
                    if not (self.root / rel).is_file():
                        raise ValidationError(f"{self.task_id}/{s.sample_id}: missing file {self.root / rel}")

    def load_sample(self, record: SampleRecord) -> dict[str, np.ndarray]:
        """Modality tensors of one sample, each (1, c, H, W)."""
        out = {}
        for name, channels in self.modalities:
            arr = read_umtf(self.root / record.files[name])
            expect = (1, channels) + tuple(self.image_size)
            if arr.shape != expect:
                raise ValidationError(f"{record.sample_id}.{name}: expected dims {expect}, found {arr.shape}")
            out[name] = arr
        return out

    def load_mask(self, record: SampleRecord) -> np.ndarray:
        """Binary (H, W) mask; all zeros when the sample has none."""
        if record.mask is None:
            return np.zeros(self.image_size, dtype=np.float32)
        return read_umtf(self.root / record.mask).reshape(self.image_size)


def load_manifest(path, check_files: bool = True) -> TaskManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    try:
        task_id = doc["task_id"]
        manifest = TaskManifest(
            task_id=task_id,
            modalities=[(m["name"], int(m["channels"])) for m in doc["modalities"]],
            image_size=tuple(doc["image_size"]),
            samples=[SampleRecord(task_id=task_id, **s) for s in doc["samples"]],
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed manifest ({exc})") from exc
    manifest.validate(check_files)
    return manifest
