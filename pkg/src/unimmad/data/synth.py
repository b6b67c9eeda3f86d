"""Procedural multi-modal texture dataset with exact anomaly masks.

Every class is a sum of two oriented sinusoidal gratings plus a class-fixed
smooth noise field. The first modality renders that base texture (tinted per
channel when it has three channels). Later modalities are depth-like: the
smoothed gradient magnitude of the base texture, so they correlate with the
first modality without copying it.

Anomalous test samples get a rectangle or ellipse in which the texture is
replaced by an offset grating of perturbed amplitude and frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core.ops import blur_matrix
from ..errors import ConfigError, DataError
from .manifest import SampleRecord, TaskManifest
from .rng import generator
from .umtf import write_umtf

DEFAULT_MODALITIES = (("rgb", 3), ("depth", 1))
DEPTH_GAIN = 8.0
GRATING_AMPLITUDE = (0.08, 0.15)
GRATING_FREQUENCY = (2.0, 6.0)


@dataclass(frozen=True)
class ClassStyle:
    freqs: np.ndarray
    angles: np.ndarray
    amps: np.ndarray
    tints: np.ndarray
    fixed_noise: np.ndarray


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    bh = blur_matrix(field.shape[0], sigma)
    bw = blur_matrix(field.shape[1], sigma)
    return bh @ field @ bw.T


def class_style(seed: int, class_id: int, size: int) -> ClassStyle:
    rng = generator(seed, "class", class_id)
    noise = _smooth(rng.standard_normal((size, size)), 1.5)
    noise *= 0.02 / max(noise.std(), 1e-12)
    return ClassStyle(
        freqs=rng.uniform(*GRATING_FREQUENCY, size=2),
        angles=rng.uniform(0, np.pi, size=2),
        amps=rng.uniform(*GRATING_AMPLITUDE, size=2),
        tints=rng.uniform(0.6, 1.3, size=3),
        fixed_noise=noise,
    )


def _grating(size: int, freq: float, angle: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    return np.sin(2 * np.pi * freq * proj / size + phase)


def base_texture(style: ClassStyle, rng: np.random.Generator, size: int) -> np.ndarray:
    t = np.full((size, size), 0.5)
    for f, a, amp in zip(style.freqs, style.angles, style.amps):
        t += amp * _grating(size, f, a, rng.uniform(0, 2 * np.pi))
    t += style.fixed_noise
    t += 0.005 * rng.standard_normal((size, size))
    return t


def _region(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    scale = size / 64
    if rng.random() < 0.5:
        h, w = (int(v) for v in np.round(rng.uniform(8, 18, size=2) * scale))
        y, x = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
        mask[y : y + h, x : x + w] = True
    else:
        ry, rx = rng.uniform(4, 9, size=2) * scale
        cy = rng.uniform(ry, size - ry)
        cx = rng.uniform(rx, size - rx)
        yy, xx = np.mgrid[0:size, 0:size]
        mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    return mask


def inject_anomaly(texture: np.ndarray, style: ClassStyle, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (anomalous texture, mask). The masked mean is pushed at least
    three texture standard deviations away from the normal-region mean."""
    size = texture.shape[0]
    mask = _region(rng, size)
    std = texture[~mask].std()
    sign = 1.0 if rng.random() < 0.5 else -1.0
    amp = style.amps[0] * rng.uniform(0.5, 1.5)
    freq = style.freqs[0] * rng.uniform(2.0, 3.0)
    patch = amp * _grating(size, freq, style.angles[0] + rng.uniform(-0.5, 0.5), rng.uniform(0, 2 * np.pi))
    offset = 3.5 * std + 0.05
    for _ in range(8):
        out = texture.copy()
        out[mask] = texture[~mask].mean() + sign * offset + patch[mask]
        if abs(out[mask].mean() - out[~mask].mean()) >= 3 * out[~mask].std():
            return out, mask
        offset *= 1.5
    raise DataError("could not place a sufficiently distinct anomaly")  # pragma: no cover


def render(texture: np.ndarray, style: ClassStyle, modalities) -> dict[str, np.ndarray]:
    """Per-modality (1, c, H, W) float32 tensors from one base texture."""
    gy, gx = np.gradient(texture)
    depth = DEPTH_GAIN * _smooth(np.sqrt(gx * gx + gy * gy), 1.0)
    out = {}
    for k, (name, channels) in enumerate(modalities):
        src = texture if k == 0 else depth
        if channels == 3:
            planes = np.stack([0.5 + style.tints[c] * (src - 0.5) for c in range(3)])
        else:
            planes = src[None]
        out[name] = planes[None].astype(np.float32)
    return out


def synth_dataset(
    seed: int,
    classes: int,
    modalities=DEFAULT_MODALITIES,
    n_train: int = 30,
    n_test: int = 20,
    anomaly_frac: float = 0.5,
    out=".",
    size: int = 64,
    task_id: str = "synth",
    first_class: int = 0,
) -> TaskManifest:
    """Write a task under ``out/task_id`` and return its manifest."""
    if classes < 1:
        raise ConfigError(f"classes must be >= 1, got {classes}")
    if not modalities:
        raise ConfigError("at least one modality is required")
    for name, channels in modalities:
        if channels not in (1, 3):
            raise ConfigError(f"modality {name!r}: channels must be 1 or 3, got {channels}")
    if not 0 <= anomaly_frac <= 1:
        raise ConfigError(f"anomaly_frac must lie in [0, 1], got {anomaly_frac}")
    if size % 16:
        raise ConfigError(f"image size must be a multiple of 16, got {size}")

    root = Path(out) / task_id
    manifest = TaskManifest(task_id=task_id, modalities=[(m, int(c)) for m, c in modalities], image_size=(size, size), root=root)
    try:
        for class_id in range(first_class, first_class + classes):
            style = class_style(seed, class_id, size)
            n_anom = int(round(n_test * anomaly_frac))
            for split, n in (("train", n_train), ("test", n_test)):
                for idx in range(n):
                    sid = f"c{class_id:02d}_{split}_{idx:04d}"
                    rng = generator(seed, task_id, sid)
                    tex = base_texture(style, rng, size)
                    mask = None
                    if split == "test" and idx < n_anom:
                        tex, mask = inject_anomaly(tex, style, rng)
                    files = {}
                    for name, arr in render(tex, style, manifest.modalities).items():
                        files[name] = f"{split}/{sid}.{name}.umtf"
                        write_umtf(root / files[name], arr)
                    mask_rel = None
                    if mask is not None:
                        mask_rel = f"{split}/{sid}.mask.umtf"
                        write_umtf(root / mask_rel, mask[None, None].astype(np.float32))
                    manifest.samples.append(
                        SampleRecord(sid, class_id, split, int(mask is not None), files, mask_rel, task_id)
                    )
        manifest.save()
    except OSError as exc:
        raise DataError(f"cannot write dataset under {root}: {exc}") from exc
    return manifest
