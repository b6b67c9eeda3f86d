"""Domain-specific prior pyramids.

The default source is a frozen, randomly initialised convolutional pyramid
per modality (stem plus three stride-2 stages, bias-free, ReLU). Features
extracted elsewhere, e.g. from a pretrained backbone, enter through
:func:`load_priors`.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import conv2d, relu
from .data.rng import generator
from .data.umtf import read_umtf, write_umtf
from .errors import ValidationError

PriorPyramid = dict[str, list[np.ndarray]]


class PriorGenerator:
    """Frozen random feature pyramids, one independent network per modality."""

    def __init__(self, modalities: Sequence[tuple[str, int]], channels: Sequence[int], seed: int, dtype=np.float32):
        self.channels = tuple(channels)
        self.seed = seed
        self.kernels: dict[str, list[np.ndarray]] = {}
        p1, p2, p3 = self.channels
        for name, c in modalities:
            rng = generator(seed, "prior", name)
            shapes = [(p1, c, 3, 3), (p1, p1, 3, 3), (p2, p1, 3, 3), (p3, p2, 3, 3)]
            ks = []
            for shape in shapes:
                fan_in = shape[1] * shape[2] * shape[3]
                k = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
                k.flags.writeable = False
                ks.append(k)
            self.kernels[name] = ks

    def pyramid(self, name: str, x: np.ndarray) -> list[np.ndarray]:
        ks = self.kernels[name]
        f = relu(conv2d(x, ks[0].astype(x.dtype), stride=2)).data
        levels = []
        for k in ks[1:]:
            f = relu(conv2d(f, k.astype(x.dtype), stride=2)).data
            levels.append(f)
        return levels

    def __call__(self, bundle: Mapping[str, np.ndarray]) -> PriorPyramid:
        return {name: self.pyramid(name, np.asarray(x)) for name, x in bundle.items()}


def generate_priors(bundle: Mapping[str, np.ndarray], seed: int, config) -> PriorPyramid:
    """Priors for ``bundle`` from the frozen generator seeded by ``seed``."""
    return PriorGenerator(config.modalities, config.prior_channels, seed)(bundle)


def prior_path(directory, sample_id: str, modality: str, level: int) -> Path:
    return Path(directory) / f"{sample_id}.{modality}.l{level}.umtf"


def save_priors(directory, sample_id: str, priors: PriorPyramid) -> None:
    for name, levels in priors.items():
        for l, arr in enumerate(levels, 1):
            write_umtf(prior_path(directory, sample_id, name, l), arr)


def expected_prior_shapes(config, batch: int = 1) -> list[tuple[int, ...]]:
    size = config.image_size
    return [(batch, c, size // 2 ** (l + 1), size // 2 ** (l + 1)) for l, c in enumerate(config.prior_channels, 1)]


def load_priors(directory, sample_id: str, config, modalities: Sequence[str] | None = None) -> PriorPyramid:
    """Read ``<sample_id>.<modality>.l{1,2,3}.umtf`` and check shapes."""
    names = list(modalities) if modalities is not None else config.modality_names
    expect = expected_prior_shapes(config)
    out = {}
    for name in names:
        levels = []
        for l in (1, 2, 3):
            arr = read_umtf(prior_path(directory, sample_id, name, l))
            if arr.shape != expect[l - 1]:
                raise ValidationError(
                    f"{prior_path(directory, sample_id, name, l)}: expected dims {expect[l - 1]}, found {arr.shape}"
                )
            levels.append(arr)
        extra = prior_path(directory, sample_id, name, 4)
        if extra.exists():
            raise ValidationError(f"{sample_id}.{name}: found a 4th prior level, expected exactly 3")
        out[name] = levels
    return out
