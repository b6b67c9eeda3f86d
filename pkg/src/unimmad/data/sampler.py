"""Class-balanced sampling over one or more task manifests."""

from __future__ import annotations

from itertools import count
from typing import Iterator, Sequence

import numpy as np

from ..errors import ConfigError
from .manifest import SampleRecord, TaskManifest
from .rng import generator


class WeightedSampler:
    """Draws a class with probability proportional to 1 / (its sample count),
    then a sample uniformly within that class."""

    def __init__(self, manifests: Sequence[TaskManifest], seed: int, split: str = "train"):
        groups: dict[tuple[str, int], list[SampleRecord]] = {}
        for m in manifests:
            for cls in m.class_counts:
                groups.setdefault((m.task_id, cls), [])
            for s in m.split(split):
                groups[(m.task_id, s.class_id)].append(s)
        if not groups:
            raise ConfigError("sampler needs at least one class")
        for key, members in groups.items():
            if not members:
                raise ConfigError(f"class {key} has no {split} samples")
        self.keys = sorted(groups)
        self.groups = [groups[k] for k in self.keys]
        inv = np.array([1.0 / len(g) for g in self.groups])
        self.probs = inv / inv.sum()
        self.seed = seed

    def draw(self, rng: np.random.Generator) -> SampleRecord:
        c = int(rng.choice(len(self.groups), p=self.probs))
        members = self.groups[c]
        return members[int(rng.integers(len(members)))]

    def batch(self, step: int, size: int) -> list[SampleRecord]:
        """The batch for training step ``step``; depends only on (seed, step)."""
        rng = generator(self.seed, "batch", step)
        return [self.draw(rng) for _ in range(size)]

    def stream(self) -> Iterator[SampleRecord]:
        """Infinite deterministic stream of samples."""
        for block in count():
            yield from self.batch(block, 256)


class ReplaySampler:
    """Mixes a ``replay_frac`` share of previous-task samples into new-task batches."""

    def __init__(self, new: WeightedSampler, previous: WeightedSampler | None, replay_frac: float, seed: int):
        if not 0 <= replay_frac <= 1:
            raise ConfigError(f"replay_frac must lie in [0, 1], got {replay_frac}")
        if replay_frac > 0 and previous is None:
            raise ConfigError("replay requested without previous manifests")
        self.new, self.previous, self.replay_frac, self.seed = new, previous, replay_frac, seed

    def batch(self, step: int, size: int) -> list[SampleRecord]:
        rng = generator(self.seed, "replay", step)
        out = []
        for _ in range(size):
            if self.replay_frac > 0 and rng.random() < self.replay_frac:
                out.append(self.previous.draw(rng))
            else:
                out.append(self.new.draw(rng))
        return out
