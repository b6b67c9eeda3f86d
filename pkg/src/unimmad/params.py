"""Named parameter storage and initialisers."""

from __future__ import annotations

import math

import numpy as np

from .core import Tensor


class ParamStore(dict):
    """Insertion-ordered ``path -> Tensor`` map of trainable parameters."""

    def __init__(self, dtype=np.float32):
        super().__init__()
        self.dtype = np.dtype(dtype)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def he(self, name: str, shape, rng: np.random.Generator, fan_in: int | None = None, gain: float = 1.0) -> Tensor:
        if fan_in is None:
            fan_in = int(np.prod(shape[1:]))
        std = gain * math.sqrt(2.0 / fan_in)
        return self.add(name, rng.standard_normal(shape) * std)

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def count(self, prefix: str = "") -> int:
        return sum(t.data.size for k, t in self.items() if k.startswith(prefix))

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for t in self.values():
            t.data = t.data.astype(self.dtype)
