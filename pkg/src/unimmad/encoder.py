"""General multi-modal encoder: embedding, residual trunk, FCM, restoration."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .core import Tensor, add, as_tensor, conv2d, relu, upsample_nearest
from .errors import ConfigError, ManifestError, ShapeError
from .params import ParamStore


def embed(
    bundle: Mapping[str, np.ndarray],
    modalities: Sequence[tuple[str, int]],
    c_max: int,
    weight,
    bias=None,
) -> Tensor:
    """Concatenate modalities in manifest order, zero-pad to ``c_max`` and
    project with a 1x1 convolution.

    Modalities listed in ``modalities`` but missing from ``bundle`` occupy
    their channel slots as zeros, so any subset maps to the same layout.
    """
    unknown = set(bundle) - {m for m, _ in modalities}
    if unknown:
        raise ManifestError(f"unknown modality ids {sorted(unknown)}")
    if not bundle:
        raise ManifestError("bundle holds no modality")
    c_in = sum(c for _, c in modalities)
    if c_in > c_max:
        raise ConfigError(f"{c_in} input channels exceed c_max={c_max}")
    ref = next(iter(bundle.values()))
    n, _, h, w = ref.shape
    dtype = ref.dtype
    planes = []
    for name, channels in modalities:
        arr = bundle.get(name)
        if arr is None:
            arr = np.zeros((n, channels, h, w), dtype=dtype)
        elif arr.shape != (n, channels, h, w):
            raise ShapeError(f"modality {name!r}: expected {(n, channels, h, w)}, got {arr.shape}")
        planes.append(np.asarray(arr, dtype=dtype))
    if c_max > c_in:
        planes.append(np.zeros((n, c_max - c_in, h, w), dtype=dtype))
    x = np.concatenate(planes, axis=1)
    return conv2d(x, weight, bias)


class ResBlock:
    """conv3x3 -> ReLU -> conv3x3 plus a (projected) skip, then ReLU."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, stride: int, rng):
        self.stride = stride
        self.w1 = store.he(f"{name}.conv1.w", (cout, cin, 3, 3), rng)
        self.b1 = store.zeros(f"{name}.conv1.b", (cout,))
        self.w2 = store.he(f"{name}.conv2.w", (cout, cout, 3, 3), rng, gain=0.5)
        self.b2 = store.zeros(f"{name}.conv2.b", (cout,))
        self.proj = None
        if cin != cout or stride != 1:
            self.proj = store.he(f"{name}.proj.w", (cout, cin, 1, 1), rng, gain=0.5)

    def __call__(self, x) -> Tensor:
        h = relu(conv2d(x, self.w1, self.b1, stride=self.stride))
        h = conv2d(h, self.w2, self.b2)
        skip = as_tensor(x) if self.proj is None else conv2d(x, self.proj, stride=self.stride)
        return relu(add(h, skip))


class FCM:
    """Hierarchical bottleneck on the deepest feature.

    Inner stage: parallel 1x1 / 3x3 / 5x5 branches, each wrapped in 1x1
    reductions to C3/r and back, summed. Outer stage: 1x1 to C3/(2r), ReLU,
    1x1 back to C3.
    """

    KERNELS = (1, 3, 5)

    def __init__(self, store: ParamStore, name: str, c3: int, ratio: int, rng, bias: bool = True):
        if c3 % (2 * ratio):
            raise ConfigError(f"C3={c3} not divisible by 2r={2 * ratio}")
        self.inner_width = c3 // ratio
        self.outer_width = c3 // (2 * ratio)
        self.branches = []
        for k in self.KERNELS:
            p = f"{name}.inner.k{k}"
            self.branches.append(
                (
                    store.he(f"{p}.down.w", (self.inner_width, c3, 1, 1), rng),
                    store.he(f"{p}.mid.w", (self.inner_width, self.inner_width, k, k), rng),
                    store.zeros(f"{p}.mid.b", (self.inner_width,)) if bias else None,
                    store.he(f"{p}.up.w", (c3, self.inner_width, 1, 1), rng, gain=0.5),
                )
            )
        self.outer_down = store.he(f"{name}.outer.down.w", (self.outer_width, c3, 1, 1), rng)
        self.outer_down_b = store.zeros(f"{name}.outer.down.b", (self.outer_width,)) if bias else None
        self.outer_up = store.he(f"{name}.outer.up.w", (c3, self.outer_width, 1, 1), rng)

    def branch(self, x, index: int) -> Tensor:
        down, mid, mid_b, up = self.branches[index]
        return conv2d(relu(conv2d(conv2d(x, down), mid, mid_b)), up)

    def inner(self, x) -> Tensor:
        out = self.branch(x, 0)
        for i in range(1, len(self.branches)):
            out = add(out, self.branch(x, i))
        return out

    def outer(self, x) -> Tensor:
        return conv2d(relu(conv2d(x, self.outer_down, self.outer_down_b)), self.outer_up)

    def __call__(self, x) -> Tensor:
        return self.outer(self.inner(x))


class Encoder:
    """Embedding -> stem -> three stride-2 residual blocks -> FCM -> restoration.

    Emits the general pyramid at strides 4, 8 and 16 with channels C1, C2, C3.
    """

    def __init__(self, cfg, store: ParamStore, rng: np.random.Generator):
        c = cfg.embed_channels
        c1, c2, c3 = cfg.channels
        self.modalities = list(cfg.modalities)
        self.c_max = cfg.c_max
        self.embed_w = store.he("encoder.embed.w", (c, cfg.c_max, 1, 1), rng)
        self.embed_b = store.zeros("encoder.embed.b", (c,))
        self.stem_w = store.he("encoder.stem.w", (c1, c, 3, 3), rng)
        self.stem_b = store.zeros("encoder.stem.b", (c1,))
        self.down = [
            ResBlock(store, "encoder.block1", c1, c1, 2, rng),
            ResBlock(store, "encoder.block2", c1, c2, 2, rng),
            ResBlock(store, "encoder.block3", c2, c3, 2, rng),
        ]
        self.fcm = FCM(store, "encoder.fcm", c3, cfg.fcm_ratio, rng)
        self.up = [
            ResBlock(store, "encoder.restore3", c3, c3, 1, rng),
            ResBlock(store, "encoder.restore2", c3, c2, 1, rng),
            ResBlock(store, "encoder.restore1", c2, c1, 1, rng),
        ]

    def embed(self, bundle: Mapping[str, np.ndarray]) -> Tensor:
        return embed(bundle, self.modalities, self.c_max, self.embed_w, self.embed_b)

    def encode(self, x) -> tuple[Tensor, list[Tensor]]:
        x = as_tensor(x)
        h, w = x.shape[2], x.shape[3]
        if h % 16 or w % 16:
            raise ShapeError(f"input spatial size {h}x{w} is not a multiple of 16")
        f = relu(conv2d(x, self.stem_w, self.stem_b, stride=2))
        for block in self.down:
            f = block(f)
        compressed = self.fcm(f)
        f3 = self.up[0](compressed)
        f2 = self.up[1](upsample_nearest(f3, 2))
        f1 = self.up[2](upsample_nearest(f2, 2))
        return compressed, [f1, f2, f3]

    def __call__(self, bundle: Mapping[str, np.ndarray]) -> list[Tensor]:
        return self.encode(self.embed(bundle))[1]


def concat_bundles(bundles: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Stack single-sample bundles along the batch axis."""
    keys = list(bundles[0])
    return {k: np.concatenate([b[k] for b in bundles], axis=0) for k in keys}


__all__ = ["Encoder", "FCM", "ResBlock", "concat_bundles", "embed"]
