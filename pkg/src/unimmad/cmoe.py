"""Cross mixture-of-experts decoder.

Per pyramid level a condition router picks ``k_route`` MoE-leaders from the
pooled interaction of prior queries and general-feature keys. Each leader
owns only per-output-channel mixing logits ``S`` over a shared bank of base
kernels ``W``; its kernel is the softmax-weighted composition of the bank.
The routed kernels and an always-on fixed expert run as one grouped
convolution over channel-replicated values, at each kernel scale, and an
aggregation 1x1 convolution fuses the scales into a residual on top of a
projection of the general feature.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Tensor, add, as_tensor, compose, concat, conv2d, gap, getitem, mul, reshape, softmax, take
from .errors import ShapeError, StateError
from .params import ParamStore


@dataclass
class RouterDecision:
    g: Tensor  # (n, gate_dim) pooled statistics
    logits: Tensor  # (n, n_leaders)
    indices: np.ndarray  # (n, k) leader ids, best first
    scores: Tensor  # (n, k) softmax over the selected logits
    k_route: int


@dataclass
class RouterParams:
    query_w: Tensor
    query_b: Tensor
    key_w: Tensor
    key_b: Tensor
    stats_w: Tensor
    stats_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    value_w: Tensor
    value_b: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, c_gen: int, c_prior: int, dim: int, gate_dim: int,
               n_leaders: int, c_val: int, rng) -> "RouterParams":
        return cls(
            query_w=store.he(f"{prefix}.router.query.w", (dim, c_prior, 1, 1), rng, gain=0.5),
            query_b=store.zeros(f"{prefix}.router.query.b", (dim,)),
            key_w=store.he(f"{prefix}.router.key.w", (dim, c_gen, 1, 1), rng, gain=0.5),
            key_b=store.zeros(f"{prefix}.router.key.b", (dim,)),
            stats_w=store.he(f"{prefix}.router.stats.w", (gate_dim, 2 * dim, 3, 3), rng, gain=0.5),
            stats_b=store.zeros(f"{prefix}.router.stats.b", (gate_dim,)),
            gate_w=store.he(f"{prefix}.router.gate.w", (n_leaders, gate_dim, 1, 1), rng, gain=1.0),
            gate_b=store.zeros(f"{prefix}.router.gate.b", (n_leaders,)),
            value_w=store.he(f"{prefix}.value.w", (c_val, c_gen, 1, 1), rng),
            value_b=store.zeros(f"{prefix}.value.b", (c_val,)),
        )


def top_k(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, largest first; ties go
    to the lower index."""
    return np.argsort(-np.asarray(logits), axis=-1, kind="stable")[..., :k]


def route(general, prior, params: RouterParams, k: int) -> RouterDecision:
    general, prior = as_tensor(general), as_tensor(prior)
    if general.shape[0] != prior.shape[0] or general.shape[2:] != prior.shape[2:]:
        raise ShapeError(f"general {general.shape} and prior {prior.shape} disagree in batch or spatial dims")
    n_leaders = params.gate_w.shape[0]
    if not 1 <= k <= n_leaders:
        raise ShapeError(f"k={k} outside [1, {n_leaders}]")
    q = conv2d(prior, params.query_w, params.query_b)
    kmap = conv2d(general, params.key_w, params.key_b)
    g = gap(conv2d(concat([q, kmap], axis=1), params.stats_w, params.stats_b))
    n = general.shape[0]
    logits = reshape(conv2d(g, params.gate_w, params.gate_b), (n, n_leaders))
    return decision_from_logits(logits, k, g=reshape(g, (n, -1)))


def decision_from_logits(logits, k: int, g=None) -> RouterDecision:
    logits = as_tensor(logits)
    idx = top_k(logits.data, k)
    rows = np.arange(logits.shape[0])[:, None]
    scores = softmax(getitem(logits, (rows, idx)), axis=1)
    return RouterDecision(g=g, logits=logits, indices=idx, scores=scores, k_route=k)


class ExpertBank:
    """Base kernels, leader mixing logits and fixed experts for every scale,
    plus the inference-time cache of composed leader kernels."""

    def __init__(self, store: ParamStore, prefix: str, n_exp: int, n_leaders: int, out_ch: int, in_ch: int,
                 scales: Sequence[int], agg_out: int, rng):
        self.n_exp, self.n_leaders = n_exp, n_leaders
        self.out_ch, self.in_ch = out_ch, in_ch
        self.scales = tuple(scales)
        self.W, self.S, self.fixed = {}, {}, {}
        for s in self.scales:
            fan_in = in_ch * s * s
            self.W[s] = store.he(f"{prefix}.experts.k{s}.W", (n_exp, out_ch, in_ch, s, s), rng, fan_in=fan_in)
            self.S[s] = store.add(f"{prefix}.experts.k{s}.S", rng.standard_normal((n_leaders, n_exp, out_ch)))
            self.fixed[s] = store.he(f"{prefix}.experts.k{s}.fixed", (out_ch, in_ch, s, s), rng, gain=0.5)
        self.agg_w = store.he(f"{prefix}.agg.w", (agg_out, len(self.scales) * out_ch, 1, 1), rng, gain=0.5)
        self.agg_b = store.zeros(f"{prefix}.agg.b", (agg_out,))
        self.training = True
        self.cache: dict[tuple[int, int], np.ndarray] = {}
        self._cache_sources: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # cache management

    @property
    def cache_valid(self) -> bool:
        return bool(self._cache_sources)

    def train(self) -> None:
        self.invalidate_cache()
        self.training = True

    def eval(self) -> None:
        self.training = False

    def invalidate_cache(self) -> None:
        for w, s in self._cache_sources.values():
            w.flags.writeable = True
            s.flags.writeable = True
        self.cache.clear()
        self._cache_sources.clear()

    def check_cache(self) -> None:
        for scale, (w, s) in self._cache_sources.items():
            if self.W[scale].data is not w or self.S[scale].data is not s:
                raise StateError("expert parameters changed after precompose_cache; call invalidate_cache() first")

    def assign(self, name: str, scale: int, value: np.ndarray) -> None:
        """Replace W/S/fixed of one scale; refused while the cache is live."""
        if self.cache_valid:
            raise StateError("cannot modify expert parameters while the kernel cache is valid")
        getattr(self, name)[scale].data = np.asarray(value, dtype=getattr(self, name)[scale].dtype)


def compose_kernel(bank: ExpertBank, leader: int, scale: int) -> Tensor:
    """Leader ``leader``'s kernel at ``scale``: per output channel, the
    softmax(S)-weighted sum of all base kernels."""
    if not 0 <= leader < bank.n_leaders:
        raise IndexError(f"leader {leader} out of range [0, {bank.n_leaders})")
    if scale not in bank.W:
        raise IndexError(f"no experts at kernel size {scale}")
    weights = softmax(take(bank.S[scale], leader, axis=0), axis=0)
    return compose(weights, bank.W[scale])


def precompose_cache(bank: ExpertBank) -> None:
    """Compose and store every leader kernel; parameters become read-only."""
    if bank.training:
        raise StateError("precompose_cache requires inference mode; call eval() first")
    bank.invalidate_cache()
    for s in bank.scales:
        for leader in range(bank.n_leaders):
            k = compose_kernel(bank, leader, s).data
            k.flags.writeable = False
            bank.cache[(leader, s)] = k
        bank.W[s].data.flags.writeable = False
        bank.S[s].data.flags.writeable = False
        bank._cache_sources[s] = (bank.W[s].data, bank.S[s].data)


def leader_kernel(bank: ExpertBank, leader: int, scale: int, memo: dict | None = None) -> Tensor:
    if not bank.training and bank.cache_valid:
        bank.check_cache()
        return Tensor(bank.cache[(leader, scale)])
    if memo is not None:
        key = (leader, scale)
        if key not in memo:
            memo[key] = compose_kernel(bank, leader, scale)
        return memo[key]
    return compose_kernel(bank, leader, scale)


def grouped_dynamic_filter(value, kernels: Sequence, scores=None) -> list[Tensor]:
    """Run all expert kernels in one grouped convolution.

    ``value`` (1, C_val, h, w) is tiled len(kernels) times along channels and
    convolved with the stacked kernels using ``groups=len(kernels)``. Returns
    one (1, O, h, w) tensor per kernel, in order.
    """
    value = as_tensor(value)
    kernels = [as_tensor(k) for k in kernels]
    g = len(kernels)
    if scores is not None and as_tensor(scores).shape[-1] != g - 1:
        raise ShapeError(f"{as_tensor(scores).shape[-1]} scores for {g - 1} routed kernels")
    c_val = value.shape[1]
    for k in kernels:
        if k.shape[1] != c_val:
            raise ShapeError(f"kernel {k.shape} expects {k.shape[1]} input channels, value has {c_val}")
        if k.shape != kernels[0].shape:
            raise ShapeError(f"kernels disagree in shape: {kernels[0].shape} vs {k.shape}")
    o = kernels[0].shape[0]
    tiled = concat([value] * g, axis=1)
    out = conv2d(tiled, concat(kernels, axis=0), groups=g)
    return [getitem(out, (slice(None), slice(j * o, (j + 1) * o))) for j in range(g)]


@dataclass
class DecodeTrace:
    """Instrumentation for one decode_level call."""

    experts: list[frozenset] = field(default_factory=list)  # per sample: participating expert ids
    group_convs: int = 0
    groups_per_conv: list[int] = field(default_factory=list)


class CMoELevel:
    """Router, projections and expert bank for one pyramid level."""

    def __init__(self, cfg, level: int, store: ParamStore, rng):
        c_gen = cfg.channels[level]
        c_prior = cfg.prior_channels[level]
        c_val = c_prior
        prefix = f"decoder.l{level + 1}"
        self.k_route = cfg.k_route
        self.router = RouterParams.create(
            store, prefix, c_gen, c_prior, cfg.router_dim, cfg.gate_dim, cfg.n_leaders, c_val, rng
        )
        self.bank = ExpertBank(store, prefix, cfg.n_exp, cfg.n_leaders, c_prior, c_val, cfg.scales, c_prior, rng)
        self.residual_w = store.he(f"{prefix}.residual.w", (c_prior, c_gen, 1, 1), rng, gain=0.5)
        self.residual_b = store.zeros(f"{prefix}.residual.b", (c_prior,))

    def __call__(self, general, prior, trace: DecodeTrace | None = None):
        return decode_level(general, prior, self.bank, self.router, self.k_route,
                            self.residual_w, self.residual_b, trace)


def decode_level(general, prior, bank: ExpertBank, params: RouterParams, k_route: int,
                 residual_w, residual_b=None, trace: DecodeTrace | None = None):
    """Decode one level for a batch. Returns (p, RouterDecision)."""
    general = as_tensor(general)
    decision = route(general, prior, params, k_route)
    value = conv2d(general, params.value_w, params.value_b)
    memo: dict = {}
    per_sample = []
    for b in range(general.shape[0]):
        v = getitem(value, slice(b, b + 1))
        leaders = [int(i) for i in decision.indices[b]]
        scale_outs = []
        for s in bank.scales:
            kernels = [leader_kernel(bank, leader, s, memo) for leader in leaders] + [bank.fixed[s]]
            outs = grouped_dynamic_filter(v, kernels, getitem(decision.scores, b))
            combined = outs[-1]
            for j in range(len(leaders)):
                combined = add(combined, mul(getitem(decision.scores, (b, j)), outs[j]))
            scale_outs.append(combined)
            if trace is not None:
                trace.group_convs += 1
                trace.groups_per_conv.append(len(kernels))
        if trace is not None:
            trace.experts.append(frozenset([*(f"leader:{i}" for i in leaders), "fixed"]))
        per_sample.append(concat(scale_outs, axis=1))
    fused = conv2d(concat(per_sample, axis=0), bank.agg_w, bank.agg_b)
    p = add(conv2d(general, residual_w, residual_b), fused)
    return p, decision


def count_parameters(n_exp: int, n_leaders: int, out_ch: int, in_ch: int, scales: Sequence[int]) -> dict:
    """Expert parameters of MoE-in-MoE versus a plain MoE with one full
    kernel per leader."""
    rows = []
    for k in scales:
        nested = n_exp * out_ch * in_ch * k * k + n_leaders * n_exp * out_ch
        plain = n_leaders * out_ch * in_ch * k * k
        rows.append({"kernel": k, "moe_in_moe": nested, "plain_moe": plain, "ratio": nested / plain})
    nested = sum(r["moe_in_moe"] for r in rows)
    plain = sum(r["plain_moe"] for r in rows)
    return {"per_scale": rows, "moe_in_moe": nested, "plain_moe": plain, "ratio": nested / plain}


class ActivationHistogram:
    """Per-task counts of how often each leader is routed to."""

    def __init__(self):
        self.counts: dict[str, Counter] = {}

    def add(self, task_id: str, indices: np.ndarray) -> None:
        c = self.counts.setdefault(task_id, Counter())
        c.update(int(i) for i in np.asarray(indices).reshape(-1))

    def rows(self, n_leaders: int) -> list[tuple[str, int, int]]:
        return [(t, j, self.counts[t][j]) for t in sorted(self.counts) for j in range(n_leaders)]

    def write_csv(self, path, n_leaders: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id", "leader_id", "activation_count"])
            w.writerows(self.rows(n_leaders))
