"""Parameter-count table, grouped-vs-serial check and latency measurements."""

from __future__ import annotations

import time

import numpy as np

from .cmoe import compose_kernel, count_parameters, grouped_dynamic_filter, leader_kernel
from .config import Config
from .core import conv2d
from .data.rng import generator
from .model import UniMMAD

MEASUREMENTS = (
    "serial_experts",
    "grouped_filter",
    "compose_uncached",
    "compose_cached",
    "infer_uncached",
    "infer_cached",
)


def grouped_serial_deviation(n_configs: int = 100, seed: int = 0, dtype=np.float32) -> dict:
    """Max |grouped - serial| over random (C_val, h, w, K_route, K_s) draws."""
    rng = generator(seed, "grouped-vs-serial")
    worst = 0.0
    for _ in range(n_configs):
        c_val = int(rng.integers(2, 33))
        h, w = int(rng.integers(4, 33)), int(rng.integers(4, 33))
        k_route = int(rng.integers(1, 4))
        ks = int(rng.choice([1, 3, 5]))
        o = int(rng.integers(1, 17))
        value = rng.standard_normal((1, c_val, h, w)).astype(dtype)
        kernels = [rng.standard_normal((o, c_val, ks, ks)).astype(dtype) for _ in range(k_route + 1)]
        grouped = grouped_dynamic_filter(value, kernels)
        for g, k in zip(grouped, kernels):
            worst = max(worst, float(np.max(np.abs(g.data - conv2d(value, k).data))))
    return {"configs": n_configs, "max_abs_deviation": worst}


def _timeit(fn, iters: int, warmup: int) -> dict:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return {"median_s": float(np.median(times)), "min_s": float(np.min(times)), "iters": iters}


def _timeit_pair(fa, fb, iters: int, warmup: int) -> tuple[dict, dict]:
    for _ in range(warmup):
        fa(), fb()
    ta, tb = [], []
    for _ in range(iters):
        for fn, times in ((fa, ta), (fb, tb)):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    return tuple({"median_s": float(np.median(t)), "min_s": float(np.min(t)), "iters": iters} for t in (ta, tb))


def bench(cfg: Config | None = None, iters: int = 30, warmup: int = 5, n_configs: int = 100) -> dict:
    cfg = cfg or Config()
    counts = {
        "default_3x3": count_parameters(8, 32, 64, 64, (3,)),
        "configured": count_parameters(cfg.n_exp, cfg.n_leaders, cfg.prior_channels[-1], cfg.prior_channels[-1],
                                       cfg.scales),
        "per_kernel_size": {str(k): count_parameters(cfg.n_exp, cfg.n_leaders, 64, 64, (k,)) for k in (1, 3, 5)},
    }
    rng = generator(cfg.seed, "bench")
    model = UniMMAD(cfg)
    size = cfg.image_size
    bundle = {m: rng.random((1, c, size, size)).astype(model.dtype) for m, c in cfg.modalities}
    priors = model.priors(bundle)

    level = model.levels[-1]
    bank = level.bank
    scale = max(bank.scales)
    leaders = list(range(cfg.k_route))
    value = rng.standard_normal((1, bank.in_ch, size // 16, size // 16)).astype(model.dtype)
    kernels = [compose_kernel(bank, i, scale).data for i in leaders] + [bank.fixed[scale].data]

    def serial():
        for k in kernels:
            conv2d(value, k)

    def grouped():
        grouped_dynamic_filter(value, kernels)

    def compose_all():
        for i in leaders:
            compose_kernel(bank, i, scale)

    timings = {
        "serial_experts": _timeit(serial, iters, warmup),
        "grouped_filter": _timeit(grouped, iters, warmup),
        "compose_uncached": _timeit(compose_all, iters, warmup),
    }
    cached_model = UniMMAD(cfg)
    model.eval(cache=False)
    cached_model.eval(cache=True)
    cached_bank = cached_model.levels[-1].bank

    def cached_all():
        for i in leaders:
            leader_kernel(cached_bank, i, scale)

    timings["compose_cached"] = _timeit(cached_all, iters, warmup)
    # alternate the two modes so load drift on a shared machine hits both alike
    timings["infer_uncached"], timings["infer_cached"] = _timeit_pair(
        lambda: model.infer(bundle, priors), lambda: cached_model.infer(bundle, priors), iters, warmup)
    s_uncached = model.infer(bundle, priors)[0]
    s_cached = cached_model.infer(bundle, priors)[0]
    model.train()
    return {
        "parameter_counts": counts,
        "grouped_vs_serial": grouped_serial_deviation(n_configs, cfg.seed),
        "timings": {k: timings[k] for k in MEASUREMENTS},
        "cache": {
            "max_abs_score_diff": float(np.max(np.abs(s_cached - s_uncached))),
            "latency_ratio": timings["infer_cached"]["median_s"] / timings["infer_uncached"]["median_s"],
        },
    }
