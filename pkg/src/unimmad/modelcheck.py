"""Finite-difference gradient checks on a small double-precision model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import Config
from .core import GradTape, relative_error
from .data.rng import generator
from .data.synth import base_texture, class_style, render
from .encoder import concat_bundles
from .model import UniMMAD
from .objectives import modulation, total_loss

PARAM_GROUPS: dict[str, Callable[[str], bool]] = {
    "encoder": lambda n: n.startswith("encoder.") and not n.startswith("encoder.fcm."),
    "fcm": lambda n: n.startswith("encoder.fcm."),
    "router": lambda n: ".router." in n,
    "base_experts": lambda n: n.endswith(".W"),
    "leader_weights": lambda n: n.endswith(".S"),
    "fixed_expert": lambda n: n.endswith(".fixed"),
    "aggregation": lambda n: ".agg." in n,
    "projections": lambda n: ".value." in n or ".residual." in n,
}


def micro_config(**overrides) -> Config:
    """2 modalities, 32x32 inputs, narrow channels, double precision."""
    base = dict(
        image_size=32,
        embed_channels=4,
        channels=(4, 8, 16),
        prior_channels=(4, 8, 8),
        fcm_ratio=2,
        n_exp=3,
        n_leaders=4,
        router_dim=4,
        gate_dim=4,
        epochs=4,
        dtype="float64",
    )
    base.update(overrides)
    return Config(**base)


def micro_batch(cfg: Config, seed: int = 0, classes: int = 2) -> dict[str, np.ndarray]:
    """One normal sample per class, rendered in memory."""
    size = cfg.image_size
    bundles = []
    for c in range(classes):
        style = class_style(seed, c, size)
        tex = base_texture(style, generator(seed, "micro", c), size)
        bundles.append(render(tex, style, cfg.modalities))
    return {k: v.astype(cfg.dtype) for k, v in concat_bundles(bundles).items()}


class MicroProblem:
    """Loss of a fixed batch as a function of the model parameters.

    The focal modulation weights are evaluated once at the current
    parameters and then held constant, which is the function whose
    derivative the tape's stop-gradient rule computes.
    """

    def __init__(self, cfg: Config | None = None, seed: int = 0, epoch: int = 1):
        self.cfg = cfg or micro_config()
        self.model = UniMMAD(self.cfg)
        self.bundle = micro_batch(self.cfg, seed)
        self.priors = self.model.priors(self.bundle)
        self.epoch = epoch
        out = self.model.forward(self.bundle, self.priors)
        self.weights = modulation(out.maps, self.cfg.gamma)

    def loss(self, frozen: bool = True):
        out = self.model.forward(self.bundle, self.priors)
        w = self.weights if frozen else None
        return total_loss(out.maps, out.logits(), self.epoch, self.cfg.epochs, self.cfg.gamma, weights=w).loss

    def tape_gradients(self):
        with GradTape() as tape:
            loss = self.loss()
        return tape.backward(loss)

    def directional_fd(self, names, directions, eps: float, frozen: bool = True) -> float:
        params = self.model.params
        orig = {k: params[k].data.copy() for k in names}
        vals = []
        for sign in (1.0, -1.0):
            for k in names:
                params[k].data = orig[k] + sign * eps * directions[k]
            vals.append(float(self.loss(frozen).data))
        for k in names:
            params[k].data = orig[k]
        return (vals[0] - vals[1]) / (2 * eps)


def model_gradcheck(seed: int = 0, eps: float = 1e-6, n_directions: int = 2) -> dict[str, float]:
    """Worst relative error per parameter group between the tape's
    directional derivative and central differences along random directions."""
    prob = MicroProblem(seed=seed)
    grads = prob.tape_gradients()
    rng = generator(seed, "gradcheck")
    report = {}
    for group, pred in PARAM_GROUPS.items():
        names = [k for k in prob.model.params if pred(k)]
        if not names:
            raise AssertionError(f"parameter group {group!r} is empty")
        worst = 0.0
        for _ in range(n_directions):
            d = {k: rng.standard_normal(prob.model.params[k].shape) for k in names}
            analytic = sum(float(np.sum(grads[prob.model.params[k]] * d[k])) for k in names)
            numeric = prob.directional_fd(names, d, eps)
            worst = max(worst, relative_error(analytic, numeric))
        report[group] = worst
    return report
