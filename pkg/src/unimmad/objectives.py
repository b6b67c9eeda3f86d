"""Training objectives: decompression consistency and annealed load balancing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Tensor, add, as_tensor, maximum, mean, mul, softmax, sqrt, sub, tsum
from .errors import ConfigError, ShapeError

EPS = 1e-8

# (modality, level) -> anomaly map of shape (n, h, w)
AnomalyMapSet = dict[tuple[str, int], Tensor]


def anomaly_map(prior, decoded, eps: float = EPS) -> Tensor:
    """``1 - cos(prior, decoded)`` over channels at each position, (n, h, w).

    Evaluated as ``|u/|u| - p/|p||^2 / 2`` with norms floored at ``eps``:
    the same value for nonzero vectors, exactly 0 whenever ``p == u``
    (zero vectors included) and 0.5 between a zero and a nonzero vector.
    """
    u, p = as_tensor(prior), as_tensor(decoded)
    if u.shape != p.shape:
        raise ShapeError(f"prior {u.shape} and decoded {p.shape} differ")
    uu = tsum(mul(u, u), axis=1)
    pp = tsum(mul(p, p), axis=1)
    dot = tsum(mul(u, p), axis=1)
    nu = maximum(sqrt(uu), eps)
    npp = maximum(sqrt(pp), eps)
    half = mul(add(uu / (nu * nu), pp / (npp * npp)), 0.5)
    return sub(half, dot / (nu * npp))


def anomaly_maps(priors: Mapping[str, Sequence], decoded: Mapping[str, Sequence]) -> AnomalyMapSet:
    out = {}
    for m, levels in decoded.items():
        if m not in priors:
            raise ShapeError(f"no prior for modality {m!r}")
        if len(priors[m]) != len(levels):
            raise ShapeError(f"modality {m!r}: {len(priors[m])} prior levels vs {len(levels)} decoded")
        for l, p in enumerate(levels):
            out[(m, l)] = anomaly_map(priors[m][l], p)
    return out


def modulation(maps: Mapping, gamma: float) -> dict:
    """Focal weights ``A ** gamma`` as constants (no gradient)."""
    return {k: np.maximum(as_tensor(a).data, 0) ** gamma for k, a in maps.items()}


def loss_dec(maps: Mapping, gamma: float, weights: Mapping | None = None) -> Tensor:
    """Mean over maps of the pixel mean of ``sg(A)**gamma * A``.

    ``weights`` overrides the modulation factors, e.g. to freeze them while
    finite-differencing.
    """
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    if not maps:
        raise ShapeError("no anomaly maps")
    w = modulation(maps, gamma) if weights is None else weights
    terms = [mean(mul(w[k], as_tensor(a))) for k, a in maps.items()]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def coefficient_of_variation(load) -> Tensor:
    """Population std / mean of a 1-D load vector."""
    load = as_tensor(load)
    mu = mean(load)
    dev = sub(load, mu)
    return sqrt(mean(mul(dev, dev))) / mu


def anneal_factor(epoch: int, total_epochs: int) -> float:
    if total_epochs <= 0:
        raise ConfigError(f"total epochs must be positive, got {total_epochs}")
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    return ((total_epochs - epoch) / total_epochs) ** 2


def expert_load(logits) -> Tensor:
    """Batch-mean softmax over all gate logits: the per-leader load."""
    return mean(softmax(as_tensor(logits), axis=1), axis=0)


def loss_moe(logits: Sequence, epoch: int, total_epochs: int) -> Tensor:
    """Annealed mean coefficient of variation of expert load.

    ``logits`` holds one (batch, n_leaders) gate-logit tensor per
    (modality, level).
    """
    factor = anneal_factor(epoch, total_epochs)
    if not logits:
        raise ShapeError("no router logits")
    cvs = [coefficient_of_variation(expert_load(lg)) for lg in logits]
    total = cvs[0]
    for c in cvs[1:]:
        total = total + c
    return total * (factor / len(cvs))


@dataclass
class LossBreakdown:
    l_dec: float
    l_moe: float
    total: float
    epoch: int
    total_epochs: int
    gamma: float
    loss: Tensor  # differentiable total

    def row(self) -> dict:
        return {"l_dec": self.l_dec, "l_moe": self.l_moe, "total": self.total}


def total_loss(maps, logits, epoch: int, total_epochs: int, gamma: float, use_moe: bool = True,
               weights: Mapping | None = None) -> LossBreakdown:
    ld = loss_dec(maps, gamma, weights)
    if use_moe:
        lm = loss_moe(logits, epoch, total_epochs)
    else:
        anneal_factor(epoch, total_epochs)
        lm = Tensor(np.zeros((), dtype=ld.dtype))
    loss = ld + lm
    return LossBreakdown(float(ld.data), float(lm.data), float(loss.data), epoch, total_epochs, gamma, loss)
