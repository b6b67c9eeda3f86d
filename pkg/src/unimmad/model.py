"""The full detector: general encoder, prior pyramids and C-MoE decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .cmoe import CMoELevel, DecodeTrace, RouterDecision, precompose_cache
from .config import Config
from .core import Tensor
from .data.rng import generator
from .encoder import Encoder
from .objectives import anomaly_maps
from .params import ParamStore
from .priors import PriorGenerator
from .scoring import fuse_and_localize, image_score


def is_continual_param(name: str) -> bool:
    """Leader mixing logits, condition routers and aggregation convolutions:
    the parameters updated during continual fine-tuning."""
    if not name.startswith("decoder."):
        return False
    return name.endswith(".S") or ".router." in name or ".agg." in name


@dataclass
class ForwardOutput:
    general: list[Tensor]
    decoded: dict[str, list[Tensor]]
    decisions: dict[tuple[str, int], RouterDecision]
    maps: dict[tuple[str, int], Tensor]
    traces: dict[tuple[str, int], DecodeTrace] = field(default_factory=dict)

    def logits(self) -> list[Tensor]:
        return [self.decisions[k].logits for k in sorted(self.decisions)]


class UniMMAD:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = generator(cfg.seed, "init")
        self.params = ParamStore(self.dtype)
        self.encoder = Encoder(cfg, self.params, rng)
        self.levels = [CMoELevel(cfg, l, self.params, rng) for l in range(3)]
        self.prior_generator = PriorGenerator(cfg.modalities, cfg.prior_channels, cfg.prior_seed, self.dtype)
        self.training = True

    # modes

    @property
    def banks(self):
        return [lvl.bank for lvl in self.levels]

    def train(self) -> "UniMMAD":
        self.training = True
        for b in self.banks:
            b.train()
        return self

    def eval(self, cache: bool = True) -> "UniMMAD":
        self.training = False
        for b in self.banks:
            b.invalidate_cache()
            b.eval()
            if cache:
                precompose_cache(b)
        return self

    # forward

    def normalize(self, bundle: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        mean, std = self.cfg.input_mean, self.cfg.input_std
        return {k: ((np.asarray(v, dtype=self.dtype) - mean) / std).astype(self.dtype) for k, v in bundle.items()}

    def priors(self, bundle: Mapping[str, np.ndarray]) -> dict[str, list[np.ndarray]]:
        """Priors of a raw bundle from the frozen generator."""
        return self.prior_generator(self.normalize(bundle))

    def forward(self, bundle: Mapping[str, np.ndarray], priors: Mapping | None = None, trace: bool = False,
                oracle: bool = False) -> ForwardOutput:
        """Encode ``bundle`` and decode every present modality at every level.

        ``oracle`` replaces the decoded features by the priors themselves,
        which makes every anomaly map zero.
        """
        x = self.normalize(bundle)
        if priors is None:
            priors = self.prior_generator(x)
        general = self.encoder(x)
        decoded, decisions, traces = {}, {}, {}
        for m in bundle:
            decoded[m] = []
            for l, level in enumerate(self.levels):
                if oracle:
                    decoded[m].append(Tensor(priors[m][l]))
                    continue
                tr = DecodeTrace() if trace else None
                p, dec = level(general[l], priors[m][l], tr)
                decoded[m].append(p)
                decisions[(m, l)] = dec
                if tr is not None:
                    traces[(m, l)] = tr
        maps = anomaly_maps({m: priors[m] for m in bundle}, decoded)
        return ForwardOutput(general, decoded, decisions, maps, traces)

    def localize(self, out: ForwardOutput) -> np.ndarray:
        h, w = self.cfg.image_size, self.cfg.image_size
        return fuse_and_localize(out.maps, h, w, self.cfg.sigma)

    def infer(self, bundle, priors=None, oracle: bool = False) -> tuple[np.ndarray, np.ndarray | float]:
        """(S_AL of shape (n, 1, H, W), S_AD per sample)."""
        out = self.forward(bundle, priors, oracle=oracle)
        s_al = self.localize(out)
        return s_al, image_score(s_al)
