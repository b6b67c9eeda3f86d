"""Run configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # data
    modalities: tuple[tuple[str, int], ...] = (("rgb", 3), ("depth", 1))
    image_size: int = 64
    data: tuple[str, ...] = ()
    priors_dir: str = ""
    input_mean: float = 0.5
    input_std: float = 0.25
    # encoder
    embed_channels: int = 4
    c_max: int = 4
    channels: tuple[int, int, int] = (16, 32, 64)
    fcm_ratio: int = 4
    # priors
    prior_channels: tuple[int, int, int] = (16, 32, 64)
    prior_seed: int = 0
    # decoder
    n_exp: int = 8
    n_leaders: int = 32
    k_route: int = 2
    scales: tuple[int, ...] = (1, 3, 5)
    router_dim: int = 16
    gate_dim: int = 16
    # training
    epochs: int = 50
    batch_size: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 2.0
    moe_loss: bool = True
    seed: int = 0
    dtype: str = "float32"
    out: str = "runs/default"
    # continual
    replay: tuple[str, ...] = ()
    replay_frac: float = 0.01
    # scoring
    sigma: float = 4.0
    aupro_limit: float = 0.3

    def __post_init__(self):
        self.validate()

    @property
    def modality_names(self) -> list[str]:
        return [m for m, _ in self.modalities]

    def validate(self) -> None:
        if self.image_size % 16 or self.image_size <= 0:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        c_in = sum(c for _, c in self.modalities)
        if c_in > self.c_max:
            raise ConfigError(f"modalities need {c_in} input channels but c_max is {self.c_max}")
        c3 = self.channels[2]
        if c3 % (2 * self.fcm_ratio):
            raise ConfigError(f"C3={c3} is not divisible by 2*fcm_ratio={2 * self.fcm_ratio}")
        if not 1 <= self.k_route <= self.n_leaders:
            raise ConfigError(f"k_route must lie in [1, n_leaders], got {self.k_route}")
        if any(s % 2 == 0 for s in self.scales):
            raise ConfigError(f"expert kernel sizes must be odd, got {self.scales}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = _coerce(f, d[f.name])
        return cls(**kw)

    def model_hash(self) -> str:
        """Digest of the fields that determine parameter shapes."""
        keys = (
            "modalities", "image_size", "embed_channels", "c_max", "channels", "fcm_ratio",
            "prior_channels", "n_exp", "n_leaders", "scales", "router_dim", "gate_dim",
        )
        blob = json.dumps({k: self.to_dict()[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(f: dataclasses.Field, value):
    name = f.name
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if name == "modalities":
            if isinstance(value, str):
                out = []
                for item in filter(None, (v.strip() for v in value.split(","))):
                    m, _, c = item.partition(":")
                    out.append((m.strip(), int(c)))
                return tuple(out)
            return tuple((str(m), int(c)) for m, c in value)
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()] if isinstance(value, str) else list(value)
            if name in ("data", "replay"):
                return tuple(str(v) for v in items)
            return tuple(int(v) for v in items)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name!r}: {value!r}") from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path, **overrides) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    d = parse_config_text(text)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return Config.from_dict(d)


def dump_config(cfg: Config) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "modalities":
            v = ",".join(f"{m}:{c}" for m, c in v)
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
