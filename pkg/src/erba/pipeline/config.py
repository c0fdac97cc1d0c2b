"""Flat ``key=value`` configuration files for training and synthetic generation."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

ENDPOINTS = ("kcat", "km", "ki")
FUSION_MODES = ("staged", "concat_mlp", "geometry_first")


class ConfigError(ValueError):
    pass


def _coerce(name: str, kind: type, raw: str) -> Any:
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


class _KVConfig:
    """Mixin giving a dataclass flat key=value parsing with strict key checking."""

    @classmethod
    def from_mapping(cls, mapping: dict[str, Any]):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, value in mapping.items():
            kind = type(getattr(cls(), key)) if known[key].default is not dataclasses.MISSING else str
            kwargs[key] = _coerce(key, kind, value) if isinstance(value, str) else value
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>"):
        return cls.from_mapping(parse_kv_text(text, source))

    @classmethod
    def load(cls, path: str | Path):
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def to_text(self, exclude: tuple[str, ...] = ()) -> str:
        lines = []
        for f in fields(self):
            if f.name in exclude:
                continue
            value = getattr(self, f.name)
            if isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig(_KVConfig):
    seed: int = 0
    endpoint: str = "kcat"
    d: int = 32
    d_k: int = 0  # 0 means d_k = d
    n_experts: int = 4
    top_k: int = 2
    expert_rank: int = 2
    n_layers: int = 2
    max_length: int = 64
    use_lora: bool = True
    lora_rank: int = 8
    lora_scale: float = 16.0
    lora_dropout: float = 0.1
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    lambda1: float = 0.01
    lambda2: float = 0.1
    use_mrca: bool = True
    use_gmoe: bool = True
    use_esda: bool = True
    fusion_mode: str = "staged"
    gmoe_routing: str = "geometry"
    task_loss: str = "nll"
    bandwidth_mode: str = "median"
    bandwidth: float = 1.0
    mrca_post_norm: bool = True
    workers: int = 1

    def __post_init__(self):
        positive = ("d", "n_experts", "top_k", "expert_rank", "n_layers", "max_length",
                    "lora_rank", "batch_size", "epochs", "workers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_k < 0:
            raise ConfigError("d_k must be >= 0 (0 selects d)")
        if self.top_k > self.n_experts:
            raise ConfigError("top_k cannot exceed n_experts")
        if self.lr <= 0 or self.weight_decay < 0 or self.lora_scale <= 0:
            raise ConfigError("lr and lora_scale must be positive, weight_decay non-negative")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must lie in [0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.endpoint not in ENDPOINTS:
            raise ConfigError(f"endpoint must be one of {ENDPOINTS}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.gmoe_routing not in ("geometry", "plain"):
            raise ConfigError("gmoe_routing must be 'geometry' or 'plain'")
        if self.task_loss not in ("nll", "l2"):
            raise ConfigError("task_loss must be 'nll' or 'l2'")
        if self.bandwidth_mode not in ("median", "fixed") or self.bandwidth <= 0:
            raise ConfigError("bandwidth_mode must be 'median' or 'fixed' with bandwidth > 0")

    @property
    def key_dim(self) -> int:
        return self.d_k or self.d

    def canonical_text(self) -> str:
        # worker count never changes results, so it stays out of the identity
        return self.to_text(exclude=("workers",))

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()


@dataclass(frozen=True)
class SynthSpec(_KVConfig):
    n_samples: int = 200
    enzyme_len_min: int = 16
    enzyme_len_max: int = 24
    substrate_len_min: int = 4
    substrate_len_max: int = 10
    pocket_min: int = 4
    pocket_max: int = 8
    regimes: int = 3
    noise: float = 0.1
    heteroscedastic: bool = False
    hetero_scale: float = 3.0
    bilinear: float = 1.0
    geometry: float = 1.0
    regime_coefs: str = ""  # optional ';'-separated per-regime geometry slopes
    rg_min: float = 4.0
    rg_max: float = 10.0
    offset: float = 0.0
    jitter: float = 0.1
    endpoint: str = "kcat"

    def __post_init__(self):
        pairs = [("enzyme_len_min", "enzyme_len_max"), ("substrate_len_min", "substrate_len_max"),
                 ("pocket_min", "pocket_max")]
        for lo, hi in pairs:
            if getattr(self, lo) < 1 or getattr(self, lo) > getattr(self, hi):
                raise ConfigError(f"need 1 <= {lo} <= {hi}")
        if self.pocket_max > self.enzyme_len_min:
            raise ConfigError("pocket_max cannot exceed enzyme_len_min")
        if self.n_samples < 1 or self.regimes < 1:
            raise ConfigError("n_samples and regimes must be positive")
        if self.noise < 0 or self.hetero_scale < 0 or self.jitter < 0:
            raise ConfigError("noise, hetero_scale and jitter must be non-negative")
        if not 0 < self.rg_min <= self.rg_max:
            raise ConfigError("need 0 < rg_min <= rg_max")
        if self.endpoint not in ENDPOINTS:
            raise ConfigError(f"endpoint must be one of {ENDPOINTS}")
        if self.regime_coefs and len(self.coefficients()) != self.regimes:
            raise ConfigError("regime_coefs must list one slope per regime")

    def coefficients(self) -> list[float]:
        if self.regime_coefs:
            try:
                return [float(x) for x in self.regime_coefs.split(";") if x.strip()]
            except ValueError as exc:
                raise ConfigError(f"bad regime_coefs {self.regime_coefs!r}") from exc
        # alternating signs so that regimes cancel in a pooled fit
        return [self.geometry * (-1) ** g * (1.0 + 0.5 * (g // 2)) for g in range(self.regimes)]
