"""Prediction head, heteroscedastic log10-space likelihood and the weighted total loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import ModelParams, Tensor, clamp, exp, gelu, take_cols

LOG_VAR_BOUNDS = (-10.0, 10.0)


@dataclass
class HeadParams:
    w1: Tensor  # D × D/2
    b1: Tensor
    w2: Tensor  # D/2 × 2
    b2: Tensor

    @classmethod
    def init(cls, params: ModelParams, d: int, rng: np.random.Generator,
             prefix: str = "head") -> HeadParams:
        hidden = max(d // 2, 1)
        return cls(
            w1=params.add(f"{prefix}.w1", rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden))),
            b1=params.add(f"{prefix}.b1", np.zeros((1, hidden))),
            w2=params.add(f"{prefix}.w2", rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 2))),
            b2=params.add(f"{prefix}.b2", np.zeros((1, 2))),
        )

    @classmethod
    def from_params(cls, params: ModelParams, prefix: str = "head") -> HeadParams:
        return cls(*(params[f"{prefix}.{k}"] for k in ("w1", "b1", "w2", "b2")))


@dataclass
class LossWeights:
    balance: float = 0.01
    align: float = 0.1

    def __post_init__(self):
        if self.balance < 0 or self.align < 0:
            raise ValueError("loss weights must be non-negative")


def head_forward(h2: Tensor, params: HeadParams) -> tuple[Tensor, Tensor]:
    """Return ``(mu, s)`` as 1×1 tensors: mean and log-variance of the log10 target."""
    out = gelu(h2 @ params.w1 + params.b1) @ params.w2 + params.b2
    return take_cols(out, [0]), take_cols(out, [1])


def nll(z, mu, s):
    """Per-sample ``0.5 * exp(-s) * (z - mu)^2 + 0.5 * s`` with ``s`` clamped to [-10, 10].

    Accepts floats or 1×1 tensors; returns the same kind.
    """
    if not any(isinstance(x, Tensor) for x in (z, mu, s)):
        s = min(max(float(s), LOG_VAR_BOUNDS[0]), LOG_VAR_BOUNDS[1])
        return 0.5 * math.exp(-s) * (float(z) - float(mu)) ** 2 + 0.5 * s
    s = clamp(s if isinstance(s, Tensor) else Tensor(s), *LOG_VAR_BOUNDS)
    resid = (z if isinstance(z, Tensor) else Tensor(z)) - mu
    return exp(-s) * resid * resid * 0.5 + s * 0.5


def squared_error(z, mu):
    resid = (z if isinstance(z, Tensor) else Tensor(z)) - mu
    return resid * resid * 0.5


def total_loss(task, gmoe, esda, weights: LossWeights | None = None):
    """``task + λ1·gmoe + λ2·esda``."""
    w = weights or LossWeights()
    return task + gmoe * w.balance + esda * w.align


def predict(mu: float, s: float) -> tuple[float, float]:
    """Back-transform to ``(ŷ = 10^mu, predictive std of log10 y)``."""
    return 10.0 ** float(mu), math.sqrt(math.exp(float(s)))
