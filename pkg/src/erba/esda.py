"""Distribution alignment of pooled stage representations via a mini-batch MMD."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import (
    DimensionError,
    Tensor,
    concat_rows,
    exp,
    mean_pool_rows,
    pairwise_sqdist,
    sum_all,
)



class BatchTooSmallError(ValueError):
    pass


@dataclass
class StageSummaries:
    z0: Tensor
    z1: Tensor
    z2: Tensor

    def __post_init__(self):
        shapes = {self.z0.shape, self.z1.shape, self.z2.shape}
        if len(shapes) != 1 or self.z0.shape[0] != 1:
            raise DimensionError(f"stage summaries must share shape 1×D, got {sorted(shapes)}")


@dataclass
class KernelConfig:
    mode: str = "median"  # "median" or "fixed"
    sigma: float = 1.0

    def __post_init__(self):
        if self.mode not in ("median", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.mode!r}")
        if not self.sigma > 0:
            raise ValueError("bandwidth must be positive")


def stage_summaries(h0: Tensor, h1: Tensor, h2: Tensor) -> StageSummaries:
    if h0.shape[0] != h1.shape[0]:
        raise DimensionError(f"H0 {h0.shape} and H1 {h1.shape} must share L_e")
    return StageSummaries(mean_pool_rows(h0), mean_pool_rows(h1), h2)


def rbf_kernel(a: Tensor, b: Tensor, sigma: float) -> Tensor:
    if not sigma > 0:
        raise ValueError("bandwidth must be positive")
    return exp(pairwise_sqdist(a, b) * (-1.0 / (2.0 * sigma * sigma)))


def median_bandwidth(points) -> float:
    """Median pairwise Euclidean distance, ignoring exact-zero distances; 1.0 if all coincide."""
    x = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] < 2:
        raise BatchTooSmallError("median heuristic needs at least two points")
    iu = np.triu_indices(x.shape[0], k=1)
    diff = x[iu[0]] - x[iu[1]]
    dist = np.sqrt((diff * diff).sum(axis=1))
    dist = dist[dist > 0]
    if dist.size == 0:
        return 1.0
    return float(np.median(dist))


def _stack(points) -> Tensor:
    if isinstance(points, Tensor):
        return points
    return concat_rows(list(points))


def mmd2(za, zb, sigma: float) -> Tensor:
    """Diagonal-free mini-batch MMD² with 1/N² within-set normalization.

    Within-set sums skip ``p == q`` but still divide by ``N²``; the cross
    term covers all pairs. Identical sets of size N therefore give ``-2/N``.
    """
    a, b = _stack(za), _stack(zb)
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise BatchTooSmallError(f"mmd2 needs at least 2 points per set, got {na} and {nb}")
    kaa = sum_all(rbf_kernel(a, a, sigma)) - float(na)  # diagonal terms are exactly 1
    kbb = sum_all(rbf_kernel(b, b, sigma)) - float(nb)
    kab = sum_all(rbf_kernel(a, b, sigma))
    return kaa * (1.0 / na**2) + kbb * (1.0 / nb**2) - kab * (2.0 / (na * nb))


def esda_bandwidths(batch: Sequence[StageSummaries], config: KernelConfig) -> tuple[float, float]:
    z0 = np.vstack([s.z0.data for s in batch])
    z1 = np.vstack([s.z1.data for s in batch])
    z2 = np.vstack([s.z2.data for s in batch])
    if config.mode == "fixed":
        return config.sigma, config.sigma
    return median_bandwidth(np.vstack([z1, z0])), median_bandwidth(np.vstack([z2, z0]))


def esda_loss(batch: Sequence[StageSummaries], config: KernelConfig | None = None,
              sigmas: tuple[float, float] | None = None) -> Tensor:
    """``MMD²(Z1, Z0) + MMD²(Z2, Z0)`` with per-term bandwidths held constant."""
    if len(batch) < 2:
        raise BatchTooSmallError(f"ESDA needs a batch of at least 2, got {len(batch)}")
    config = config or KernelConfig()
    z0 = concat_rows([s.z0 for s in batch])
    z1 = concat_rows([s.z1 for s in batch])
    z2 = concat_rows([s.z2 for s in batch])
    s1, s2 = sigmas if sigmas is not None else esda_bandwidths(batch, config)
    return mmd2(z1, z0, s1) + mmd2(z2, z0, s2)
