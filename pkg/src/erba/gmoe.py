"""Geometry-routed sparse mixture of pocket-local low-rank experts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import (
    ModelParams,
    Tensor,
    concat_cols,
    concat_rows,
    gelu,
    mean_pool_rows,
    scatter_add_rows,
    scatter_cols,
    softmax_rows,
    sum_all,
    take_cols,
    take_rows,
)


class PocketError(ValueError):
    pass


def pocket_indices(indices: Sequence[int], length: int) -> np.ndarray:
    """Validate a pocket index set: non-empty, strictly increasing, inside ``[0, length)``."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise PocketError("pocket index set is empty")
    if np.any(np.diff(idx) <= 0):
        raise PocketError(f"pocket indices must be sorted and unique: {idx.tolist()}")
    if idx[0] < 0 or idx[-1] >= length:
        raise PocketError(f"pocket index out of range for length {length}: {idx.tolist()}")
    return idx


@dataclass
class Expert:
    u: Tensor  # r × D
    v: Tensor  # D × r
    b: Tensor  # r × D


@dataclass
class GmoeParams:
    w_gate: Tensor  # n × 2D
    b_gate: Tensor  # n × 1
    experts: list[Expert]
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    k: int = 2
    routing: str = "geometry"  # or "plain": geometry-blind gate input

    @property
    def n(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.mlp_w1.shape[0]

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got k={self.k}, n={self.n}")
        if self.routing not in ("geometry", "plain"):
            raise ValueError(f"unknown routing mode {self.routing!r}")

    @classmethod
    def init(cls, params: ModelParams, d: int, rng: np.random.Generator, n: int = 4, k: int = 2,
             r: int = 2, prefix: str = "gmoe", routing: str = "geometry",
             expert_init: float = 0.1) -> GmoeParams:
        if r < 1:
            raise ValueError("expert rank must be >= 1")
        std = 1.0 / np.sqrt(d)
        experts = []
        for i in range(n):
            p = f"{prefix}.e{i}"
            experts.append(Expert(
                u=params.add(f"{p}.u", rng.normal(0.0, std, (r, d))),
                v=params.add(f"{p}.v", rng.normal(0.0, expert_init, (d, r))),
                b=params.add(f"{p}.b", rng.normal(0.0, std, (r, d))),
            ))
        return cls(
            w_gate=params.add(f"{prefix}.w_gate", rng.normal(0.0, 1.0 / np.sqrt(2 * d), (n, 2 * d))),
            b_gate=params.add(f"{prefix}.b_gate", np.zeros((n, 1))),
            experts=experts,
            mlp_w1=params.add(f"{prefix}.mlp_w1", rng.normal(0.0, std, (d, d))),
            mlp_b1=params.add(f"{prefix}.mlp_b1", np.zeros((1, d))),
            mlp_w2=params.add(f"{prefix}.mlp_w2", rng.normal(0.0, std, (d, d))),
            mlp_b2=params.add(f"{prefix}.mlp_b2", np.zeros((1, d))),
            k=k,
            routing=routing,
        )

    @classmethod
    def from_params(cls, params: ModelParams, n: int, k: int, prefix: str = "gmoe",
                    routing: str = "geometry") -> GmoeParams:
        experts = [Expert(params[f"{prefix}.e{i}.u"], params[f"{prefix}.e{i}.v"],
                          params[f"{prefix}.e{i}.b"]) for i in range(n)]
        return cls(params[f"{prefix}.w_gate"], params[f"{prefix}.b_gate"], experts,
                   params[f"{prefix}.mlp_w1"], params[f"{prefix}.mlp_b1"],
                   params[f"{prefix}.mlp_w2"], params[f"{prefix}.mlp_b2"], k, routing)


@dataclass
class GateReport:
    alpha: Tensor  # 1 × n routing probabilities
    alpha_tilde: Tensor  # 1 × n, exactly k non-zeros summing to 1
    selected: list[int]
    v_emg: Tensor  # 1 × 2D
    logits: Tensor = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.alpha.shape[1]


def top_k_indices(probs: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest entries; ties go to the lower index."""
    order = np.argsort(-np.asarray(probs, dtype=np.float64).ravel(), kind="stable")
    return sorted(int(i) for i in order[:k])


def gate(v_emg: Tensor, params: GmoeParams) -> GateReport:
    logits = v_emg @ params.w_gate.T + params.b_gate.T
    alpha = softmax_rows(logits)
    selected = top_k_indices(alpha.data, params.k)
    kept = take_cols(alpha, selected)
    alpha_tilde = scatter_cols(kept / sum_all(kept), selected, params.n)
    return GateReport(alpha, alpha_tilde, selected, v_emg, logits)


def route(h1: Tensor, h_g: Tensor, pocket: Sequence[int], params: GmoeParams) -> GateReport:
    """Gate on ``[Pool(H1[pocket]) ⊕ Pool(H_g)]`` and keep the top-k renormalized gates.

    In ``plain`` routing mode the gate sees the mean over all H1 rows and a
    zero block in place of the geometry summary.
    """
    idx = pocket_indices(pocket, h1.shape[0])
    if params.routing == "plain":
        v_emg = concat_cols([mean_pool_rows(h1), Tensor(np.zeros((1, h1.shape[1])))])
    else:
        v_emg = concat_cols([mean_pool_rows(take_rows(h1, idx)), mean_pool_rows(h_g)])
    return gate(v_emg, params)


def expert_forward(i: int, h1: Tensor, h_g: Tensor, pocket: Sequence[int], params: GmoeParams,
                   geometry_summary: Tensor | None = None) -> Tensor:
    """Pocket rows get ``h + V_i gelu(U_i h + B_i Pool(H_g))``; other rows pass through bitwise."""
    if not 0 <= i < params.n:
        raise IndexError(f"expert index {i} out of range for {params.n} experts")
    idx = pocket_indices(pocket, h1.shape[0])
    ex = params.experts[i]
    gamma = mean_pool_rows(h_g) if geometry_summary is None else geometry_summary
    pre = take_rows(h1, idx) @ ex.u.T + gamma @ ex.b.T
    return scatter_add_rows(h1, idx, gelu(pre) @ ex.v.T)


def aggregation_mlp(x: Tensor, params: GmoeParams) -> Tensor:
    return gelu(x @ params.mlp_w1 + params.mlp_b1) @ params.mlp_w2 + params.mlp_b2


def mix_experts(h1: Tensor, h_g: Tensor, pocket: Sequence[int], params: GmoeParams,
                report: GateReport) -> Tensor:
    """Gate-weighted sum of the selected experts' full L_e × D outputs."""
    gamma = mean_pool_rows(h_g)
    mixed = None
    for i in report.selected:
        term = expert_forward(i, h1, h_g, pocket, params, gamma) * take_cols(report.alpha_tilde, [i])
        mixed = term if mixed is None else mixed + term
    return mixed


def gmoe_forward(h1: Tensor, h_g: Tensor, pocket: Sequence[int],
                 params: GmoeParams) -> tuple[Tensor, GateReport]:
    """H2 (1 × D) = MLP(mean over tokens of the gated expert mixture)."""
    report = route(h1, h_g, pocket, params)
    mixed = mix_experts(h1, h_g, pocket, params, report)
    return aggregation_mlp(mean_pool_rows(mixed), params), report


def balance_loss(reports: Sequence[GateReport], n: int, k: int) -> Tensor:
    """``||mean(alpha_tilde) - 1/n||^2 + ||mean(1[alpha_tilde > 0]) - k/n||^2`` over a batch.

    The usage term is piecewise constant and carries no gradient.
    """
    if not reports:
        raise ValueError("balance_loss needs at least one gate report")
    gates = concat_rows([r.alpha_tilde for r in reports])
    mean_gate = mean_pool_rows(gates)
    usage = (gates.data > 0).mean(axis=0, keepdims=True)
    importance = mean_gate - np.full((1, n), 1.0 / n)
    usage_term = float(((usage - k / n) ** 2).sum())
    return sum_all(importance * importance) + usage_term
