"""Substrate-recognition cross-attention: enzyme residues attend over substrate tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DimensionError, ModelParams, Tensor, layer_norm, softmax_rows


@dataclass
class MrcaParams:
    w_q: Tensor  # D × d_k
    w_k: Tensor
    w_v: Tensor
    ln_gain: Tensor  # 1 × D
    ln_bias: Tensor
    w_o: Tensor | None = None  # d_k × D, only when d_k != D
    post_norm: bool = True

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def init(cls, params: ModelParams, d: int, rng: np.random.Generator, d_k: int | None = None,
             prefix: str = "mrca", post_norm: bool = True) -> MrcaParams:
        d_k = d if d_k is None else d_k
        std = 1.0 / np.sqrt(d)
        w_o = None
        if d_k != d:
            w_o = params.add(f"{prefix}.w_o", rng.normal(0.0, 1.0 / np.sqrt(d_k), (d_k, d)))
        return cls(
            w_q=params.add(f"{prefix}.w_q", rng.normal(0.0, std, (d, d_k))),
            w_k=params.add(f"{prefix}.w_k", rng.normal(0.0, std, (d, d_k))),
            w_v=params.add(f"{prefix}.w_v", rng.normal(0.0, std, (d, d_k))),
            ln_gain=params.add(f"{prefix}.ln_gain", np.ones((1, d))),
            ln_bias=params.add(f"{prefix}.ln_bias", np.zeros((1, d))),
            w_o=w_o,
            post_norm=post_norm,
        )

    @classmethod
    def from_params(cls, params: ModelParams, prefix: str = "mrca", post_norm: bool = True) -> MrcaParams:
        w_o = params[f"{prefix}.w_o"] if f"{prefix}.w_o" in params else None
        return cls(params[f"{prefix}.w_q"], params[f"{prefix}.w_k"], params[f"{prefix}.w_v"],
                   params[f"{prefix}.ln_gain"], params[f"{prefix}.ln_bias"], w_o, post_norm)


def mrca_forward(h_e: Tensor, h_m: Tensor, params: MrcaParams) -> tuple[Tensor, Tensor]:
    """Return the substrate-aware representation H1 (L_e × D) and attention A_em (L_e × L_m).

    ``A_em = softmax((H_e W_Q)(H_m W_K)^T / sqrt(d_k))``, ``Z_em = A_em H_m W_V``
    (mapped back to D when d_k != D) and ``H1 = LN(H_e + Z_em)``. With
    ``post_norm=False`` the enzyme stream is normalized before querying and
    H1 is the plain residual sum.
    """
    if h_e.shape[1] != params.d or h_m.shape[1] != params.d:
        raise DimensionError(
            f"mrca_forward: H_e {h_e.shape} and H_m {h_m.shape} must both have {params.d} columns"
        )
    query_src = h_e if params.post_norm else layer_norm(h_e, params.ln_gain, params.ln_bias)
    scores = (query_src @ params.w_q) @ (h_m @ params.w_k).T
    attn = softmax_rows(scores * (1.0 / np.sqrt(params.d_k)))
    z = attn @ (h_m @ params.w_v)
    if params.w_o is not None:
        z = z @ params.w_o
    if params.post_norm:
        return layer_norm(h_e + z, params.ln_gain, params.ln_bias), attn
    return h_e + z, attn
