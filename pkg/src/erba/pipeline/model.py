"""Full model assembly: encoders, the two conditioning stages and the head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backbone import (
    SMILES_CHARS,
    GeometryFeaturizerParams,
    GeometryInput,
    SurrogateEncoderParams,
    adapters_from_params,
    encode_enzyme,
    encode_geometry,
    encode_substrate,
    init_adapters,
)
from ..diffcore import ModelParams, Tensor, concat_cols, gelu, mean_pool_rows
from ..esda import StageSummaries, stage_summaries
from ..gmoe import GateReport, GmoeParams, aggregation_mlp, gmoe_forward, mix_experts, route
from ..mrca import MrcaParams, mrca_forward
from ..objective import HeadParams, head_forward
from .config import TrainConfig
from .data import SampleRecord

# independent init streams so ablations sharing a seed share every common weight
_STREAMS = {"backbone": 0, "lora": 1, "substrate": 2, "geometry": 3, "mrca": 4, "gmoe": 5,
            "head": 6, "concat": 7}


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[stream]])


@dataclass
class SampleOutput:
    mu: Tensor
    s: Tensor
    summaries: StageSummaries | None
    report: GateReport | None


class ErbaModel:
    def __init__(self, config: TrainConfig, params: ModelParams | None = None):
        self.config = config
        c = config
        fresh = params is None
        self.params = ModelParams() if fresh else params
        p = self.params
        if fresh:
            self.encoder = SurrogateEncoderParams.init(p, c.d, c.n_layers, _rng(c.seed, "backbone"),
                                                       c.max_length)
            self.adapters = (init_adapters(p, c.n_layers, c.d, _rng(c.seed, "lora"), c.lora_rank,
                                           c.lora_scale, c.lora_dropout) if c.use_lora else None)
            self.substrate_table = p.add("substrate.embed", _rng(c.seed, "substrate").normal(
                0.0, 1.0, (len(SMILES_CHARS), c.d)))
            self.geometry = GeometryFeaturizerParams.init(p, c.d, _rng(c.seed, "geometry"))
        else:
            self.encoder = SurrogateEncoderParams.from_params(p, c.n_layers, c.max_length)
            self.adapters = (adapters_from_params(p, c.n_layers, c.lora_rank, c.lora_scale,
                                                  c.lora_dropout) if c.use_lora else None)
            self.substrate_table = p["substrate.embed"]
            self.geometry = GeometryFeaturizerParams.from_params(p)

        self.mrca = self.gmoe = None
        self.concat = None
        if c.fusion_mode == "concat_mlp":
            if fresh:
                r = _rng(c.seed, "concat")
                self.concat = (
                    p.add("concat.w1", r.normal(0.0, 1.0 / np.sqrt(3 * c.d), (3 * c.d, c.d))),
                    p.add("concat.b1", np.zeros((1, c.d))),
                    p.add("concat.w2", r.normal(0.0, 1.0 / np.sqrt(c.d), (c.d, c.d))),
                    p.add("concat.b2", np.zeros((1, c.d))),
                )
            else:
                self.concat = tuple(p[f"concat.{k}"] for k in ("w1", "b1", "w2", "b2"))
        else:
            if c.use_mrca or c.fusion_mode == "geometry_first":
                self.mrca = (MrcaParams.init(p, c.d, _rng(c.seed, "mrca"), c.key_dim,
                                             post_norm=c.mrca_post_norm) if fresh
                             else MrcaParams.from_params(p, post_norm=c.mrca_post_norm))
            # the aggregation MLP lives with the G-MoE block and is needed even without experts
            self.gmoe = (GmoeParams.init(p, c.d, _rng(c.seed, "gmoe"), c.n_experts, c.top_k,
                                         c.expert_rank, routing=c.gmoe_routing) if fresh
                         else GmoeParams.from_params(p, c.n_experts, c.top_k, routing=c.gmoe_routing))
        self.head = HeadParams.init(p, c.d, _rng(c.seed, "head")) if fresh else HeadParams.from_params(p)
        self._frozen_cache: dict[str, Tensor] = {}

    @property
    def has_staged_losses(self) -> bool:
        return self.config.fusion_mode != "concat_mlp"

    @property
    def uses_experts(self) -> bool:
        c = self.config
        return c.fusion_mode == "geometry_first" or (c.fusion_mode == "staged" and c.use_gmoe)

    def enzyme_embedding(self, rec: SampleRecord, train: bool, dropout_seed: int) -> Tensor:
        if self.adapters is None:
            # a fully frozen encoder is a fixed function of the sequence
            cached = self._frozen_cache.get(rec.sequence)
            if cached is None:
                cached = encode_enzyme(rec.enzyme_tokens, self.encoder)
                self._frozen_cache[rec.sequence] = cached
            return cached
        return encode_enzyme(rec.enzyme_tokens, self.encoder, self.adapters, train, dropout_seed)

    def forward(self, rec: SampleRecord, train: bool = False, dropout_seed: int = 0) -> SampleOutput:
        c = self.config
        h_e = self.enzyme_embedding(rec, train, dropout_seed)
        h_m = encode_substrate(rec.substrate_tokens, self.substrate_table)
        h_g = encode_geometry(GeometryInput(rec.coords, rec.pocket_residues), self.geometry)

        if c.fusion_mode == "concat_mlp":
            w1, b1, w2, b2 = self.concat
            x = concat_cols([mean_pool_rows(h_e), mean_pool_rows(h_m), mean_pool_rows(h_g)])
            h2 = gelu(x @ w1 + b1) @ w2 + b2
            mu, s = head_forward(h2, self.head)
            return SampleOutput(mu, s, None, None)

        report = None
        if c.fusion_mode == "geometry_first":
            report = route(h_e, h_g, rec.pocket, self.gmoe)
            h1 = mix_experts(h_e, h_g, rec.pocket, self.gmoe, report)
            h_late, _ = mrca_forward(h1, h_m, self.mrca)
            h2 = aggregation_mlp(mean_pool_rows(h_late), self.gmoe)
        else:
            h1 = mrca_forward(h_e, h_m, self.mrca)[0] if c.use_mrca else h_e
            if c.use_gmoe:
                h2, report = gmoe_forward(h1, h_g, rec.pocket, self.gmoe)
            else:
                h2 = aggregation_mlp(mean_pool_rows(h1), self.gmoe)
        mu, s = head_forward(h2, self.head)
        return SampleOutput(mu, s, stage_summaries(h_e, h1, h2), report)

    def predict_record(self, rec: SampleRecord) -> tuple[float, float]:
        out = self.forward(rec, train=False)
        return out.mu.item(), out.s.item()
