"""Finite-difference gradient audit of the full model on a micro batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..backbone import SMILES_CHARS
from ..diffcore import GradCheckReport, ModelParams, Tensor, grad_check
from ..esda import KernelConfig, esda_bandwidths, esda_loss
from ..gmoe import balance_loss
from ..objective import LossWeights, nll, squared_error, total_loss
from .config import TrainConfig
from .data import SampleRecord
from .model import ErbaModel
from .synth import ENZYME_ALPHABET

# parameter-name prefix -> reported module
MODULE_PREFIXES = {"mrca": "mrca.", "gmoe": "gmoe.", "head": "head.", "lora": "lora.",
                   "geometry": "geometry."}
# row-gather tables: each row's gradient is a copy of an upstream row gradient
LOOKUP_TABLES = ("substrate.embed", "geometry.residue_embed")
THRESHOLD = 1e-4


@dataclass
class ModuleReport:
    module: str
    worst: GradCheckReport | None

    @property
    def max_rel_error(self) -> float:
        return 0.0 if self.worst is None else self.worst.max_rel_error

    def line(self) -> str:
        if self.worst is None:
            return f"{self.module}: no trainable parameters"
        w = self.worst
        return f"{self.module}: max_rel_error={w.max_rel_error:.3e} param={w.name} index={w.worst_index}"


def micro_config(**overrides) -> TrainConfig:
    base = dict(d=8, d_k=8, n_experts=4, top_k=2, expert_rank=2, n_layers=2, max_length=8,
                batch_size=4)
    base.update(overrides)
    return TrainConfig.from_mapping(base)


def micro_batch(seed: int, n: int = 4, le: int = 6, lm: int = 4, lg: int = 3) -> list[SampleRecord]:
    rng = np.random.default_rng([seed, 77])
    out = []
    for i in range(n):
        seq = "".join(rng.choice(list(ENZYME_ALPHABET), size=le))
        smi = "".join(rng.choice(list(SMILES_CHARS), size=lm))
        pocket = tuple(int(p) for p in np.sort(rng.choice(le, size=lg, replace=False)))
        coords = rng.normal(0.0, 3.0, (lg, 3))
        out.append(SampleRecord(f"g{i}", seq, smi, pocket, coords, "kcat",
                                float(10.0 ** rng.normal())))
    return out


def _randomize_zero_inits(params: ModelParams, rng: np.random.Generator) -> None:
    # zero-initialized adapters would hide every path that runs through them
    for name, t in params.trainable():
        if not t.data.any() or name.endswith((".up", ".v")):
            t.data[...] = rng.normal(0.0, 0.3, t.shape)


def _covering_batch(model: ErbaModel, tries: int = 64) -> list[SampleRecord]:
    """A micro batch in which every expert is selected at least once.

    An expert nobody selects has an exactly zero gradient, and the relative
    error of a zero against finite-difference roundoff is meaningless.
    """
    for attempt in range(tries):
        batch = micro_batch(model.config.seed * 1000 + attempt)
        used = set()
        for r in batch:
            used.update(model.forward(r, train=True).report.selected)
        if len(used) == model.config.n_experts:
            return batch
    raise RuntimeError("no micro batch routes to every expert")


class _MicroLoss:
    def __init__(self, model: ErbaModel, batch: list[SampleRecord], esda_only: bool = False):
        self.model = model
        self.batch = batch
        self.esda_only = esda_only
        c = model.config
        self.kernel = KernelConfig(c.bandwidth_mode, c.bandwidth)
        # freeze the data-dependent bandwidths at the base point
        outs = self._outputs()
        self.sigmas = esda_bandwidths([o.summaries for o in outs], self.kernel)

    def _outputs(self):
        return [self.model.forward(r, train=True, dropout_seed=1000 + j)
                for j, r in enumerate(self.batch)]

    def __call__(self, params: ModelParams) -> Tensor:
        c = self.model.config
        outs = self._outputs()
        align = esda_loss([o.summaries for o in outs], self.kernel, self.sigmas)
        if self.esda_only:
            return align
        terms = [nll(r.z, o.mu, o.s) if c.task_loss == "nll" else squared_error(r.z, o.mu)
                 for o, r in zip(outs, self.batch)]
        task = terms[0]
        for t in terms[1:]:
            task = task + t
        task = task * (1.0 / len(terms))
        bal = balance_loss([o.report for o in outs], c.n_experts, c.top_k)
        return total_loss(task, bal, align, LossWeights(c.lambda1, c.lambda2))


def run_gradcheck(config: TrainConfig, h: float = 1e-5) -> list[ModuleReport]:
    """Worst relative error per module, plus an ``esda`` entry for the alignment term alone."""
    if config.fusion_mode != "staged" or not (config.use_mrca and config.use_gmoe):
        raise ValueError("gradcheck needs the full staged model")
    model = ErbaModel(config)
    _randomize_zero_inits(model.params, np.random.default_rng([config.seed, 99]))
    batch = _covering_batch(model)

    checked = [n for n, _ in model.params.trainable() if n not in LOOKUP_TABLES]
    full = grad_check(_MicroLoss(model, batch), model.params, h=h, names=checked)
    upstream = [n for n in checked if n.startswith(("mrca.", "gmoe.", "geometry."))]
    aligned = grad_check(_MicroLoss(model, batch, esda_only=True), model.params, h=h, names=upstream)

    reports = []
    for module, prefix in MODULE_PREFIXES.items():
        group = [r for r in full if r.name.startswith(prefix)]
        reports.append(ModuleReport(module, max(group, key=lambda r: r.max_rel_error, default=None)))
    reports.append(ModuleReport("esda", max(aligned, key=lambda r: r.max_rel_error, default=None)))
    return reports
