"""Mini-batch training with decoupled weight decay, and z-space evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..diffcore import ModelParams, Tape, Tensor, backward, recording
from ..esda import KernelConfig, esda_loss
from ..gmoe import balance_loss
from ..objective import LossWeights, nll, squared_error, total_loss
from .config import TrainConfig
from .data import SampleRecord
from .metrics import MetricsReport, regression_metrics
from .model import ErbaModel, SampleOutput

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _decays(name: str, t: Tensor) -> bool:
    # biases, gains and gate offsets are vectors; only full matrices are decayed
    return min(t.shape) > 1


class AdamW:
    """Adaptive moments with weight decay applied directly to the weights."""

    def __init__(self, params: ModelParams, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.trainable()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.trainable()}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.b1**self.step_count
        bc2 = 1.0 - self.b2**self.step_count
        for name, t in self.params.trainable():
            g = t.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and _decays(name, t):
                t.data *= 1.0 - self.lr * self.weight_decay
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class EpochLog:
    epoch: int
    task: float
    balance: float
    esda: float
    total: float
    usage: list[int]
    n_samples: int
    n_batches: int


@dataclass
class TrainResult:
    model: ErbaModel
    log: list[EpochLog] = field(default_factory=list)

    @property
    def params(self) -> ModelParams:
        return self.model.params


def _dropout_seed(seed: int, epoch: int, batch: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, batch, position]).generate_state(1, np.uint64)[0])


def _forward_batch(model: ErbaModel, batch: Sequence[SampleRecord], train: bool, seeds: Sequence[int],
                   workers: int) -> list[SampleOutput]:
    def one(j: int) -> SampleOutput:
        # one tape per sample: reverse traversal order is fixed by sample position
        with recording(Tape(rank=j + 1)):
            return model.forward(batch[j], train=train, dropout_seed=seeds[j])

    if workers <= 1:
        return [one(j) for j in range(len(batch))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(batch))))


def batch_loss(model: ErbaModel, outputs: Sequence[SampleOutput], batch: Sequence[SampleRecord]):
    """Mean task loss plus the weighted balancing and alignment terms for one mini-batch."""
    c = model.config
    task_terms = []
    for out, rec in zip(outputs, batch):
        if c.task_loss == "nll":
            task_terms.append(nll(rec.z, out.mu, out.s))
        else:
            task_terms.append(squared_error(rec.z, out.mu))
    task = task_terms[0]
    for term in task_terms[1:]:
        task = task + term
    task = task * (1.0 / len(task_terms))

    bal: Tensor | float = 0.0
    align: Tensor | float = 0.0
    reports = [o.report for o in outputs if o.report is not None]
    if reports and c.lambda1 > 0:
        bal = balance_loss(reports, c.n_experts, c.top_k)
    if c.use_esda and model.has_staged_losses and c.lambda2 > 0:
        if len(outputs) >= 2:
            align = esda_loss([o.summaries for o in outputs],
                              KernelConfig(c.bandwidth_mode, c.bandwidth))
        else:
            log.warning("batch of %d is too small for the alignment term; skipped", len(outputs))
    total = total_loss(task, bal, align, LossWeights(c.lambda1, c.lambda2))
    return total, task, bal, align


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def train(config: TrainConfig, data: Sequence[SampleRecord], model: ErbaModel | None = None) -> TrainResult:
    if not data:
        raise ValueError("training data is empty")
    model = model or ErbaModel(config)
    c = config
    opt = AdamW(model.params, c.lr, (c.beta1, c.beta2), c.adam_eps, c.weight_decay)
    result = TrainResult(model)
    aligned = c.use_esda and model.has_staged_losses and c.lambda2 > 0
    if aligned and len(data) < 2:
        log.warning("fewer than 2 samples: the alignment term will be skipped")

    for epoch in range(c.epochs):
        order = np.random.default_rng([c.seed, 1_000_003, epoch]).permutation(len(data))
        batches = [order[i:i + c.batch_size] for i in range(0, len(order), c.batch_size)]
        if aligned and len(batches) > 1 and len(batches[-1]) < 2:
            batches.pop()
        sums = {"task": 0.0, "balance": 0.0, "esda": 0.0, "total": 0.0}
        usage = np.zeros(c.n_experts, dtype=np.int64)
        n_seen = 0
        for b, idx in enumerate(batches):
            batch = [data[i] for i in idx]
            seeds = [_dropout_seed(c.seed, epoch, b, j) for j in range(len(batch))]
            try:
                outputs = _forward_batch(model, batch, True, seeds, c.workers)
                with recording(Tape(rank=len(batch) + 1)):
                    total, task, bal, align = batch_loss(model, outputs, batch)
            except FloatingPointError as exc:
                raise TrainingError(
                    f"non-finite value in epoch {epoch}, batch {b}; sample ids "
                    f"{[r.id for r in batch]}: {exc}") from exc
            values = {"task": _value(task), "balance": _value(bal), "esda": _value(align),
                      "total": _value(total)}
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}: {values}; "
                                    f"sample ids {[r.id for r in batch]}")
            model.params.zero_grad()
            backward(total)
            opt.step()
            for key, v in values.items():
                sums[key] += v * len(batch)
            for out in outputs:
                if out.report is not None:
                    usage[out.report.selected] += 1
            n_seen += len(batch)
        entry = EpochLog(epoch, *(sums[k] / n_seen for k in ("task", "balance", "esda", "total")),
                         usage.tolist(), n_seen, len(batches))
        result.log.append(entry)
        log.info("epoch %d task=%.4f balance=%.4f esda=%.4f usage=%s", epoch, entry.task,
                 entry.balance, entry.esda, entry.usage)
    model.params.zero_grad()
    return result


def predict_all(model: ErbaModel, data: Sequence[SampleRecord], workers: int = 1) -> np.ndarray:
    """``(N, 2)`` array of ``(mu, s)`` in eval mode."""
    outs = _forward_batch(model, list(data), False, [0] * len(data), workers)
    return np.array([[o.mu.item(), o.s.item()] for o in outs]).reshape(-1, 2)


def evaluate(model: ErbaModel, data: Sequence[SampleRecord], workers: int = 1) -> MetricsReport:
    if not data:
        raise ValueError("evaluation data is empty")
    preds = predict_all(model, data, workers)
    return regression_metrics(preds[:, 0], [r.z for r in data])
