"""Regression metrics on log10-transformed targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    r2: float | None
    pcc: float | None
    rmse: float
    mae: float
    n: int
    error: str | None = None

    def as_lines(self) -> str:
        def fmt(v):
            return "nan" if v is None else repr(float(v))

        lines = [f"r2={fmt(self.r2)}", f"pcc={fmt(self.pcc)}", f"rmse={fmt(self.rmse)}",
                 f"mae={fmt(self.mae)}", f"n={self.n}"]
        if self.error:
            lines.append(f"error={self.error}")
        return "\n".join(lines)


def regression_metrics(pred, target) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("predictions and targets must be non-empty and equally long")
    resid = target - pred
    rmse = float(np.sqrt(np.mean(resid**2)))
    mae = float(np.mean(np.abs(resid)))
    tc = target - target.mean()
    ss_tot = float(tc @ tc)
    if ss_tot == 0.0:
        return MetricsReport(None, None, rmse, mae, pred.size, "zero-variance targets")
    r2 = 1.0 - float(resid @ resid) / ss_tot
    pc = pred - pred.mean()
    ss_pred = float(pc @ pc)
    if ss_pred == 0.0:
        return MetricsReport(r2, None, rmse, mae, pred.size, "zero-variance predictions")
    pcc = float(np.clip((pc @ tc) / np.sqrt(ss_pred * ss_tot), -1.0, 1.0))
    return MetricsReport(r2, pcc, rmse, mae, pred.size)
