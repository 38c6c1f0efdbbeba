"""Regression metrics: MSE, concordance correlation, per-group errors and the variance-penalised risk."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


def _pair(pred, target, min_len=1):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size < min_len:
        raise ShapeError(f"need at least {min_len} values, got {p.size}")
    return p, t


def mse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def ccc(pred, target) -> float:
    """Lin's concordance correlation coefficient with population moments.

    Two equal constants score 1; any other zero denominator scores 0.
    """
    p, t = _pair(pred, target, min_len=2)
    mp, mt = p.mean(), t.mean()
    vp = np.mean((p - mp) ** 2)
    vt = np.mean((t - mt) ** 2)
    cov = np.mean((p - mp) * (t - mt))
    denom = vp + vt + (mp - mt) ** 2
    if denom == 0:
        return 1.0 if (vp == 0 and vt == 0 and mp == mt) else 0.0
    return float(np.clip(2.0 * cov / denom, -1.0, 1.0))


def group_mse(pred, target, groups) -> dict[str, float]:
    p, t = _pair(pred, target)
    g = np.asarray(groups, dtype=str).reshape(-1)
    if g.shape != p.shape:
        raise ShapeError("groups not aligned with predictions")
    err = (p - t) ** 2
    return {k: float(err[g == k].mean()) for k in sorted(set(g.tolist()))}


def group_ccc(pred, target, groups) -> dict[str, float]:
    """Per-group CCC; groups with fewer than two samples are skipped."""
    p, t = _pair(pred, target)
    g = np.asarray(groups, dtype=str).reshape(-1)
    out = {}
    for k in sorted(set(g.tolist())):
        sel = g == k
        if sel.sum() >= 2:
            out[k] = ccc(p[sel], t[sel])
    return out


def group_variance(values) -> float:
    """Population variance, one entry per group."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ConfigError("need at least one group")
    return float(v.var())


def risk_j(group_mses, global_mse: float, lambda_var: float) -> float:
    if lambda_var < 0:
        raise ConfigError(f"lambda_var must be >= 0, got {lambda_var}")
    values = list(group_mses.values()) if isinstance(group_mses, dict) else list(group_mses)
    return float(global_mse + lambda_var * group_variance(values))


@dataclass
class EvalReport:
    mse: float
    ccc: float
    per_group_mse: dict[str, float]
    mse_group_variance: float
    risk_j: float
    n_samples: int
    lambda_var: float
    per_group_ccc: dict[str, float] = field(default_factory=dict)

    @property
    def ccc_group_mean(self) -> float:
        return float(np.mean(list(self.per_group_ccc.values()))) if self.per_group_ccc else math.nan

    def to_json(self) -> str:
        doc = asdict(self)
        doc["ccc_group_mean"] = self.ccc_group_mean
        return json.dumps(doc, indent=2, sort_keys=True)


def evaluate_predictions(pred, target, groups, lambda_var: float = 1.0) -> EvalReport:
    m = mse(pred, target)
    per = group_mse(pred, target, groups)
    var = group_variance(per.values())
    return EvalReport(
        mse=m,
        ccc=ccc(pred, target),
        per_group_mse=per,
        mse_group_variance=var,
        risk_j=risk_j(per, m, lambda_var),
        n_samples=int(np.size(pred)),
        lambda_var=float(lambda_var),
        per_group_ccc=group_ccc(pred, target, groups),
    )


def evaluate(model, dataset, lambda_var: float = 1.0) -> EvalReport:
    from .nn_core import predict

    return evaluate_predictions(predict(model, dataset.features), dataset.targets, dataset.group_ids, lambda_var)
