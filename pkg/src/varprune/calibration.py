"""One-pass estimation of activation and gradient second moments, globally and per group."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, DataError, ShapeError
from .nn_core import MLPModel, backward, forward

log = logging.getLogger(__name__)


@dataclass
class LayerMoments:
    act_sq: np.ndarray  # E[a_i^2], length input_dim
    grad_sq: np.ndarray  # E[g_j^2], length output_dim
    sample_count: int


@dataclass
class CalibrationStats:
    global_: list[LayerMoments]
    per_group: dict[str, list[LayerMoments]]

    @property
    def groups(self) -> list[str]:
        return sorted(self.per_group)


def _moment_sums(model: MLPModel, x: np.ndarray, y: np.ndarray):
    """Per-layer column sums of a^2 and (dl/dz)^2 with l the per-sample squared error."""
    trace = forward(model, x)
    grads = backward(model, trace, y, reduction="sum")
    act = [np.sum(a * a, axis=0) for a in trace.activations]
    grad = [np.sum(g * g, axis=0) for g in grads.dz]
    return act, grad


def _to_moments(act, grad, n) -> list[LayerMoments]:
    return [LayerMoments(a / n, g / n, n) for a, g in zip(act, grad)]


def calibrate(model: MLPModel, calib_set) -> CalibrationStats:
    """Single forward/backward pass over ``calib_set`` (features, targets, group_ids).

    The model is not modified.
    """
    x = np.asarray(calib_set.features, dtype=np.float64)
    y = np.asarray(calib_set.targets, dtype=np.float64).reshape(-1)
    groups = np.asarray(calib_set.group_ids, dtype=str).reshape(-1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise CalibrationError("calibration set is empty")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"calibration features have width {x.shape[1]}, model expects {model.input_dim}")
    if y.shape[0] != x.shape[0] or groups.shape[0] != x.shape[0]:
        raise DataError("calibration features, targets and groups differ in length")

    per_group = {}
    for g in sorted(set(groups.tolist())):
        rows = np.flatnonzero(groups == g)
        if rows.size == 0:
            raise CalibrationError(f"group {g!r} has no samples")
        if rows.size < 2:
            log.warning("group %r has a single calibration sample", g)
        act, grad = _moment_sums(model, x[rows], y[rows])
        per_group[g] = _to_moments(act, grad, int(rows.size))

    act, grad = _moment_sums(model, x, y)
    return CalibrationStats(_to_moments(act, grad, int(x.shape[0])), per_group)


def merge_group_moments(stats: CalibrationStats) -> list[LayerMoments]:
    """Sample-count-weighted mean of the per-group moments, groups in sorted order."""
    if not stats.per_group:
        raise CalibrationError("no groups to merge")
    n_layers = len(next(iter(stats.per_group.values())))
    merged = []
    for l in range(n_layers):
        total = 0
        act = grad = 0.0
        for g in stats.groups:
            m = stats.per_group[g][l]
            act = act + m.act_sq * m.sample_count
            grad = grad + m.grad_sq * m.sample_count
            total += m.sample_count
        merged.append(LayerMoments(act / total, grad / total, total))
    return merged


def _layers_to_list(layers):
    return [{"act_sq": m.act_sq.tolist(), "grad_sq": m.grad_sq.tolist(), "sample_count": m.sample_count}
            for m in layers]


def _layers_from_list(items):
    return [LayerMoments(np.array(d["act_sq"], dtype=np.float64), np.array(d["grad_sq"], dtype=np.float64),
                         int(d["sample_count"])) for d in items]


def stats_to_dict(stats: CalibrationStats) -> dict:
    return {
        "format": "varprune.calibration/1",
        "global": _layers_to_list(stats.global_),
        "per_group": {g: _layers_to_list(stats.per_group[g]) for g in stats.groups},
    }


def stats_from_dict(doc: dict) -> CalibrationStats:
    try:
        return CalibrationStats(_layers_from_list(doc["global"]),
                                {g: _layers_from_list(v) for g, v in doc["per_group"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed calibration file: {exc}") from exc


def save_stats(stats: CalibrationStats, path) -> None:
    Path(path).write_text(json.dumps(stats_to_dict(stats)))


def load_stats(path) -> CalibrationStats:
    try:
        return stats_from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read calibration file {path}: {exc}") from exc
