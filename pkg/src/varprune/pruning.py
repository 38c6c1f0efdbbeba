"""Connection saliencies, variance-regularised scores, and the pruning operators.

Score tensors share the weight layout ``(output_dim, input_dim)``; entry
``[j, i]`` belongs to the connection from input unit ``i`` to unit ``j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .calibration import CalibrationStats, LayerMoments
from .errors import ConfigError, ShapeError
from .nn_core import LayerSpec, MLPModel

SCORE_KINDS = ("phi_mean", "phi_group", "vr_score", "abs_weight")


@dataclass
class ConnectionScore:
    layers: list[np.ndarray]
    kind: str

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ConfigError(f"unknown score kind {self.kind!r}")


@dataclass
class PruneMask:
    layers: list[np.ndarray]

    @property
    def achieved_sparsity(self) -> float:
        return achieved_sparsity(self)

    def zeroed(self) -> list[tuple[int, int, int]]:
        """Sorted ``(layer, row, col)`` of every zero entry."""
        out = []
        for l, m in enumerate(self.layers):
            rows, cols = np.nonzero(m == 0)
            out.extend((l, int(r), int(c)) for r, c in zip(rows, cols))
        return out


@dataclass
class VrConfig:
    lambda_var: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda_var) and self.lambda_var >= 0):
            raise ConfigError(f"lambda_var must be finite and >= 0, got {self.lambda_var}")


def floor_count(fraction: float, n: int) -> int:
    """``floor(fraction * n)`` evaluated on the decimal value of ``fraction``.

    Avoids binary round-off such as ``0.29 * 100 == 28.999999999999996``.
    """
    return math.floor(Fraction(repr(float(fraction))) * n)


def _check_fraction(s: float, name: str = "sparsity") -> None:
    if not 0 <= s < 1:
        raise ConfigError(f"{name} must lie in [0, 1), got {s}")


def _check_aligned(model: MLPModel, layers: Sequence[np.ndarray]) -> None:
    if len(layers) != model.n_layers:
        raise ShapeError(f"expected {model.n_layers} layers of scores, got {len(layers)}")
    for l, (s, w) in enumerate(zip(layers, model.weights)):
        if np.shape(s) != w.shape:
            raise ShapeError(f"layer {l}: score shape {np.shape(s)} != weight shape {w.shape}")


# -- saliencies ---------------------------------------------------------------

def _phi(moments: Sequence[LayerMoments], model: MLPModel) -> list[np.ndarray]:
    if len(moments) != model.n_layers:
        raise ShapeError(f"stats cover {len(moments)} layers, model has {model.n_layers}")
    out = []
    for l, (m, w) in enumerate(zip(moments, model.effective_weights())):
        if m.act_sq.shape != (w.shape[1],) or m.grad_sq.shape != (w.shape[0],):
            raise ShapeError(f"layer {l}: moments do not match weight shape {w.shape}")
        out.append(0.5 * np.outer(m.grad_sq, m.act_sq) * w * w)
    return out


def saliency_phi(stats, model: MLPModel) -> ConnectionScore:
    """Half of E[a^2] * E[g^2] * W^2 using global moments.

    ``stats`` may be a :class:`CalibrationStats` or a per-layer moment list.
    """
    moments = stats.global_ if isinstance(stats, CalibrationStats) else stats
    return ConnectionScore(_phi(moments, model), "phi_mean")


def saliency_phi_group(stats: CalibrationStats, model: MLPModel, g: str) -> ConnectionScore:
    if g not in stats.per_group:
        raise KeyError(f"unknown group {g!r}")
    return ConnectionScore(_phi(stats.per_group[g], model), "phi_group")


def group_saliencies(stats: CalibrationStats, model: MLPModel) -> dict[str, ConnectionScore]:
    return {g: saliency_phi_group(stats, model, g) for g in stats.groups}


def score_vr(group_scores: Mapping[str, ConnectionScore], cfg: VrConfig) -> ConnectionScore:
    """Unweighted mean over groups plus ``lambda_var`` times the population variance."""
    if not group_scores:
        raise ConfigError("need at least one group score")
    keys = sorted(group_scores)
    n_layers = len(group_scores[keys[0]].layers)
    layers = []
    for l in range(n_layers):
        stack = np.stack([np.asarray(group_scores[k].layers[l], dtype=np.float64) for k in keys])
        layers.append(stack.mean(axis=0) + cfg.lambda_var * stack.var(axis=0))
    return ConnectionScore(layers, "vr_score")


def magnitude_scores(model: MLPModel) -> ConnectionScore:
    return ConnectionScore([np.abs(w) for w in model.effective_weights()], "abs_weight")


# -- connection pruning -------------------------------------------------------

def _ranked_entries(scores: Sequence[np.ndarray], masks: Sequence[np.ndarray], layers: Sequence[int]):
    """Active entries of ``layers`` sorted by (score, layer, row, col)."""
    s_all, l_all, r_all, c_all = [], [], [], []
    for l in layers:
        rows, cols = np.nonzero(masks[l] != 0)
        s_all.append(np.asarray(scores[l])[rows, cols])
        l_all.append(np.full(rows.size, l))
        r_all.append(rows)
        c_all.append(cols)
    s = np.concatenate(s_all)
    lay, row, col = np.concatenate(l_all), np.concatenate(r_all), np.concatenate(c_all)
    order = np.lexsort((col, row, lay, s))
    return lay[order], row[order], col[order]


def prune_global_by_score(model: MLPModel, scores: ConnectionScore, s: float) -> PruneMask:
    """Zero the ``floor(s * N_active)`` lowest-scoring active connections across all layers."""
    _check_fraction(s)
    _check_aligned(model, scores.layers)
    masks = [m.copy() for m in model.masks]
    lay, row, col = _ranked_entries(scores.layers, masks, range(model.n_layers))
    k = floor_count(s, lay.size)
    for l, r, c in zip(lay[:k], row[:k], col[:k]):
        masks[l][r, c] = 0.0
    return PruneMask(masks)


def prune_layerwise(model: MLPModel, s_l: Sequence[float], scores: ConnectionScore | None = None) -> PruneMask:
    """Independent per-layer pruning; ranks by ``|W|`` unless ``scores`` is given."""
    s_l = list(s_l)
    if len(s_l) != model.n_layers:
        raise ConfigError(f"need {model.n_layers} per-layer sparsities, got {len(s_l)}")
    for s in s_l:
        _check_fraction(s)
    scores = scores or magnitude_scores(model)
    _check_aligned(model, scores.layers)
    masks = [m.copy() for m in model.masks]
    for l, s in enumerate(s_l):
        _, row, col = _ranked_entries(scores.layers, masks, [l])
        k = floor_count(s, row.size)
        masks[l][row[:k], col[:k]] = 0.0
    return PruneMask(masks)


def achieved_sparsity(mask: PruneMask) -> float:
    total = sum(m.size for m in mask.layers)
    zeros = sum(int(np.count_nonzero(m == 0)) for m in mask.layers)
    return zeros / total if total else 0.0


def apply_mask(model: MLPModel, mask: PruneMask) -> MLPModel:
    return model.with_masks(mask.layers)


# -- neuron pruning -----------------------------------------------------------

def neuron_budget(model: MLPModel, s: float) -> list[int]:
    """Default ``K_l = round((1 - s) * width_l)`` per hidden layer, at least 1."""
    _check_fraction(s)
    return [max(1, math.floor((1.0 - s) * spec.output_dim + 0.5)) for spec in model.layers[:-1]]


def select_neurons(model: MLPModel, K: Sequence[int]) -> list[np.ndarray]:
    """Indices (ascending) of the retained neurons in each hidden layer."""
    K = list(K)
    hidden = model.layers[:-1]
    if len(K) != len(hidden):
        raise ConfigError(f"need {len(hidden)} neuron budgets, got {len(K)}")
    kept = []
    for l, (k, spec) in enumerate(zip(K, hidden)):
        if not 1 <= int(k) <= spec.output_dim:
            raise ConfigError(f"layer {l}: budget {k} outside [1, {spec.output_dim}]")
        w = model.weights[l] * model.masks[l]
        norms = np.sqrt(np.sum(w * w, axis=1))
        order = np.lexsort((np.arange(norms.size), -norms))
        kept.append(np.sort(order[: int(k)]))
    return kept


def prune_neurons_incoming_norm(model: MLPModel, K: Sequence[int]) -> MLPModel:
    """Rebuild a smaller network keeping the top-``K_l`` hidden units by incoming L2 norm."""
    kept = select_neurons(model, K)
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    masks = [m.copy() for m in model.masks]
    for l, idx in enumerate(kept):
        weights[l], masks[l], biases[l] = weights[l][idx], masks[l][idx], biases[l][idx]
        weights[l + 1], masks[l + 1] = weights[l + 1][:, idx], masks[l + 1][:, idx]
    specs = [LayerSpec(w.shape[1], w.shape[0], spec.activation) for w, spec in zip(weights, model.layers)]
    return MLPModel(specs, weights, biases, masks)


def neuron_zero_mask(model: MLPModel, K: Sequence[int]) -> PruneMask:
    """Mask that disconnects dropped units in place (rows and outgoing columns)."""
    kept = select_neurons(model, K)
    masks = [m.copy() for m in model.masks]
    for l, idx in enumerate(kept):
        drop = np.setdiff1d(np.arange(masks[l].shape[0]), idx)
        masks[l][drop, :] = 0.0
        masks[l + 1][:, drop] = 0.0
    return PruneMask(masks)


def parameter_sparsity(original: MLPModel, reduced: MLPModel) -> float:
    """Fraction of the original weight entries absent or zero in ``reduced``."""
    remaining = sum(int(np.count_nonzero(m)) for m in reduced.masks)
    return 1.0 - remaining / original.n_weights()


def export_mask(mask: PruneMask) -> str:
    lines = ["layer,row,col"]
    lines.extend(f"{l},{r},{c}" for l, r, c in mask.zeroed())
    return "\n".join(lines) + "\n"


# -- method dispatch ----------------------------------------------------------

METHODS = ("CP-VR", "CP-G", "CP-L", "NP-IN")


def prune(model: MLPModel, method: str, s: float, stats: CalibrationStats | None = None,
          lambda_var: float = 1.0, per_layer: Sequence[float] | None = None,
          neurons: Sequence[int] | None = None):
    """Apply one named method. Returns ``(pruned_model, achieved_sparsity)``."""
    if method == "CP-VR":
        if stats is None:
            raise ConfigError("CP-VR needs calibration statistics")
        scores = score_vr(group_saliencies(stats, model), VrConfig(lambda_var))
        mask = prune_global_by_score(model, scores, s)
    elif method == "CP-G":
        mask = prune_global_by_score(model, magnitude_scores(model), s)
    elif method == "CP-L":
        mask = prune_layerwise(model, per_layer if per_layer is not None else [s] * model.n_layers)
    elif method == "NP-IN":
        _check_fraction(s)
        reduced = prune_neurons_incoming_norm(model, neurons if neurons is not None else neuron_budget(model, s))
        return reduced, parameter_sparsity(model, reduced)
    else:
        raise ConfigError(f"unknown pruning method {method!r}; choose from {', '.join(METHODS)}")
    return apply_mask(model, mask), mask.achieved_sparsity
