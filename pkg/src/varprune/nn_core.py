"""Dense ReLU regression network with masked weights, MSE loss and Adam.

Everything runs in float64 numpy. Weight matrices are stored as
``(output_dim, input_dim)`` so that ``z = a @ (W * mask).T + b``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

ACTIVATIONS = ("relu", "linear")

TWO_LAYER_HIDDEN = (256,)
FIVE_LAYER_HIDDEN = (768, 512, 384, 192)


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


def mlp_specs(input_dim: int, hidden: Sequence[int]) -> list[LayerSpec]:
    """ReLU hidden layers of the given widths followed by a scalar linear head."""
    dims = [int(input_dim), *(int(h) for h in hidden)]
    specs = [LayerSpec(a, b, "relu") for a, b in zip(dims[:-1], dims[1:])]
    specs.append(LayerSpec(dims[-1], 1, "linear"))
    return specs


def validate_specs(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ConfigError("model needs at least one layer")
    for l, (prev, nxt) in enumerate(zip(specs[:-1], specs[1:])):
        if prev.output_dim != nxt.input_dim:
            raise ConfigError(
                f"layer {l} outputs {prev.output_dim} but layer {l + 1} expects {nxt.input_dim}"
            )
    last = specs[-1]
    if last.output_dim != 1 or last.activation != "linear":
        raise ConfigError("final layer must be a scalar linear output")


@dataclass
class MLPModel:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    masks: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    def effective_weights(self) -> list[np.ndarray]:
        return [w * m for w, m in zip(self.weights, self.masks)]

    def n_weights(self) -> int:
        return sum(w.size for w in self.weights)

    def copy(self) -> "MLPModel":
        return MLPModel(
            layers=list(self.layers),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            masks=[m.copy() for m in self.masks],
        )

    def with_masks(self, masks: Sequence[np.ndarray]) -> "MLPModel":
        """Copy of the model with ``masks`` applied (pruned weights set to 0)."""
        if len(masks) != self.n_layers:
            raise ShapeError(f"expected {self.n_layers} masks, got {len(masks)}")
        out = self.copy()
        for l, m in enumerate(masks):
            m = np.asarray(m, dtype=np.float64)
            if m.shape != out.weights[l].shape:
                raise ShapeError(f"mask {l} has shape {m.shape}, weight is {out.weights[l].shape}")
            out.masks[l] = m.copy()
            out.weights[l] = out.weights[l] * m
        return out


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")


@dataclass
class AdamState:
    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, model: MLPModel) -> "AdamState":
        return cls(
            m_weights=[np.zeros_like(w) for w in model.weights],
            v_weights=[np.zeros_like(w) for w in model.weights],
            m_biases=[np.zeros_like(b) for b in model.biases],
            v_biases=[np.zeros_like(b) for b in model.biases],
        )


@dataclass
class ForwardTrace:
    activations: list[np.ndarray]  # input to layer l, (batch, input_dim)
    preactivations: list[np.ndarray]  # z of layer l, (batch, output_dim)
    predictions: np.ndarray  # (batch,)


@dataclass
class BackwardTrace:
    loss: float
    dz: list[np.ndarray]  # dL/dz per layer, (batch, output_dim)
    grad_weights: list[np.ndarray]
    grad_biases: list[np.ndarray] = field(default_factory=list)


def init_model(specs: Sequence[LayerSpec], seed: int) -> MLPModel:
    """He-normal weights, zero biases, all-ones masks."""
    specs = list(specs)
    validate_specs(specs)
    rng = np.random.default_rng(seed)
    weights, biases, masks = [], [], []
    for spec in specs:
        std = math.sqrt(2.0 / spec.input_dim)
        weights.append(rng.normal(0.0, std, size=(spec.output_dim, spec.input_dim)))
        biases.append(np.zeros(spec.output_dim))
        masks.append(np.ones((spec.output_dim, spec.input_dim)))
    return MLPModel(specs, weights, biases, masks)


def forward(model: MLPModel, batch) -> ForwardTrace:
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ShapeError(f"batch shape {a.shape} incompatible with input_dim {model.input_dim}")
    activations, preacts = [], []
    for spec, w, b, m in zip(model.layers, model.weights, model.biases, model.masks):
        activations.append(a)
        z = a @ (w * m).T + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if spec.activation == "relu" else z
    return ForwardTrace(activations, preacts, preacts[-1][:, 0])


def predict(model: MLPModel, batch) -> np.ndarray:
    return forward(model, batch).predictions


def backward(model: MLPModel, trace: ForwardTrace, targets, reduction: str = "mean") -> BackwardTrace:
    """Gradients of the squared-error loss.

    With ``reduction="mean"`` the loss is the batch MSE. With ``"sum"`` it is the
    sum of per-sample squared errors, so row ``n`` of every ``dz`` entry is the
    gradient of sample ``n``'s own loss.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    pred = trace.predictions
    if t.shape[0] != pred.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for a batch of {pred.shape[0]}")
    if len(trace.activations) != model.n_layers:
        raise ShapeError("trace does not match model depth")
    for l, (a, w) in enumerate(zip(trace.activations, model.weights)):
        if a.shape[1] != w.shape[1]:
            raise ShapeError(f"trace activation {l} has width {a.shape[1]}, layer expects {w.shape[1]}")

    resid = pred - t
    if reduction == "mean":
        scale = 1.0 / resid.shape[0]
        loss = float(np.mean(resid**2))
    elif reduction == "sum":
        scale = 1.0
        loss = float(np.sum(resid**2))
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")

    n = model.n_layers
    dz = [None] * n
    gw = [None] * n
    gb = [None] * n
    delta = (2.0 * scale * resid)[:, None]
    for l in range(n - 1, -1, -1):
        dz[l] = delta
        gw[l] = delta.T @ trace.activations[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            upstream = delta @ (model.weights[l] * model.masks[l])
            delta = upstream * (trace.preactivations[l - 1] > 0)
    return BackwardTrace(loss, dz, gw, gb)


def adam_step(model: MLPModel, grads: BackwardTrace, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update in place. Returns ``(model, state)``.

    Gradients at masked entries are zeroed first and the mask is re-applied
    afterwards, so pruned weights stay exactly zero.
    """
    if len(state.m_weights) != model.n_layers:
        raise ShapeError("optimizer state does not match model")
    state.step += 1
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.epsilon
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for l in range(model.n_layers):
        mask = model.masks[l]
        pairs = (
            (model.weights, grads.grad_weights[l] * mask, state.m_weights, state.v_weights),
            (model.biases, grads.grad_biases[l], state.m_biases, state.v_biases),
        )
        for params, g, ms, vs in pairs:
            if g.shape != params[l].shape or ms[l].shape != params[l].shape:
                raise ShapeError(f"layer {l}: gradient/state shape mismatch")
            ms[l] = b1 * ms[l] + (1.0 - b1) * g
            vs[l] = b2 * vs[l] + (1.0 - b2) * g * g
            params[l] = params[l] - lr * (ms[l] / c1) / (np.sqrt(vs[l] / c2) + eps)
        model.weights[l] = model.weights[l] * mask
    return model, state


def train(model: MLPModel, train_set, config: TrainConfig):
    """Mini-batch Adam on the batch-mean squared error.

    ``train_set`` needs ``features`` and ``targets``. Returns the trained model
    (a copy) and the per-epoch mean training loss.
    """
    x = np.asarray(train_set.features, dtype=np.float64)
    y = np.asarray(train_set.targets, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("training set is empty")
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"features have width {x.shape[1]}, model expects {model.input_dim}")
    if y.shape[0] != x.shape[0]:
        raise ShapeError("features and targets disagree in length")

    model = model.copy()
    state = AdamState.zeros_like(model)
    rng = np.random.default_rng(config.seed)
    n, bs = x.shape[0], int(config.batch_size)
    history = []
    for epoch in range(int(config.epochs)):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            trace = forward(model, x[idx])
            grads = backward(model, trace, y[idx])
            total += grads.loss * idx.size
            adam_step(model, grads, state, config)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise NumericError(f"training diverged at epoch {epoch}")
        history.append(epoch_loss)
    return model, history


# -- checkpoints --------------------------------------------------------------

def model_to_dict(model: MLPModel) -> dict:
    return {
        "format": "varprune.model/1",
        "layers": [
            {"input_dim": s.input_dim, "output_dim": s.output_dim, "activation": s.activation}
            for s in model.layers
        ],
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "masks": [m.astype(int).tolist() for m in model.masks],
    }


def model_from_dict(doc: dict) -> MLPModel:
    try:
        specs = [LayerSpec(int(d["input_dim"]), int(d["output_dim"]), d["activation"]) for d in doc["layers"]]
        validate_specs(specs)
        weights = [np.array(w, dtype=np.float64).reshape(s.output_dim, s.input_dim) for w, s in zip(doc["weights"], specs)]
        biases = [np.array(b, dtype=np.float64).reshape(s.output_dim) for b, s in zip(doc["biases"], specs)]
        masks = [np.array(m, dtype=np.float64).reshape(s.output_dim, s.input_dim) for m, s in zip(doc["masks"], specs)]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise DataError(f"malformed model checkpoint: {exc}") from exc
    if len(weights) != len(specs) or len(biases) != len(specs) or len(masks) != len(specs):
        raise DataError("checkpoint arrays do not match the layer list")
    for m in masks:
        if not np.all((m == 0) | (m == 1)):
            raise DataError("mask entries must be 0 or 1")
    return MLPModel(specs, weights, biases, masks)


def save_model(model: MLPModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> MLPModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    return model_from_dict(doc)
