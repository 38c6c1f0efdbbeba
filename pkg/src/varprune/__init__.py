"""Variance-regularised connection pruning for small MLP regressors."""

from .calibration import CalibrationStats, LayerMoments, calibrate, merge_group_moments
from .data_pipeline import (
    EnvironmentSplit,
    PreprocessConfig,
    SessionTrace,
    SyntheticConfig,
    WindowedDataset,
    generate_synthetic,
    load_sessions,
    prepare,
)
from .errors import ConfigError, DataError, NumericError, ShapeError
from .harness import ExperimentConfig, run_sweep, summarize
from .metrics import EvalReport, ccc, evaluate, group_mse, mse, risk_j
from .nn_core import LayerSpec, MLPModel, TrainConfig, backward, forward, init_model, mlp_specs, train
from .pruning import (
    ConnectionScore,
    PruneMask,
    VrConfig,
    achieved_sparsity,
    prune,
    prune_global_by_score,
    prune_layerwise,
    prune_neurons_incoming_norm,
    saliency_phi,
    saliency_phi_group,
    score_vr,
)

__version__ = "0.1.0"
