"""Sparsity-sweep experiment: train, calibrate, prune with each method, evaluate, aggregate."""
from __future__ import annotations

import csv
import io
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data_pipeline as dp
from .calibration import calibrate
from .errors import ConfigError, DataError
from .metrics import EvalReport, evaluate
from .nn_core import FIVE_LAYER_HIDDEN, TWO_LAYER_HIDDEN, TrainConfig, init_model, mlp_specs, train
from .pruning import METHODS, prune

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("method", "sparsity", "seed", "ccc_pooled", "ccc_group_mean", "mse", "mse_group_var",
                  "risk_j", "achieved_sparsity", "wall_time_s")
SUMMARY_METRICS = ("ccc_pooled", "ccc_group_mean", "mse", "mse_group_var", "risk_j", "achieved_sparsity")
DEFAULT_SPARSITIES = tuple(round(0.1 * k, 1) for k in range(9))
DEFAULT_SEEDS = tuple(range(15))

# synthetic rows are independent samples, so windowing is the identity
SYNTHETIC_PREPROCESS = dict(window_seconds=1.0, overlap_seconds=0.0, label_shift_seconds=0.0,
                            normalize_arousal=False)


# -- flat key=value configuration ---------------------------------------------

def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def _as_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _ints(text: str) -> list[int]:
    out = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        span = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        if span:
            out.extend(range(int(span[1]), int(span[2]) + 1))
        else:
            out.append(int(part))
    return out


def _coerce(cls, values: dict):
    """Build dataclass ``cls`` from string values, converting by field type."""
    kwargs = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        raw = values[f.name]
        kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        try:
            if kind == "int":
                kwargs[f.name] = int(raw)
            elif kind == "float":
                kwargs[f.name] = float(raw)
            elif kind == "bool":
                kwargs[f.name] = _as_bool(raw) if isinstance(raw, str) else bool(raw)
            else:
                kwargs[f.name] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
    return cls(**kwargs)


def preprocess_config_from_kv(values: dict, synthetic: bool = False) -> dp.PreprocessConfig:
    base = dict(SYNTHETIC_PREPROCESS) if synthetic else {}
    base.update({k: v for k, v in values.items() if k in {f.name for f in fields(dp.PreprocessConfig)}})
    return _coerce(dp.PreprocessConfig, base)


def synthetic_config_from_kv(values: dict) -> dp.SyntheticConfig:
    vals = dict(values)
    if "data_seed" in vals:
        vals["seed"] = vals.pop("data_seed")
    return _coerce(dp.SyntheticConfig, vals)


def train_config_from_kv(values: dict) -> TrainConfig:
    return _coerce(TrainConfig, values)


@dataclass
class ExperimentConfig:
    data_dir: Path | None = None
    synthetic: dp.SyntheticConfig = field(default_factory=dp.SyntheticConfig)
    preprocess: dp.PreprocessConfig = field(default_factory=lambda: dp.PreprocessConfig(**SYNTHETIC_PREPROCESS))
    architecture: str = "two_layer"
    hidden: tuple[int, ...] = ()
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[str, ...] = METHODS
    sparsities: tuple[float, ...] = DEFAULT_SPARSITIES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    lambda_var: float = 1.0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    record_wall_time: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods")
        if not self.sparsities:
            raise ConfigError("sparsities must be nonempty")
        for s in self.sparsities:
            if not 0 <= s < 1:
                raise ConfigError(f"sparsity {s} outside [0, 1)")
        if len(set(self.sparsities)) != len(self.sparsities):
            raise ConfigError("duplicate sparsities")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not (math.isfinite(self.lambda_var) and self.lambda_var >= 0):
            raise ConfigError("lambda_var must be finite and >= 0")
        if self.architecture not in ("two_layer", "five_layer", "custom"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "custom" and not self.hidden:
            raise ConfigError("custom architecture needs hidden=<w1>,<w2>,...")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        if self.architecture == "two_layer":
            return TWO_LAYER_HIDDEN
        if self.architecture == "five_layer":
            return FIVE_LAYER_HIDDEN
        return tuple(self.hidden)

    @property
    def architecture_label(self) -> str:
        if self.architecture == "custom":
            return "custom_" + "x".join(str(h) for h in self.hidden)
        return self.architecture

    @classmethod
    def from_kv(cls, values: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        values = dict(values)
        known = ({f.name for f in fields(cls)} | {f.name for f in fields(dp.SyntheticConfig)}
                 | {f.name for f in fields(dp.PreprocessConfig)} | {f.name for f in fields(TrainConfig)}
                 | {"source", "data_seed"})
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        source = values.get("source", "csv" if "data_dir" in values else "synthetic")
        if source not in ("csv", "synthetic"):
            raise ConfigError(f"source must be csv or synthetic, got {source!r}")
        data_dir = None
        if source == "csv":
            if "data_dir" not in values:
                raise ConfigError("source=csv needs data_dir")
            data_dir = Path(values["data_dir"])
            if base_dir is not None and not data_dir.is_absolute():
                data_dir = base_dir / data_dir
        kw = dict(
            data_dir=data_dir,
            synthetic=synthetic_config_from_kv({k: v for k, v in values.items() if k != "seed"}),
            preprocess=preprocess_config_from_kv(values, synthetic=source == "synthetic"),
            train=train_config_from_kv({k: v for k, v in values.items() if k != "seed"}),
        )
        try:
            if "architecture" in values:
                kw["architecture"] = values["architecture"]
            if "hidden" in values:
                kw["hidden"] = tuple(_ints(values["hidden"]))
            if "methods" in values:
                kw["methods"] = tuple(m.strip() for m in values["methods"].split(",") if m.strip())
            if "sparsities" in values:
                kw["sparsities"] = tuple(_floats(values["sparsities"]))
            if "seeds" in values:
                kw["seeds"] = tuple(_ints(values["seeds"]))
            elif "seed" in values:
                kw["seeds"] = (int(values["seed"]),)
            if "lambda_var" in values:
                kw["lambda_var"] = float(values["lambda_var"])
            if "split" in values:
                ratios = _floats(values["split"])
                if len(ratios) != 3:
                    raise ConfigError("split needs three ratios")
                kw["split"] = tuple(ratios)
            if "record_wall_time" in values:
                kw["record_wall_time"] = _as_bool(values["record_wall_time"])
            if "jobs" in values:
                kw["jobs"] = int(values["jobs"])
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_kv(read_kv(path), base_dir=path.parent)


# -- sweep --------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list[dict]
    timings: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, RESULT_COLUMNS)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def load_data(cfg: ExperimentConfig) -> list[dp.SessionTrace]:
    if cfg.data_dir is not None:
        return dp.load_sessions(cfg.data_dir)
    return dp.generate_synthetic(cfg.synthetic)


def _row(method, s, seed, report: EvalReport, achieved, wall):
    return {
        "method": method, "sparsity": float(s), "seed": int(seed),
        "ccc_pooled": float(report.ccc), "ccc_group_mean": float(report.ccc_group_mean),
        "mse": float(report.mse), "mse_group_var": float(report.mse_group_variance),
        "risk_j": float(report.risk_j), "achieved_sparsity": float(achieved), "wall_time_s": wall,
    }


def train_dense(cfg: ExperimentConfig, split: dp.EnvironmentSplit, seed: int):
    specs = mlp_specs(split.train.features.shape[1], cfg.hidden_widths)
    model = init_model(specs, seed)
    tcfg = replace(cfg.train, seed=seed)
    return train(model, split.train, tcfg)


def run_seed(cfg: ExperimentConfig, sessions, seed: int):
    """All (method, sparsity) rows for one seed plus their wall times."""
    split = dp.prepare(sessions, cfg.preprocess, cfg.split, seed)
    model, _ = train_dense(cfg, split, seed)
    stats = calibrate(model, split.val) if "CP-VR" in cfg.methods else None
    dense = evaluate(model, split.test, cfg.lambda_var)
    rows, timings = [], []
    for method in cfg.methods:
        for s in sorted(cfg.sparsities):
            t0 = time.perf_counter()
            if s == 0:
                report, achieved = dense, 0.0
            else:
                pruned, achieved = prune(model, method, s, stats=stats, lambda_var=cfg.lambda_var)
                report = evaluate(pruned, split.test, cfg.lambda_var)
            wall = time.perf_counter() - t0
            rows.append(_row(method, s, seed, report, achieved, wall if cfg.record_wall_time else 0.0))
            timings.append({"method": method, "sparsity": float(s), "seed": int(seed), "wall_time_s": wall})
    return rows, timings


def _run_seed_job(args):
    return run_seed(*args)


def run_sweep(cfg: ExperimentConfig, sessions=None) -> SweepResult:
    sessions = load_data(cfg) if sessions is None else sessions
    seeds = list(cfg.seeds)
    if cfg.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            parts = list(pool.map(_run_seed_job, [(cfg, sessions, s) for s in seeds]))
    else:
        parts = []
        for s in seeds:
            log.info("seed %d", s)
            parts.append(run_seed(cfg, sessions, s))
    # single ordered sink: (seed, method, sparsity)
    method_rank = {m: i for i, m in enumerate(cfg.methods)}
    key = lambda r: (r["seed"], method_rank[r["method"]], r["sparsity"])  # noqa: E731
    rows = sorted((r for p in parts for r in p[0]), key=key)
    timings = sorted((t for p in parts for t in p[1]), key=key)
    return SweepResult(rows, timings)


# -- aggregation --------------------------------------------------------------

def read_results(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"results file {path} does not exist")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for r in reader:
            row = {c: float(r[c]) for c in RESULT_COLUMNS if c not in ("method", "seed")}
            row.update(method=r["method"], seed=int(r["seed"]))
            rows.append(row)
    return rows


def summarize(results) -> list[dict]:
    """Mean and population std of each metric per (method, sparsity), across seeds."""
    rows = results.rows if isinstance(results, SweepResult) else list(results)
    if not rows:
        raise DataError("no results to summarise")
    buckets: dict[tuple[str, float], list[dict]] = {}
    for r in rows:
        buckets.setdefault((r["method"], float(r["sparsity"])), []).append(r)
    out = []
    for (method, s), group in buckets.items():
        rec = {"method": method, "sparsity": s, "n_seeds": len(group)}
        for m in SUMMARY_METRICS:
            vals = np.array([g[m] for g in group], dtype=np.float64)
            rec[f"{m}_mean"] = float(vals.mean())
            rec[f"{m}_std"] = float(vals.std())
        out.append(rec)
    return out


def summary_columns() -> list[str]:
    cols = ["method", "sparsity", "n_seeds"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    return cols


def emit_plot_data(summary: Sequence[dict], out_dir, architecture: str = "two_layer") -> list[Path]:
    """Write ``<architecture>_<method>.csv`` series of (sparsity, mean_ccc, std_ccc)."""
    if not summary:
        raise DataError("empty summary")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_method: dict[str, list[dict]] = {}
    for r in summary:
        by_method.setdefault(r["method"], []).append(r)
    paths = []
    for method, recs in by_method.items():
        recs = sorted(recs, key=lambda r: r["sparsity"])
        series = [{"sparsity": r["sparsity"], "mean_ccc": r["ccc_pooled_mean"], "std_ccc": r["ccc_pooled_std"]}
                  for r in recs]
        p = out / f"{architecture}_{method}.csv"
        p.write_text(rows_to_csv(series, ("sparsity", "mean_ccc", "std_ccc")))
        paths.append(p)
    return paths


def write_sweep_outputs(result: SweepResult, cfg: ExperimentConfig, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "summary": out / "summary.csv", "timings": out / "timings.csv"}
    paths["results"].write_text(result.to_csv())
    summary = summarize(result)
    paths["summary"].write_text(rows_to_csv(summary, summary_columns()))
    paths["timings"].write_text(rows_to_csv(result.timings, ("method", "sparsity", "seed", "wall_time_s")))
    emit_plot_data(summary, out / "series", cfg.architecture_label)
    return paths
