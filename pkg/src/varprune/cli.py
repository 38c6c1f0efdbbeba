"""Command-line entry point: ``varprune <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data_pipeline as dp
from . import harness
from .calibration import calibrate, load_stats, save_stats
from .errors import ConfigError, VarpruneError
from .metrics import evaluate
from .nn_core import init_model, load_model, mlp_specs, save_model, train
from .pruning import METHODS, export_mask, neuron_zero_mask, prune, PruneMask

log = logging.getLogger("varprune")


def _kv(path):
    return harness.read_kv(path) if path else {}


def _out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args):
    values = _kv(args.config)
    if args.seed is not None:
        values["data_seed"] = str(args.seed)
    cfg = harness.synthetic_config_from_kv(values)
    paths = dp.write_sessions(dp.generate_synthetic(cfg), _out(args.out))
    print(f"wrote {len(paths)} session files to {args.out}")


def cmd_preprocess(args):
    values = _kv(args.config)
    cfg = harness.preprocess_config_from_kv(values)
    ratios = tuple(harness._floats(values["split"])) if "split" in values else (0.6, 0.2, 0.2)
    seed = args.seed if args.seed is not None else int(values.get("seed", 0))
    sessions = dp.load_sessions(args.data)
    split, tf = dp.preprocess_split(dp.split_by_participant(sessions, ratios, seed, cfg), cfg)
    out = _out(args.out)
    for name in ("train", "val", "test"):
        dp.write_dataset(getattr(split, name), out / f"{name}.csv")
    (out / "transform.json").write_text(json.dumps(tf.to_dict()))
    print(f"train={len(split.train)} val={len(split.val)} test={len(split.test)} "
          f"features={split.train.features.shape[1]}")


def _hidden(values, architecture=None):
    arch = architecture or values.get("architecture", "two_layer")
    return harness.ExperimentConfig(architecture=arch,
                                    hidden=tuple(harness._ints(values.get("hidden", "")))).hidden_widths


def cmd_train(args):
    values = _kv(args.config)
    data = dp.read_dataset(Path(args.data) / "train.csv" if Path(args.data).is_dir() else args.data)
    tcfg = harness.train_config_from_kv(values)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    model = init_model(mlp_specs(data.features.shape[1], _hidden(values, args.architecture)), tcfg.seed)
    model, history = train(model, data, tcfg)
    out = _out(args.out)
    save_model(model, out / "model.json")
    (out / "loss_history.json").write_text(json.dumps(history))
    print(f"final training loss {history[-1]!r}")


def _dataset_arg(path, default_name):
    p = Path(path)
    return dp.read_dataset(p / default_name if p.is_dir() else p)


def cmd_calibrate(args):
    model = load_model(args.model)
    stats = calibrate(model, _dataset_arg(args.data, "val.csv"))
    out = _out(args.out)
    save_stats(stats, out / "calibration.json")
    print(f"calibrated on {stats.global_[0].sample_count} samples, {len(stats.per_group)} groups")


def cmd_prune(args):
    model = load_model(args.model)
    stats = None
    if args.method == "CP-VR":
        if args.calibration:
            stats = load_stats(args.calibration)
        elif args.data:
            stats = calibrate(model, _dataset_arg(args.data, "val.csv"))
        else:
            raise ConfigError("CP-VR needs --calibration or --data")
    pruned, achieved = prune(model, args.method, args.sparsity, stats=stats, lambda_var=args.lambda_var)
    out = _out(args.out)
    save_model(pruned, out / "model.json")
    if args.method == "NP-IN":
        mask = neuron_zero_mask(model, [spec.output_dim for spec in pruned.layers[:-1]])
    else:
        mask = PruneMask(pruned.masks)
    (out / "mask.csv").write_text(export_mask(mask))
    print(f"achieved sparsity {achieved!r}")


def cmd_evaluate(args):
    model = load_model(args.model)
    report = evaluate(model, _dataset_arg(args.data, "test.csv"), args.lambda_var)
    text = report.to_json()
    if args.out:
        (_out(args.out) / "report.json").write_text(text)
    print(text)


def cmd_sweep(args):
    cfg = harness.ExperimentConfig.from_file(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    result = harness.run_sweep(cfg)
    paths = harness.write_sweep_outputs(result, cfg, _out(args.out))
    print(f"{len(result.rows)} rows -> {paths['results']}")


def cmd_summarize(args):
    rows = harness.read_results(args.results)
    summary = harness.summarize(rows)
    out = _out(args.out)
    (out / "summary.csv").write_text(harness.rows_to_csv(summary, harness.summary_columns()))
    harness.emit_plot_data(summary, out / "series", args.architecture or "two_layer")
    print(f"{len(summary)} summary rows -> {out / 'summary.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, needs_out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value file")
        p.add_argument("--out", required=needs_out, help="output directory")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    add("generate", cmd_generate, "write synthetic session CSVs")
    p = add("preprocess", cmd_preprocess, "window, split, normalise and filter session CSVs")
    p.add_argument("--data", required=True, help="session CSV file or directory")
    p = add("train", cmd_train, "train a dense model on a preprocessed train.csv")
    p.add_argument("--data", required=True, help="preprocessed directory or train.csv")
    p.add_argument("--architecture", choices=("two_layer", "five_layer", "custom"))
    p = add("calibrate", cmd_calibrate, "collect activation/gradient moments")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="preprocessed directory or val.csv")
    p = add("prune", cmd_prune, "prune a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--calibration", help="calibration.json (CP-VR)")
    p.add_argument("--data", help="preprocessed directory or val.csv to calibrate on (CP-VR)")
    p.add_argument("--lambda-var", type=float, default=1.0)
    p = add("evaluate", cmd_evaluate, "evaluate a model on a preprocessed test.csv", needs_out=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="preprocessed directory or test.csv")
    p.add_argument("--lambda-var", type=float, default=1.0)
    p = add("sweep", cmd_sweep, "run the full method x sparsity x seed grid")
    p.add_argument("--jobs", type=int)
    p = add("summarize", cmd_summarize, "aggregate a results.csv across seeds")
    p.add_argument("--results", required=True)
    p.add_argument("--architecture")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except VarpruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
