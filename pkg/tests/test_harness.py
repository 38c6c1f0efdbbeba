import csv
import json
import math

import pytest

from varprune import data_pipeline as dp
from varprune.cli import main
from varprune.errors import ConfigError, DataError
from varprune.harness import (
    RESULT_COLUMNS,
    ExperimentConfig,
    emit_plot_data,
    read_kv,
    read_results,
    run_sweep,
    summarize,
    train_dense,
)
from varprune.metrics import evaluate
from varprune.nn_core import TrainConfig

SMALL = dict(
    synthetic=dp.SyntheticConfig(n_participants=6, samples_per_participant=40, n_stable_features=3,
                                 n_spurious_features=3),
    architecture="custom",
    hidden=(8,),
    train=TrainConfig(epochs=3, batch_size=32),
    sparsities=(0.0, 0.3, 0.6),
    seeds=(0, 1),
)

CONFIG_TEXT = """\
# small synthetic sweep
n_participants = 6
samples_per_participant = 40
n_stable_features = 3
n_spurious_features = 3
architecture = custom
hidden = 8
epochs = 3
batch_size = 32
methods = CP-VR,CP-G,CP-L,NP-IN
sparsities = 0.0,0.4
seeds = 0-1
lambda_var = 1
"""


@pytest.fixture(scope="module")
def small_result():
    cfg = ExperimentConfig(**SMALL)
    return cfg, run_sweep(cfg)


class TestSweep:
    def test_grid_complete_and_ordered(self, small_result):
        cfg, result = small_result
        assert len(result.rows) == 4 * 3 * 2
        keys = [(r["seed"], cfg.methods.index(r["method"]), r["sparsity"]) for r in result.rows]
        assert keys == sorted(keys)
        assert len(set(keys)) == len(keys)

    def test_dense_rows_shared(self, small_result):
        _, result = small_result
        for seed in (0, 1):
            dense = [r for r in result.rows if r["seed"] == seed and r["sparsity"] == 0.0]
            metrics = {tuple(r[c] for c in RESULT_COLUMNS[3:9]) for r in dense}
            assert len(dense) == 4 and len(metrics) == 1

    def test_dense_row_matches_standalone(self, small_result):
        cfg, result = small_result
        sessions = dp.generate_synthetic(cfg.synthetic)
        split = dp.prepare(sessions, cfg.preprocess, cfg.split, 0)
        model, _ = train_dense(cfg, split, 0)
        rep = evaluate(model, split.test, cfg.lambda_var)
        row = next(r for r in result.rows if r["seed"] == 0 and r["sparsity"] == 0.0)
        assert row["ccc_pooled"] == rep.ccc and row["mse"] == rep.mse

    def test_connection_sparsity_exact(self, small_result):
        cfg, result = small_result
        sessions = dp.generate_synthetic(cfg.synthetic)
        for r in result.rows:
            if r["method"] not in ("CP-VR", "CP-G", "CP-L"):
                continue
            width = dp.prepare(sessions, cfg.preprocess, cfg.split, r["seed"]).train.features.shape[1]
            n = width * 8 + 8
            if r["method"] == "CP-L":
                expected = (math.floor(r["sparsity"] * width * 8) + math.floor(r["sparsity"] * 8)) / n
            else:
                expected = math.floor(r["sparsity"] * n) / n
            assert r["achieved_sparsity"] == expected

    def test_seed_isolation(self, small_result):
        cfg, result = small_result
        from dataclasses import replace

        again = run_sweep(replace(cfg, seeds=(1,)))
        assert again.rows == [r for r in result.rows if r["seed"] == 1]

    def test_wall_time_off_by_default(self, small_result):
        _, result = small_result
        assert all(r["wall_time_s"] == 0.0 for r in result.rows)
        assert all(t["wall_time_s"] >= 0.0 for t in result.timings)

    def test_parallel_matches_serial(self, small_result):
        cfg, result = small_result
        from dataclasses import replace

        assert run_sweep(replace(cfg, jobs=2)).to_csv() == result.to_csv()


class TestSummarize:
    def _rows(self, values):
        return [dict(method="CP-G", sparsity=0.5, seed=i, ccc_pooled=v, ccc_group_mean=v, mse=0.1,
                     mse_group_var=0.0, risk_j=0.1, achieved_sparsity=0.5, wall_time_s=0.0)
                for i, v in enumerate(values)]

    def test_single_seed_zero_std(self):
        (row,) = summarize(self._rows([0.3]))
        assert all(row[k] == 0.0 for k in row if k.endswith("_std"))

    def test_two_seeds(self):
        (row,) = summarize(self._rows([0.4, 0.6]))
        assert row["ccc_pooled_mean"] == pytest.approx(0.5)
        assert row["ccc_pooled_std"] == pytest.approx(0.1)

    def test_grid_size(self):
        rows = [dict(r, method=m, sparsity=s / 10, seed=seed)
                for m in ("CP-VR", "CP-G", "CP-L", "NP-IN") for s in range(9) for seed in range(15)
                for r in self._rows([0.5])]
        assert len(rows) == 540
        assert len(summarize(rows)) == 36

    def test_empty(self):
        with pytest.raises(DataError):
            summarize([])


class TestPlotData:
    def test_series(self, tmp_path):
        summary = [{"method": "CP-VR", "sparsity": s / 10, "ccc_pooled_mean": 0.5, "ccc_pooled_std": 0.0}
                   for s in reversed(range(9))]
        (path,) = emit_plot_data(summary, tmp_path, "two_layer")
        assert path.name == "two_layer_CP-VR.csv"
        rows = list(csv.DictReader(path.open()))
        assert len(rows) == 9
        xs = [float(r["sparsity"]) for r in rows]
        assert all(a < b for a, b in zip(xs, xs[1:]))

    def test_empty(self, tmp_path):
        with pytest.raises(DataError):
            emit_plot_data([], tmp_path)


class TestConfig:
    def test_parse(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text(CONFIG_TEXT)
        cfg = ExperimentConfig.from_file(p)
        assert cfg.seeds == (0, 1)
        assert cfg.hidden_widths == (8,)
        assert cfg.synthetic.n_participants == 6
        assert cfg.train.epochs == 3
        assert cfg.preprocess.window_seconds == 1.0

    def test_default_grid(self):
        cfg = ExperimentConfig()
        assert len(cfg.methods) * len(cfg.sparsities) * len(cfg.seeds) == 540
        assert cfg.sparsities[0] == 0.0 and cfg.sparsities[-1] == 0.8

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(methods=("CP-Z",))

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("colour = blue\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(p)

    def test_csv_source_defaults_to_3s_windows(self, tmp_path):
        cfg = ExperimentConfig.from_kv({"data_dir": "sessions"}, base_dir=tmp_path)
        assert cfg.data_dir == tmp_path / "sessions"
        assert cfg.preprocess.window_seconds == 3.0 and cfg.preprocess.label_shift_seconds == 1.0

    def test_read_kv_rejects_garbage(self, tmp_path):
        p = tmp_path / "x.cfg"
        p.write_text("novalue\n")
        with pytest.raises(ConfigError):
            read_kv(p)


class TestCli:
    def test_pipeline_end_to_end(self, tmp_path, capsys):
        gen = tmp_path / "gen.cfg"
        gen.write_text("n_participants = 5\nsamples_per_participant = 30\nn_stable_features = 2\n"
                       "n_spurious_features = 2\n")
        assert main(["generate", "--config", str(gen), "--out", str(tmp_path / "raw"), "--seed", "1"]) == 0
        assert len(list((tmp_path / "raw").glob("*.csv"))) == 5
        pre = tmp_path / "pre.cfg"
        pre.write_text("variance_threshold = 0.0\n")
        assert main(["preprocess", "--config", str(pre), "--data", str(tmp_path / "raw"),
                     "--out", str(tmp_path / "prep"), "--seed", "0"]) == 0
        train_cfg = tmp_path / "train.cfg"
        train_cfg.write_text("architecture = custom\nhidden = 6\nepochs = 2\nbatch_size = 16\n")
        assert main(["train", "--config", str(train_cfg), "--data", str(tmp_path / "prep"),
                     "--out", str(tmp_path / "model")]) == 0
        model = tmp_path / "model" / "model.json"
        assert main(["calibrate", "--model", str(model), "--data", str(tmp_path / "prep"),
                     "--out", str(tmp_path / "calib")]) == 0
        for method in ("CP-VR", "CP-G", "CP-L", "NP-IN"):
            out = tmp_path / f"pruned_{method}"
            args = ["prune", "--model", str(model), "--method", method, "--sparsity", "0.5", "--out", str(out)]
            if method == "CP-VR":
                args += ["--calibration", str(tmp_path / "calib" / "calibration.json")]
            assert main(args) == 0
            assert (out / "mask.csv").read_text().startswith("layer,row,col\n")
            assert main(["evaluate", "--model", str(out / "model.json"), "--data", str(tmp_path / "prep"),
                         "--out", str(out)]) == 0
            report = json.loads((out / "report.json").read_text())
            assert set(report) >= {"mse", "ccc", "per_group_mse", "risk_j", "mse_group_variance"}

    def test_sweep_and_summarize(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(CONFIG_TEXT)
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        header = (tmp_path / "a" / "results.csv").read_text().splitlines()[0]
        assert header == ",".join(RESULT_COLUMNS)
        assert len(read_results(tmp_path / "a" / "results.csv")) == 4 * 2 * 2
        assert sorted(p.name for p in (tmp_path / "a" / "series").iterdir()) == [
            "custom_8_CP-G.csv", "custom_8_CP-L.csv", "custom_8_CP-VR.csv", "custom_8_NP-IN.csv"]
        assert main(["summarize", "--results", str(tmp_path / "a" / "results.csv"), "--out", str(tmp_path / "s")]) == 0
        assert (tmp_path / "s" / "summary.csv").read_text() == (tmp_path / "a" / "summary.csv").read_text()

    def test_exit_code_config(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("methods = CP-G,CP-Q\n")
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_exit_code_data(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(f"data_dir = {tmp_path / 'missing'}\n")
        assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3

    def test_exit_code_shape(self, tmp_path, rng):
        from varprune.nn_core import init_model, mlp_specs, save_model

        save_model(init_model(mlp_specs(7, [3]), 0), tmp_path / "m.json")
        d = dp.WindowedDataset(rng.uniform(size=(5, 4)), rng.uniform(size=5), ["a"] * 5, list("wxyz"))
        dp.write_dataset(d, tmp_path / "test.csv")
        assert main(["evaluate", "--model", str(tmp_path / "m.json"), "--data", str(tmp_path / "test.csv")]) == 4
