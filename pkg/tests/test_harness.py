import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from cltestbed.cli import main
from cltestbed.data import desk_blob_spec, make_blob_stream, render_blob_images, write_idx
from cltestbed.exceptions import ConfigError, UnknownStrategyError
from cltestbed.harness import (
    ExperimentConfig,
    ExperimentRunner,
    StrategySpec,
    _execute_run,
    build_stream,
    check_cf_vs_tc,
    check_gradients,
    check_generative_isolation,
    check_incompatibility,
    check_offdiag_implication,
    check_partition_identity,
    check_slda,
    grid_search,
    inspect_record,
    load_hyperparameter_grid,
    results_table,
    run_config,
    run_offdiag_implication,
)
from cltestbed.models import TrainConfig
from cltestbed.settings import MNIST_FILES
from cltestbed.strategies import STRATEGY_DEFAULTS

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY_STREAM = {
    "kind": "blob", "num_tasks": 2, "classes_per_task": 2, "feature_dim": 4, "radius": 6.0, "scale": 0.5,
    "train_per_class": 20, "test_per_class": 5, "seed": 1,
}


def tiny_config(**overrides):
    raw = {
        "schema_version": 1,
        "stream": dict(TINY_STREAM),
        "model": {"arch": "mlp", "hidden_width": 8},
        "train": {"learning_rate": 0.1, "iterations": 20, "batch_size": 16},
        "strategies": [{"name": "none"}, {"name": "generative_classifier"}],
        "repeats": 2,
    }
    raw.update(overrides)
    return raw


@pytest.fixture
def config_file(tmp_path):
    def write(**overrides):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(tiny_config(**overrides)))
        return path
    return write


class TestExperimentConfig:
    def test_defaults_fill_the_stream(self):
        config = ExperimentConfig.from_dict({"schema_version": 1, "stream": {"kind": "blob"},
                                             "strategies": ["none"]})
        assert config.stream["num_tasks"] == 5
        assert config.stream["feature_dim"] == 16
        assert config.strategies[0].display == "none"

    def test_labels_allow_one_strategy_twice(self):
        config = ExperimentConfig.from_dict(tiny_config(strategies=[
            {"name": "generative_replay", "label": "replay_oracle", "surrogate": "oracle"},
            {"name": "generative_replay", "label": "replay_biased", "surrogate": "biased"},
        ]))
        assert [s.display for s in config.strategies] == ["replay_oracle", "replay_biased"]
        assert config.strategies[1].hyperparams == {"surrogate": "biased"}

    @pytest.mark.parametrize(
        "overrides",
        [
            {"schema_version": 2},
            {"checkpoint_every": 3},
            {"repeats": 0},
            {"workers": 0},
            {"strategies": []},
            {"strategies": [{"name": "none"}, {"name": "none"}]},
            {"strategies": [{"label": "anonymous"}]},
            {"strategies": [{"name": "ewc", "gamma": 1.0}]},
            {"emit": {"plots": True}},
            {"train": {"momentum": 0.9}},
            {"train": {"iterations": 0}},
            {"stream": {**TINY_STREAM, "kind": "csv"}},
            {"stream": {**TINY_STREAM, "num_tasks": 0}},
        ],
    )
    def test_invalid_configs(self, overrides):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(tiny_config(**overrides))

    def test_unknown_strategy(self):
        with pytest.raises(UnknownStrategyError):
            ExperimentConfig.from_dict(tiny_config(strategies=[{"name": "icarl"}]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "absent.json")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(path)


class TestBuildStream:
    def test_blob_section(self):
        stream = build_stream(TINY_STREAM)
        assert stream.layout == (2, 2)
        assert stream.source is not None

    def test_idx_section(self, tmp_path):
        blobs = make_blob_stream(desk_blob_spec(num_classes=4, train_per_class=12, test_per_class=4), 2, 2)
        for split, samples in (("train", blobs.train_set), ("test", blobs.test_set)):
            write_idx(tmp_path / MNIST_FILES[f"{split}_images"], render_blob_images(samples))
            write_idx(tmp_path / MNIST_FILES[f"{split}_labels"], samples.labels)
        stream = build_stream({"kind": "idx", "dir": str(tmp_path), "num_tasks": 2, "classes_per_task": 2,
                               "subsample_per_class": 10})
        assert stream.feature_dim == 64
        assert len(stream.train_set) == 40
        assert len(stream.test_set) == 16
        assert stream.train_set.features.max() <= 1.0

    def test_idx_without_directory(self, monkeypatch):
        monkeypatch.delenv("CLTESTBED_MNIST_DIR", raising=False)
        with pytest.raises(ConfigError):
            build_stream({"kind": "idx", "num_tasks": 5, "classes_per_task": 2})


class TestExperimentRunner:
    def test_writes_every_output(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config())
        result = ExperimentRunner(config, output_dir=tmp_path / "out").run_pipeline()
        out = result.output_dir

        assert len(result.records) == 4
        assert list(result.table.summary["strategy"]) == ["none", "generative_classifier"]
        assert list(result.table.summary["repeats"]) == [2, 2]
        for name in ("results.csv", "runs.csv", "results.json", "timings.json"):
            assert (out / name).exists()
        assert (out / "runs" / "none_seed1.json").exists()
        assert (out / "runs" / "none_seed0.ckpt").exists()
        assert (out / "heatmaps" / "none_seed0_restricted_pair.csv").exists()
        assert (out / "heatmaps" / "none_seed0_partition.csv").exists()
        assert (out / "curves" / "generative_classifier_seed1.csv").exists()
        assert (out / "q_matrix" / "generative_classifier_seed0.csv").exists()
        assert not (out / "q_matrix" / "none_seed0.csv").exists()

    def test_reruns_are_byte_identical(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config())
        first = ExperimentRunner(config, output_dir=tmp_path / "a").run_pipeline().output_dir
        second = ExperimentRunner(config, output_dir=tmp_path / "b").run_pipeline().output_dir
        for name in ("results.csv", "results.json", "runs/none_seed0.json", "curves/none_seed1.csv",
                     "heatmaps/none_seed0_partition.csv"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_worker_count_does_not_change_results(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config())
        serial = ExperimentRunner(config, output_dir=tmp_path / "serial", workers=1).run_pipeline().output_dir
        pooled = ExperimentRunner(config, output_dir=tmp_path / "pooled", workers=2).run_pipeline().output_dir
        assert (serial / "results.json").read_bytes() == (pooled / "results.json").read_bytes()

    def test_emit_flags(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config(emit={"matrices": False, "curves": False}))
        out = ExperimentRunner(config, output_dir=tmp_path).run_pipeline().output_dir
        assert not any((out / "heatmaps").iterdir())
        assert not any((out / "curves").iterdir())

    def test_seed_override(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config(repeats=1))
        result = ExperimentRunner(config, output_dir=tmp_path, base_seed=7).run_pipeline()
        assert {r.seed for r in result.records} == {7}


class TestResultsTable:
    def test_sem_over_repeats(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config(strategies=["none"], repeats=3))
        records = ExperimentRunner(config, output_dir=tmp_path).execute(build_stream(config.stream))
        table = results_table(records)
        values = np.array([r.final_class_il for r in records])
        row = table.summary.iloc[0]
        assert row["final_class_il_mean"] == pytest.approx(values.mean())
        assert row["final_class_il_sem"] == pytest.approx(values.std(ddof=1) / np.sqrt(3))

    def test_single_repeat_has_zero_sem(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config(strategies=["generative_classifier"], repeats=1))
        records = ExperimentRunner(config, output_dir=tmp_path).execute(build_stream(config.stream))
        assert results_table(records).summary.iloc[0]["total_cf_sem"] == 0.0

    def test_runs_report_the_offdiag_implication_against_joint(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config(strategies=["none", "joint"], repeats=2))
        records = ExperimentRunner(config, output_dir=tmp_path).execute(build_stream(config.stream))
        runs = results_table(records).runs
        joint = {r.seed: r for r in records if r.strategy == "joint"}
        for record, value in zip(records, runs["offdiag_implication"]):
            assert value == run_offdiag_implication(record, joint[record.seed])
        assert all(runs.loc[runs["strategy"] == "joint", "offdiag_implication"])

    def test_no_joint_run_leaves_the_implication_empty(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config(strategies=["none"], repeats=1))
        records = ExperimentRunner(config, output_dir=tmp_path).execute(build_stream(config.stream))
        assert results_table(records).runs["offdiag_implication"].tolist() == [None]


class TestRunConfig:
    def test_success(self, tmp_path, config_file):
        assert run_config(config_file(), out=tmp_path / "out") == 0

    def test_diverged_run_is_recorded(self, tmp_path, config_file):
        path = config_file(strategies=["none"], repeats=1, train={"learning_rate": 1e300, "iterations": 10})
        assert run_config(path, out=tmp_path / "out") == 1
        record = json.loads((tmp_path / "out" / "runs" / "none_seed0.json").read_text())
        assert record["status"] == "failed"
        assert record["timeline"] == []


class TestInspect:
    def test_renders_timeline(self, tmp_path):
        config = ExperimentConfig.from_dict(tiny_config(strategies=["none"], repeats=1))
        out = ExperimentRunner(config, output_dir=tmp_path).run_pipeline().output_dir
        text = inspect_record(out / "runs" / "none_seed0.json")
        assert text.startswith("none seed=0 status=ok")
        assert "class-IL" in text
        assert "total_cf=" in text


class TestGridSearch:
    def test_picks_a_grid_value(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"schema_version": 1, "ewc": {"param": "lambda", "grid": [0.1, 10.0]}}))
        config = ExperimentConfig.from_dict(tiny_config(strategies=["ewc"], repeats=1))
        result = grid_search(config, "ewc", grid)
        assert result.parameter == "lambda"
        assert len(result.scores) == 2
        assert result.chosen == result.grid[int(np.argmax(result.scores))]

    def test_unknown_parameter(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"schema_version": 1, "ewc": {"param": "gamma", "grid": [1.0]}}))
        with pytest.raises(ConfigError):
            load_hyperparameter_grid(grid)

    def test_default_must_be_a_grid_value(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"schema_version": 1, "ewc": {"param": "lambda", "grid": [0.1, 10.0],
                                                                 "default": 5.0}}))
        with pytest.raises(ConfigError, match="not in its grid"):
            load_hyperparameter_grid(grid)

    def test_bundled_grid_defaults_match_strategy_defaults(self):
        grids = load_hyperparameter_grid(CONFIGS / "hyperparams.json")
        for name, entry in grids.items():
            assert entry["default"] in entry["grid"]
            assert entry["default"] == STRATEGY_DEFAULTS[name][entry["param"]]

    def test_ties_go_to_the_default(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"schema_version": 1, "slda": {"param": "shrinkage", "grid": [0.01, 0.02],
                                                                  "default": 0.02}}))
        result = grid_search(ExperimentConfig.from_dict(tiny_config(repeats=1)), "slda", grid)
        assert result.scores[0] == result.scores[1]
        assert result.chosen == 0.02
        assert result.default == 0.02

    def test_strategy_without_grid(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"schema_version": 1}))
        with pytest.raises(ConfigError):
            grid_search(ExperimentConfig.from_dict(tiny_config()), "si", grid)


class TestTheoryChecks:
    def test_partition_identity(self):
        check = check_partition_identity(n_pairs=6)
        assert check.passed, check.measured

    def test_incompatibility(self):
        assert check_incompatibility(n_pairs=20).passed

    def test_slda_oracle(self):
        assert check_slda(n_streams=2).passed

    def test_gradients(self):
        check = check_gradients(n_points=3)
        assert check.passed, check.measured

    def test_generative_isolation(self, small_stream):
        check = check_generative_isolation(small_stream)
        assert check.passed, check.measured

    def test_offdiag_sabotage_fails(self, small_stream):
        model = {"arch": "linear"}
        check = check_offdiag_implication(small_stream, model, TrainConfig(0.1, 50, 16), [0], skip_offdiag=True)
        assert not check.passed
        assert check.measured["offdiag_entries_evaluated"] == 0
        assert check.measured["offdiag_entries_expected"] == 24

    def test_offdiag_implication_covers_every_seed_and_run(self, small_stream):
        model, train = {"arch": "linear"}, TrainConfig(0.1, 50, 16)
        runs = {name: [_execute_run((StrategySpec(name), small_stream, model, train, s)) for s in (0, 1)]
                for name in ("none", "joint")}
        check = check_offdiag_implication(small_stream, model, train, [0, 1], runs=runs)
        assert [s["seed"] for s in check.measured["seeds"]] == [0, 1]
        assert check.measured["offdiag_entries_evaluated"] == check.measured["offdiag_entries_expected"] == 24
        assert check.measured["runs_checked"] == 2
        assert check.passed == (not check.measured["violations"])

    def test_cf_vs_tc_picks_the_best_lambda_within_the_tc_budget(self):
        none = [SimpleNamespace(total_cf=1.0, tc_score=10.0)] * 2
        sweep = {
            0.1: [SimpleNamespace(total_cf=0.8, tc_score=10.2)] * 2,
            1.0: [SimpleNamespace(total_cf=0.3, tc_score=10.5)] * 2,
            100.0: [SimpleNamespace(total_cf=0.0, tc_score=14.0)] * 2,
        }
        check = check_cf_vs_tc(none, sweep, default=0.1)
        assert check.measured["chosen_lambda"] == 1.0
        assert check.measured["cf_reduction"] == pytest.approx(0.7)
        assert check.passed

    def test_cf_vs_tc_falls_back_to_the_default(self):
        none = [SimpleNamespace(total_cf=1.0, tc_score=10.0)]
        sweep = {1.0: [SimpleNamespace(total_cf=0.9, tc_score=12.0)],
                 5.0: [SimpleNamespace(total_cf=0.1, tc_score=15.0)]}
        check = check_cf_vs_tc(none, sweep, default=5.0)
        assert check.measured["chosen_lambda"] == 5.0
        assert not check.passed


class TestCli:
    def test_run(self, tmp_path, config_file):
        assert main(["run", str(config_file()), "--out", str(tmp_path / "out"), "--seed", "3"]) == 0
        assert (tmp_path / "out" / "runs" / "none_seed4.json").exists()

    def test_invalid_config_exits_2(self, tmp_path, config_file):
        assert main(["run", str(config_file(repeats=0)), "--out", str(tmp_path)]) == 2

    def test_inspect_missing_record_exits_2(self, tmp_path):
        assert main(["inspect", str(tmp_path / "nope.json")]) == 2

    def test_grid_writes_choice(self, tmp_path, config_file):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"schema_version": 1, "si": {"param": "lambda", "grid": [1.0]}}))
        path = config_file(strategies=["si"], repeats=1)
        assert main(["grid", str(path), "si", "--grid", str(grid), "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "grid_si.json").read_text())["chosen"] == 1.0

    def test_verify_without_ewc_grid_exits_2(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"schema_version": 1, "si": {"param": "lambda", "grid": [1.0]}}))
        assert main(["verify", "--grid", str(grid)]) == 2
