"""
End-to-end checks on the default desk stream.

The multi-seed experiments take minutes; they carry the ``slow`` marker so a
quick ``pytest -m "not slow"`` skips them.
"""

from pathlib import Path

import numpy as np
import pytest

from cltestbed import settings
from cltestbed.harness import (
    DEFAULT_MODEL,
    DEFAULT_STREAM,
    ExperimentConfig,
    ExperimentRunner,
    build_stream,
    check_cf_vs_tc,
    check_class_il_ceiling,
    check_generative_isolation,
    check_gradients,
    check_incompatibility,
    check_offdiag_implication,
    check_partition_identity,
    check_replay_fidelity,
    check_slda,
    check_tc_dominance,
    initial_model,
    load_hyperparameter_grid,
)
from cltestbed.models import TrainConfig
from cltestbed.protocol import run_strategy

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = range(5)


@pytest.fixture(scope="module")
def default_stream():
    return build_stream(DEFAULT_STREAM)


@pytest.fixture(scope="module")
def strategy_runs(default_stream):
    def run(name, hyperparams=None):
        return [
            run_strategy(name, default_stream, initial_model(DEFAULT_MODEL, default_stream, seed), hyperparams,
                         TrainConfig(seed=seed))
            for seed in SEEDS
        ]

    runs = {name: run(name) for name in ("none", "ewc", "si", "joint", "labels_trick")}
    runs["replay_oracle"] = run("generative_replay", {"surrogate": "oracle"})
    runs["replay_biased"] = run("generative_replay", {"surrogate": "biased"})
    return runs


@pytest.fixture(scope="module")
def ewc_sweep(default_stream):
    grid = load_hyperparameter_grid(settings.HYPERPARAMS_GRID)["ewc"]
    sweep = {
        lam: [
            run_strategy("ewc", default_stream, initial_model(DEFAULT_MODEL, default_stream, seed), {"lambda": lam},
                         TrainConfig(seed=seed))
            for seed in SEEDS
        ]
        for lam in grid["grid"]
    }
    return sweep, grid["default"]


def test_partition_identity():
    check = check_partition_identity()
    assert check.passed, check.measured


def test_incompatible_quadratics():
    check = check_incompatibility()
    assert check.passed, check.measured


def test_streaming_lda_matches_batch():
    check = check_slda()
    assert check.passed, check.measured


def test_analytic_gradients():
    check = check_gradients()
    assert check.passed, check.measured


def test_generative_classifier_isolation(default_stream):
    check = check_generative_isolation(default_stream)
    assert check.passed, check.measured


@pytest.mark.slow
def test_offdiag_implication(default_stream, strategy_runs):
    check = check_offdiag_implication(default_stream, DEFAULT_MODEL, TrainConfig(), SEEDS, runs=strategy_runs)
    assert check.passed, check.measured


@pytest.mark.slow
def test_offdiag_sabotage_is_caught(default_stream):
    check = check_offdiag_implication(default_stream, DEFAULT_MODEL, TrainConfig(), [0], skip_offdiag=True)
    assert not check.passed


@pytest.mark.slow
def test_regularizers_stay_under_class_il_ceiling(strategy_runs, default_stream):
    check = check_class_il_ceiling(strategy_runs, default_stream.num_tasks)
    assert check.passed, check.measured


@pytest.mark.slow
def test_ewc_cuts_forgetting_but_not_confusion(strategy_runs, ewc_sweep):
    sweep, default = ewc_sweep
    check = check_cf_vs_tc(strategy_runs["none"], sweep, default=default)
    assert check.passed, check.measured


@pytest.mark.slow
def test_replay_tracks_surrogate_quality(strategy_runs):
    check = check_replay_fidelity(strategy_runs)
    assert check.passed, check.measured


@pytest.mark.slow
def test_task_confusion_dominates(strategy_runs, default_stream):
    check = check_tc_dominance(strategy_runs["none"][0], default_stream)
    assert check.passed, check.measured


@pytest.mark.slow
def test_bundled_config_is_reproducible(tmp_path):
    config = ExperimentConfig.load(CONFIGS / "minimal.json")
    first = ExperimentRunner(config, output_dir=tmp_path / "a").run_pipeline().output_dir
    second = ExperimentRunner(config, output_dir=tmp_path / "b").run_pipeline().output_dir
    produced = sorted(p.relative_to(first) for p in first.rglob("*") if p.suffix in (".csv", ".json"))
    assert produced
    for name in produced:
        if name.name == "timings.json":
            continue
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


@pytest.mark.slow
def test_labels_trick_beats_plain_training(strategy_runs):
    paired = [
        (trick.final_class_il, plain.final_class_il)
        for trick, plain in zip(strategy_runs["labels_trick"], strategy_runs["none"])
    ]
    assert [r.seed for r in strategy_runs["labels_trick"]] == [r.seed for r in strategy_runs["none"]]
    gains = np.array([trick - plain for trick, plain in paired])
    assert gains.mean() > 0, paired
