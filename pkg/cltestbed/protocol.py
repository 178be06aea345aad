"""
Sequential class-incremental protocol.

``run_strategy`` trains a strategy task by task, snapshots the model after
every task and returns a :class:`RunRecord` with the accuracy timeline,
loss-matrix block reports and the CF records derived from them.
"""

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .analysis import BlockReport, CFRecord, LossMatrix, block_report, cf_record, pairwise_matrix, tc_score, total_cf
from .data import SampleSet, Task, TaskStream
from .exceptions import ConfigError, TrainingDivergedError
from .generative import VARIANCE_FLOOR, GaussianClassModel, SLDAState, q_matrix
from .models import DiscriminativeModel, TrainConfig, sgd_train, stable_argmax
from .strategies import (
    GENERATIVE_STRATEGIES,
    EWCState,
    ReplayState,
    SIState,
    StepInfo,
    distillation_objective,
    ewc_penalty,
    fisher_diagonal,
    generative_replay_step,
    labels_trick_objective,
    resolve_hyperparams,
    si_penalty,
    si_update,
    within_task_loss,
)

logger = logging.getLogger(__name__)


@dataclass
class TaskSnapshot:
    """Evaluation of the model right after training ``task``, over tasks 0..task."""

    task: int
    class_il_accuracy: float
    task_il_accuracy: float
    per_task_class_il: List[float]
    per_task_task_il: List[float]
    restricted: BlockReport
    partition: BlockReport
    partition_loss: float
    q_values: Optional[List[float]] = None
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        out = {
            "task": self.task,
            "class_il_accuracy": self.class_il_accuracy,
            "task_il_accuracy": self.task_il_accuracy,
            "per_task_class_il": self.per_task_class_il,
            "per_task_task_il": self.per_task_task_il,
            "restricted": self.restricted.to_dict(),
            "partition": self.partition.to_dict(),
            "partition_loss": self.partition_loss,
            "q_values": self.q_values,
        }
        if include_timing:
            out["wall_clock"] = self.wall_clock
        return out


@dataclass
class RunRecord:
    strategy: str
    seed: int
    hyperparams: Dict[str, Any]
    train: Dict[str, Any]
    layout: Sequence[int]
    config_hash: str
    metadata: Dict[str, Any] = field(default_factory=dict)
    timeline: List[TaskSnapshot] = field(default_factory=list)
    status: str = "ok"
    error: Optional[str] = None
    model: Any = field(default=None, repr=False, compare=False)
    final_matrices: Dict[str, LossMatrix] = field(default_factory=dict, repr=False, compare=False)
    label: Optional[str] = None

    @property
    def run_id(self) -> str:
        return f"{self.label or self.strategy}_seed{self.seed}"

    @property
    def cf_records(self) -> List[CFRecord]:
        """
        CF records from the diagonal task blocks over the timeline.

        Generative runs read the blocks from the Q matrix (their own loss
        matrix); discriminative runs from the restricted-pair reports.
        """
        if self.timeline and self.timeline[0].q_values is not None:
            c = self.layout[1]
            history = [np.asarray(s.q_values).reshape(-1, c).sum(axis=1) for s in self.timeline]
        else:
            history = [s.restricted.diagonal_sums() for s in self.timeline]
        return cf_record(history)

    @property
    def total_cf(self) -> float:
        return total_cf(self.cf_records)

    @property
    def tc_score(self) -> float:
        return tc_score(self.timeline[-1].restricted) if self.timeline else float("nan")

    @property
    def final_class_il(self) -> float:
        return self.timeline[-1].class_il_accuracy if self.timeline else float("nan")

    @property
    def final_task_il(self) -> float:
        return self.timeline[-1].task_il_accuracy if self.timeline else float("nan")

    def timings(self) -> List[float]:
        return [s.wall_clock for s in self.timeline]

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "label": self.label or self.strategy,
            "seed": self.seed,
            "hyperparams": self.hyperparams,
            "train": self.train,
            "layout": list(self.layout),
            "config_hash": self.config_hash,
            "metadata": self.metadata,
            "status": self.status,
            "error": self.error,
            "timeline": [s.to_dict(include_timing) for s in self.timeline],
            "cf_records": [r.to_dict() for r in self.cf_records],
            "total_cf": self.total_cf,
            "tc_score": self.tc_score,
        }


def config_hash(payload: Dict[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def task_seed(seed: int, task: int) -> int:
    """Training seed for one task, derived from the run seed."""
    return int(np.random.SeedSequence([int(seed), int(task)]).generate_state(1)[0])


def class_il_accuracy(scorer, samples: SampleSet) -> float:
    return float(np.mean(stable_argmax(scorer.scores(samples.features)) == samples.labels))


def task_il_accuracy(scorer, samples: SampleSet, class_ids: Sequence[int]) -> float:
    """Accuracy with the argmax restricted to ``class_ids`` (the task oracle is given)."""
    classes = np.asarray(list(class_ids), dtype=np.int64)
    picked = classes[stable_argmax(scorer.scores(samples.features)[:, classes])]
    return float(np.mean(picked == samples.labels))


def snapshot(scorer, stream: TaskStream, task: int, skip_offdiag: bool = False,
             generative: Optional[GaussianClassModel] = None) -> Tuple[TaskSnapshot, Dict[str, LossMatrix]]:
    """Evaluate ``scorer`` on the test data of tasks 0..task."""
    seen = stream.prefix(task + 1)
    restricted = pairwise_matrix(scorer, seen, mode="restricted_pair", skip_offdiag=skip_offdiag)
    partition = pairwise_matrix(scorer, seen, mode="partition", skip_offdiag=skip_offdiag)
    per_task_class_il = [class_il_accuracy(scorer, t.test) for t in seen.tasks]
    per_task_task_il = [task_il_accuracy(scorer, t.test, t.class_ids) for t in seen.tasks]
    q_values = q_matrix(generative, seen).values.tolist() if generative is not None else None
    snap = TaskSnapshot(
        task=task,
        class_il_accuracy=class_il_accuracy(scorer, seen.test_set),
        task_il_accuracy=float(np.mean(per_task_task_il)),
        per_task_class_il=per_task_class_il,
        per_task_task_il=per_task_task_il,
        restricted=block_report(restricted),
        partition=block_report(partition),
        partition_loss=partition.total(),
        q_values=q_values,
    )
    return snap, {"restricted_pair": restricted, "partition": partition}


def _replay_surrogate(stream: TaskStream, task: Task, params: Dict[str, Any]) -> GaussianClassModel:
    kind = params["surrogate"]
    if kind == "fitted":
        fitted = GaussianClassModel(stream.feature_dim, "diagonal_per_class", num_classes=stream.num_classes)
        for r in task.class_ids:
            fitted.fit_class(task.train.with_classes([r]), r)
        return fitted
    if stream.source is None:
        raise ConfigError(f"Surrogate '{kind}' needs a blob stream with a known density")
    oracle = GaussianClassModel.from_blob_spec(stream.source, list(task.class_ids))
    if kind == "oracle":
        return oracle
    centers = stream.source.centers
    if len(centers) < 2:
        raise ConfigError("The biased surrogate needs at least two classes")
    # each mean slides toward the next class's center
    toward_next = {r: centers[(r + 1) % len(centers)] - centers[r] for r in task.class_ids}
    return oracle.shifted(params["bias_sigmas"], toward_next)


def _append(record: RunRecord, evaluated: Tuple[TaskSnapshot, Dict[str, LossMatrix]], started: float) -> None:
    snap, record.final_matrices = evaluated
    snap.wall_clock = time.perf_counter() - started
    record.timeline.append(snap)
    logger.debug(
        f"{record.run_id} after task {snap.task}: class-IL {snap.class_il_accuracy:.3f}, "
        f"task-IL {snap.task_il_accuracy:.3f}"
    )


def _run_sequential(record: RunRecord, name: str, stream: TaskStream, model: DiscriminativeModel,
                    params: Dict[str, Any], cfg: TrainConfig, skip_offdiag: bool) -> None:
    ewc = EWCState(params["lambda"]) if name == "ewc" else None
    si = SIState(params["lambda"], params["damping"], model.flat_params()) if name == "si" else None
    replay = ReplayState(GaussianClassModel(stream.feature_dim, num_classes=stream.num_classes)) \
        if name == "generative_replay" else None
    teacher = None

    for t, task in enumerate(stream.tasks):
        started = time.perf_counter()
        logger.info(f"Training task {t + 1}/{stream.num_tasks} with strategy {name} (seed {record.seed})")
        task_cfg = replace(cfg, seed=task_seed(cfg.seed, t))
        hooks: Dict[str, Any] = {}
        if ewc is not None and ewc.anchors:
            hooks["extra_penalty"] = partial(ewc_penalty, ewc)
        if si is not None:
            hooks["extra_penalty"] = partial(si_penalty, si)
            hooks["on_step"] = lambda before, after, grad: si_update(si, StepInfo(before, after, grad))
        if teacher is not None:
            old = [c for prior in stream.tasks[:t] for c in prior.class_ids]
            hooks["objective"] = distillation_objective(teacher, params["temperature"], params["alpha"], old)
        if name == "labels_trick":
            hooks["objective"] = labels_trick_objective(task.class_ids)
        if replay is not None:
            hooks["batch_sampler"] = generative_replay_step(
                replay, task, params["replay_ratio"], task_cfg.seed, cfg.batch_size
            )

        try:
            model = sgd_train(model, task.train, task_cfg, **hooks)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"Strategy {name}, task {t}: {exc}") from exc

        if ewc is not None:
            fisher = fisher_diagonal(model, task.train, int(params["fisher_draws"]), task_cfg.seed)
            ewc.consolidate(model.flat_params(), fisher)
        if si is not None:
            si.consolidate(model.flat_params())
        if name == "distill":
            teacher = model.copy()
        if replay is not None:
            replay.remember(task, _replay_surrogate(stream, task, params))

        _append(record, snapshot(model, stream, t, skip_offdiag), started)
    record.model = model


def _run_joint(record: RunRecord, stream: TaskStream, model: DiscriminativeModel,
               cfg: TrainConfig, skip_offdiag: bool) -> None:
    started = time.perf_counter()
    logger.info(f"Training joint model on all {stream.num_tasks} tasks (seed {record.seed})")
    joint_cfg = replace(cfg, iterations=cfg.iterations * stream.num_tasks, seed=task_seed(cfg.seed, 0))
    try:
        model = sgd_train(model, stream.train_set, joint_cfg)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(f"Strategy joint: {exc}") from exc
    for t in range(stream.num_tasks):
        _append(record, snapshot(model, stream, t, skip_offdiag), started)
        started = time.perf_counter()
    record.model = model


def _run_generative(record: RunRecord, name: str, stream: TaskStream, params: Dict[str, Any],
                    skip_offdiag: bool) -> None:
    if name == "generative_classifier":
        state = GaussianClassModel(stream.feature_dim, params["covariance"], num_classes=stream.num_classes)
        record.metadata.update(variance_floor=state.var_floor, shrinkage=state.shrinkage)
    else:
        state = SLDAState(stream.feature_dim, shrinkage=params["shrinkage"], num_classes=stream.num_classes)
        record.metadata.update(shrinkage=state.shrinkage)

    for t, task in enumerate(stream.tasks):
        started = time.perf_counter()
        logger.info(f"Fitting task {t + 1}/{stream.num_tasks} with strategy {name}")
        if isinstance(state, GaussianClassModel):
            for r in task.class_ids:
                state.fit_class(task.train.with_classes([r]), r)
            _append(record, snapshot(state, stream, t, skip_offdiag, generative=state), started)
        else:
            state.fit(task.train)
            _append(record, snapshot(state, stream, t, skip_offdiag), started)
    if isinstance(state, GaussianClassModel) and state.floor_hits:
        record.metadata["variance_floor_hits"] = state.floor_hits
    record.model = copy.deepcopy(state)


def run_strategy(
    name: str,
    stream: TaskStream,
    model_init: Optional[DiscriminativeModel],
    hyperparams: Optional[Dict[str, Any]],
    cfg: TrainConfig,
    skip_offdiag: bool = False,
    label: Optional[str] = None,
) -> RunRecord:
    """
    Train one strategy over a task stream and snapshot it after every task.

    Args:
        name: Registered strategy name
        stream: Task stream
        model_init: Initial discriminative model (ignored by generative strategies)
        hyperparams: Overrides of the strategy defaults
        cfg: Training configuration; ``cfg.seed`` seeds every task's training
        skip_offdiag: Leave inter-task loss-matrix entries undefined (negative control)
        label: Name used for output files (defaults to the strategy name)

    Returns:
        RunRecord; on divergence its status is ``failed`` and its timeline
        holds the tasks completed before the failure

    Raises:
        UnknownStrategyError: for an unregistered strategy
        ConfigError: for invalid hyperparameters or a missing initial model
    """
    params = resolve_hyperparams(name, hyperparams)
    generative = name in GENERATIVE_STRATEGIES
    if not generative and model_init is None:
        raise ConfigError(f"Strategy '{name}' needs an initial model")
    if not generative and (model_init.num_classes != stream.num_classes
                           or model_init.feature_dim != stream.feature_dim):
        raise ConfigError(
            f"Model ({model_init.feature_dim} -> {model_init.num_classes}) does not fit stream "
            f"({stream.feature_dim} -> {stream.num_classes})"
        )

    identity = {
        "strategy": name,
        "hyperparams": params,
        "train": asdict(cfg),
        "layout": list(stream.layout),
        "stream_seed": stream.seed,
        "model": None if generative else [model_init.arch, model_init.hidden_width, model_init.seed],
    }
    record = RunRecord(
        strategy=name,
        seed=cfg.seed,
        hyperparams=params,
        train=asdict(cfg),
        layout=stream.layout,
        config_hash=config_hash(identity),
        metadata={"variance_floor": VARIANCE_FLOOR} if name == "generative_replay" else {},
        label=label,
    )

    try:
        if name == "joint":
            _run_joint(record, stream, model_init, cfg, skip_offdiag)
        elif generative:
            _run_generative(record, name, stream, params, skip_offdiag)
        else:
            _run_sequential(record, name, stream, model_init, params, cfg, skip_offdiag)
    except TrainingDivergedError as exc:
        logger.error(f"Run {record.run_id} aborted after {len(record.timeline)} tasks: {exc}")
        record.status = "failed"
        record.error = str(exc)
    return record


def train_cf_optimal(stream: TaskStream, model_init: DiscriminativeModel, cfg: TrainConfig) -> DiscriminativeModel:
    """
    Reference model that minimizes only the diagonal task blocks.

    Trains jointly on every task with each sample's loss restricted to its own
    task's logits, using the same budget as the joint baseline.
    """
    c = stream.classes_per_task

    def objective(model, features, labels):
        return within_task_loss(model, features, labels, c)

    joint_cfg = replace(cfg, iterations=cfg.iterations * stream.num_tasks, seed=task_seed(cfg.seed, 0))
    return sgd_train(model_init, stream.train_set, joint_cfg, objective=objective)


def fit_joint_generative(stream: TaskStream, covariance: str = "diagonal_per_class") -> GaussianClassModel:
    """Gaussian classifier fitted on all classes at once."""
    model = GaussianClassModel(stream.feature_dim, covariance, num_classes=stream.num_classes)
    train = stream.train_set
    for r in range(stream.num_classes):
        model.fit_class(train.with_classes([r]), r)
    return model
