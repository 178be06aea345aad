"""
Pairwise loss matrices and the quantities derived from them.

An N-way classifier is read as an array of virtual binary classifiers, one
per ordered class pair (k, l). Two readings are provided:

``partition``
    Each sample's full N-way loss is split evenly over the N-1 pairs its
    class takes part in, normalized by the total test-set size. The entries
    then sum to the empirical loss exactly.
``restricted_pair``
    Entry (k, l) is the two-logit loss on class-k samples of the pair subset
    {k, l}, normalized by the pair subset size. This measures whether the
    pair can be told apart, which is what task confusion is about.

Entry (k, l) is owned by the class-k side of the pair. Undefined entries are
NaN in memory and null on disk.
"""

import logging
from dataclasses import dataclass
from itertools import permutations
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .data import TaskStream
from .exceptions import ConfigError, ShapeMismatchError
from .models import CROSS_ENTROPY, ZERO_ONE, LossFn, cross_entropy_per_sample, per_sample_loss

logger = logging.getLogger(__name__)

MATRIX_MODES = ("partition", "restricted_pair")
OFFDIAG_TOLERANCE = 1e-6


@dataclass
class LossMatrix:
    entries: np.ndarray
    mode: str
    loss_kind: str
    num_tasks: int
    classes_per_task: int

    def __post_init__(self):
        n = self.num_tasks * self.classes_per_task
        if self.entries.shape != (n, n):
            raise ShapeMismatchError(f"Entries shape {self.entries.shape} does not match layout N={n}")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.entries)

    def total(self) -> float:
        return float(np.sum(self.entries[self.defined]))

    def block(self, i: int, j: int) -> np.ndarray:
        c = self.classes_per_task
        return self.entries[i * c:(i + 1) * c, j * c:(j + 1) * c]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "loss": self.loss_kind,
            "layout": [self.num_tasks, self.classes_per_task],
            "entries": [[None if np.isnan(v) else float(v) for v in row] for row in self.entries],
        }

    def to_frame(self) -> pd.DataFrame:
        """Heatmap triplets (k, l, value) for every defined entry, row-major."""
        ks, ls = np.nonzero(self.defined)
        return pd.DataFrame({"k": ks, "l": ls, "value": self.entries[ks, ls]})


@dataclass
class BlockReport:
    block_sums: np.ndarray
    block_means: np.ndarray
    defined_counts: np.ndarray
    diag_total: float
    offdiag_total: float
    matrix_total: float

    @property
    def num_tasks(self) -> int:
        return self.block_sums.shape[0]

    def diagonal_sums(self) -> np.ndarray:
        return np.diag(self.block_sums).copy()

    def expected_offdiag_entries(self, classes_per_task: int) -> int:
        t = self.num_tasks
        return t * (t - 1) * classes_per_task * classes_per_task

    def to_dict(self) -> dict:
        return {
            "block_sums": self.block_sums.tolist(),
            "block_means": [[None if np.isnan(v) else float(v) for v in row] for row in self.block_means],
            "defined_counts": self.defined_counts.tolist(),
            "diag_total": self.diag_total,
            "offdiag_total": self.offdiag_total,
            "matrix_total": self.matrix_total,
        }


@dataclass(frozen=True)
class CFRecord:
    task: int
    loss_before: float
    loss_after: float

    @property
    def delta(self) -> float:
        return self.loss_after - self.loss_before

    @property
    def forgot(self) -> bool:
        return self.delta > 0

    def to_dict(self) -> dict:
        return {"task": self.task, "loss_before": self.loss_before, "loss_after": self.loss_after, "delta": self.delta}


def _pair_loss_kind(mode: str, loss: Optional[LossFn]) -> str:
    kind = (loss or CROSS_ENTROPY).kind
    if kind == "restricted_pair_cross_entropy":
        kind = "cross_entropy"
    if mode not in MATRIX_MODES:
        raise ConfigError(f"Unknown matrix mode '{mode}'. Supported: {MATRIX_MODES}")
    return kind


def _restricted_pair_losses(scores: np.ndarray, labels: np.ndarray, k: int, l: int, kind: str) -> np.ndarray:
    """Two-logit loss on the pair (k, l); ties in the 0-1 reading go to the lower class index."""
    pair = scores[:, [k, l]]
    target = (labels == l).astype(np.int64)
    if kind == "cross_entropy":
        return cross_entropy_per_sample(pair, target)
    lower_wins = pair[:, 0] >= pair[:, 1] if k < l else pair[:, 0] > pair[:, 1]
    predicted = np.where(lower_wins, 0, 1)
    return (predicted != target).astype(np.float64)


def pairwise_matrix(
    model,
    stream: TaskStream,
    mode: str = "partition",
    loss: Optional[LossFn] = None,
    pairs: Optional[Iterable[Tuple[int, int]]] = None,
    skip_offdiag: bool = False,
) -> LossMatrix:
    """
    Build the N x N pairwise loss matrix of a scorer over a stream's test data.

    Args:
        model: Any scorer with ``scores(features)`` returning >= N columns
        stream: Task stream (N = T * C classes)
        mode: ``partition`` or ``restricted_pair``
        loss: ``CROSS_ENTROPY`` (default) or ``ZERO_ONE``
        pairs: Order in which ordered pairs are evaluated (all by default);
            the result does not depend on it
        skip_offdiag: Leave inter-task entries undefined (negative control)

    Returns:
        LossMatrix with an undefined diagonal
    """
    kind = _pair_loss_kind(mode, loss)
    n_classes = stream.num_classes
    test = stream.test_set
    scores = np.asarray(model.scores(test.features), dtype=np.float64)
    if scores.shape[1] < n_classes:
        raise ShapeMismatchError(f"Model scores {scores.shape[1]} classes, stream needs {n_classes}")
    scores = scores[:, :n_classes]
    labels = test.labels

    class_rows = [np.flatnonzero(labels == k) for k in range(n_classes)]
    missing = [k for k, rows in enumerate(class_rows) if rows.size == 0]
    if missing:
        raise ValueError(f"No test samples for classes {missing}")

    total = labels.shape[0]
    if mode == "partition":
        full = per_sample_loss(scores, labels, ZERO_ONE if kind == "zero_one" else CROSS_ENTROPY)
        class_sums = np.array([full[rows].sum() for rows in class_rows])

    c = stream.classes_per_task
    entries = np.full((n_classes, n_classes), np.nan)
    for k, l in (pairs if pairs is not None else permutations(range(n_classes), 2)):
        if k == l:
            continue
        if skip_offdiag and k // c != l // c:
            continue
        if mode == "partition":
            entries[k, l] = class_sums[k] / ((n_classes - 1) * total)
        else:
            own = _restricted_pair_losses(scores[class_rows[k]], labels[class_rows[k]], k, l, kind)
            entries[k, l] = own.sum() / (class_rows[k].size + class_rows[l].size)

    return LossMatrix(entries=entries, mode=mode, loss_kind=kind, num_tasks=stream.num_tasks, classes_per_task=c)


def block_report(matrix: LossMatrix) -> BlockReport:
    """Task-block sums |P_ij|, their per-entry means, and the diagonal/off-diagonal split."""
    t = matrix.num_tasks
    sums = np.zeros((t, t))
    counts = np.zeros((t, t), dtype=np.int64)
    for i in range(t):
        for j in range(t):
            block = matrix.block(i, j)
            mask = ~np.isnan(block)
            sums[i, j] = float(np.sum(block[mask]))
            counts[i, j] = int(mask.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    diag_total = float(np.trace(sums))
    return BlockReport(
        block_sums=sums,
        block_means=means,
        defined_counts=counts,
        diag_total=diag_total,
        offdiag_total=float(sums.sum() - diag_total),
        matrix_total=matrix.total(),
    )


def cf_record(history: Sequence[np.ndarray]) -> List[CFRecord]:
    """
    Catastrophic-forgetting records from per-task diagonal block sums.

    Args:
        history: ``history[t][i]`` is |P_ii| measured right after training task t

    Returns:
        One record per consecutive pair (t, t+1): task t's block before and after task t+1
    """
    records = []
    for i in range(len(history) - 1):
        before, after = np.asarray(history[i]), np.asarray(history[i + 1])
        if before.shape[0] <= i or after.shape[0] <= i:
            raise ValueError(f"Missing diagonal block snapshot for task {i}")
        records.append(CFRecord(task=i, loss_before=float(before[i]), loss_after=float(after[i])))
    return records


def total_cf(records: Sequence[CFRecord]) -> float:
    return float(sum(r.delta for r in records))


def tc_score(report: BlockReport) -> float:
    """Task-confusion score: the off-diagonal block total. Zero (with a warning) when T < 2."""
    if report.num_tasks < 2:
        logger.warning("tc_score is undefined for a single task; reporting 0")
        return 0.0
    return report.offdiag_total


def offdiag_implication_holds(offdiag: float, loss: float, reference_offdiag: float, reference_loss: float,
                              tol: float = OFFDIAG_TOLERANCE) -> bool:
    """
    Losing to a reference on the off-diagonal blocks implies losing on the full loss.

    Vacuously true when the off-diagonal total is within ``tol`` of the
    reference's or better.
    """
    return not (offdiag - reference_offdiag > tol) or loss > reference_loss


def _pair_accuracy(model, stream: TaskStream, inter: bool) -> float:
    test = stream.test_set
    scores = np.asarray(model.scores(test.features), dtype=np.float64)
    labels = test.labels
    c = stream.classes_per_task
    accuracies = []
    for k in range(stream.num_classes):
        for l in range(k + 1, stream.num_classes):
            if (k // c != l // c) != inter:
                continue
            rows = np.flatnonzero((labels == k) | (labels == l))
            errors = _restricted_pair_losses(scores[rows], labels[rows], k, l, "zero_one")
            accuracies.append(1.0 - float(errors.mean()))
    if not accuracies:
        logger.warning(f"No {'inter' if inter else 'intra'}-task pairs in a T={stream.num_tasks}, C={c} stream")
        return float("nan")
    return float(np.mean(accuracies))


def inter_task_pair_accuracy(model, stream: TaskStream) -> float:
    """Mean two-way accuracy over class pairs drawn from different tasks."""
    return _pair_accuracy(model, stream, inter=True)


def intra_task_pair_accuracy(model, stream: TaskStream) -> float:
    """Mean two-way accuracy over class pairs inside the same task."""
    return _pair_accuracy(model, stream, inter=False)


def partition_residual(model, stream: TaskStream) -> float:
    """|sum of partition-mode entries - empirical cross-entropy| on the full test set."""
    matrix = pairwise_matrix(model, stream, mode="partition")
    test = stream.test_set
    full = float(np.mean(per_sample_loss(model.scores(test.features), test.labels, CROSS_ENTROPY)))
    return abs(matrix.total() - full)


@dataclass(frozen=True)
class Quadratic1D:
    """f(x) = curvature / 2 * (x - a)^2."""

    a: float
    curvature: float

    def __post_init__(self):
        if not self.curvature > 0:
            raise ValueError(f"Curvature must be positive, got {self.curvature}")

    def __call__(self, x: float) -> float:
        return 0.5 * self.curvature * (x - self.a) ** 2

    def derivative(self, x: float) -> float:
        return self.curvature * (x - self.a)


@dataclass(frozen=True)
class IncompatibilityResult:
    x_f: float
    x_g: float
    x_star: float
    is_incompatible: bool
    minimizer_distinct: bool
    g_prime_at_x_f: float
    f_prime_at_x_g: float


def incompatibility_check(f: Quadratic1D, g: Quadratic1D) -> IncompatibilityResult:
    """
    Closed-form minimizers of f, g and f + g for two 1-D quadratics.

    The combined minimizer is the curvature-weighted mean of the two
    minimizers, written as an offset from x_f so that equal minimizers give
    x_f back exactly. f and g are incompatible when their minimizers differ,
    in which case each has a nonzero slope at the other's minimizer.
    """
    x_f, x_g = float(f.a), float(g.a)
    x_star = x_f + g.curvature * (x_g - x_f) / (f.curvature + g.curvature)
    return IncompatibilityResult(
        x_f=x_f,
        x_g=x_g,
        x_star=float(x_star),
        is_incompatible=x_f != x_g,
        minimizer_distinct=x_star not in (x_f, x_g),
        g_prime_at_x_f=g.derivative(x_f),
        f_prime_at_x_g=f.derivative(x_g),
    )
