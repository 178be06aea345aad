"""
Class-conditional generative classifiers.

``GaussianClassModel`` keeps one density per class and classifies with the
Bayes rule. In the per-class covariance modes, fitting class r touches only
class r's parameters, so the per-class losses q_rr of previously fitted
classes never move. ``SLDAState`` is the streaming linear discriminant:
running class means plus a pooled within-class covariance updated one sample
at a time, with ``BatchLDA`` as its batch oracle.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from .data import BlobSpec, SampleSet, TaskStream
from .exceptions import ConfigError, NotFittedError, ShapeMismatchError
from .serialization import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

COVARIANCE_MODES = ("diagonal_per_class", "full_per_class", "shared_full")
VARIANCE_FLOOR = 1e-6
SHRINKAGE = 1e-2
LOG_2PI = float(np.log(2.0 * np.pi))


def shrink_covariance(cov: np.ndarray, gamma: float, floor: float = VARIANCE_FLOOR) -> np.ndarray:
    """(1 - gamma) * cov + gamma * mean_variance * I, with the mean variance floored."""
    d = cov.shape[0]
    target = max(float(np.trace(cov)) / d, floor)
    return (1.0 - gamma) * cov + gamma * target * np.eye(d)


@dataclass
class ClassDensity:
    mean: np.ndarray
    count: int
    variances: Optional[np.ndarray] = None
    scatter: Optional[np.ndarray] = None


class GaussianClassModel:
    """
    Per-class Gaussian densities with class priors from training counts.

    Args:
        feature_dim: Input dimension d
        covariance: ``diagonal_per_class``, ``full_per_class`` or ``shared_full``
        num_classes: Width of ``scores`` output; unfitted columns are -inf
        var_floor: Lower bound on every variance
        shrinkage: Covariance shrinkage gamma for the full modes
    """

    def __init__(
        self,
        feature_dim: int,
        covariance: str = "diagonal_per_class",
        num_classes: Optional[int] = None,
        var_floor: float = VARIANCE_FLOOR,
        shrinkage: float = SHRINKAGE,
    ):
        if covariance not in COVARIANCE_MODES:
            raise ConfigError(f"Unknown covariance mode '{covariance}'. Supported: {COVARIANCE_MODES}")
        if var_floor <= 0 or not 0 <= shrinkage < 1:
            raise ConfigError(f"Need var_floor > 0 and shrinkage in [0, 1), got {var_floor}, {shrinkage}")
        self.feature_dim = feature_dim
        self.covariance = covariance
        self.num_classes = num_classes
        self.var_floor = var_floor
        self.shrinkage = shrinkage
        self.classes: Dict[int, ClassDensity] = {}
        self.floor_hits = 0

    @property
    def fitted_classes(self) -> List[int]:
        return sorted(self.classes)

    def priors(self) -> Dict[int, float]:
        total = sum(c.count for c in self.classes.values())
        return {r: self.classes[r].count / total for r in self.fitted_classes}

    def fit_class(self, samples: SampleSet, class_id: int) -> "GaussianClassModel":
        """Estimate class ``class_id`` from its samples; other classes are not touched."""
        if len(samples) < 2:
            raise ValueError(f"Class {class_id} needs at least 2 samples, got {len(samples)}")
        if samples.feature_dim != self.feature_dim:
            raise ShapeMismatchError(f"Samples have dimension {samples.feature_dim}, model {self.feature_dim}")
        if np.any(samples.labels != class_id):
            raise ValueError(f"fit_class({class_id}) got samples labelled {sorted(set(samples.labels.tolist()))}")

        x = samples.features
        mean = x.mean(axis=0)
        centered = x - mean
        density = ClassDensity(mean=mean, count=len(samples))
        if self.covariance == "diagonal_per_class":
            raw = np.mean(centered ** 2, axis=0)
            floored = raw < self.var_floor
            if np.any(floored):
                self.floor_hits += int(floored.sum())
                logger.warning(f"Variance floor {self.var_floor} engaged on {int(floored.sum())} dims of class {class_id}")
            density.variances = np.maximum(raw, self.var_floor)
        else:
            density.scatter = centered.T @ centered
        self.classes[int(class_id)] = density
        return self

    def _require(self, class_id: int) -> ClassDensity:
        if class_id not in self.classes:
            raise NotFittedError(f"Class {class_id} has not been fitted")
        return self.classes[class_id]

    def class_covariance(self, class_id: int) -> np.ndarray:
        """Covariance used for class ``class_id`` (after floor/shrinkage)."""
        density = self._require(class_id)
        if self.covariance == "diagonal_per_class":
            return np.diag(density.variances)
        if self.covariance == "full_per_class":
            return shrink_covariance(density.scatter / density.count, self.shrinkage, self.var_floor)
        return self.shared_covariance()

    def shared_covariance(self) -> np.ndarray:
        if self.covariance != "shared_full":
            raise ConfigError(f"No shared covariance in mode {self.covariance}")
        if not self.classes:
            raise NotFittedError("No classes fitted")
        scatter = sum(c.scatter for c in self.classes.values())
        total = sum(c.count for c in self.classes.values())
        return shrink_covariance(scatter / total, self.shrinkage, self.var_floor)

    def log_density(self, features: np.ndarray, class_id: int) -> np.ndarray:
        """log p(x | class_id) for every row of ``features``."""
        density = self._require(class_id)
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.feature_dim:
            raise ShapeMismatchError(f"Expected dimension {self.feature_dim}, got {x.shape[1]}")
        diff = x - density.mean
        if self.covariance == "diagonal_per_class":
            v = density.variances
            return -0.5 * (np.sum(np.log(v)) + self.feature_dim * LOG_2PI + np.sum(diff ** 2 / v, axis=1))

        chol = linalg.cho_factor(self.class_covariance(class_id), lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        mahalanobis = np.sum(diff * linalg.cho_solve(chol, diff.T).T, axis=1)
        return -0.5 * (logdet + self.feature_dim * LOG_2PI + mahalanobis)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Joint log-density log p(x|r) + log pi_r per class; -inf for unfitted classes."""
        if not self.classes:
            raise NotFittedError("No classes fitted")
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        width = self.num_classes or (max(self.classes) + 1)
        out = np.full((x.shape[0], width), -np.inf)
        for r, prior in self.priors().items():
            out[:, r] = self.log_density(x, r) + np.log(prior)
        return out

    def sample(self, class_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
        density = self._require(class_id)
        z = rng.standard_normal((n, self.feature_dim))
        if self.covariance == "diagonal_per_class":
            return density.mean + np.sqrt(density.variances) * z
        chol = np.linalg.cholesky(self.class_covariance(class_id))
        return density.mean + z @ chol.T

    def shifted(self, shift_sigmas: float, directions: Mapping[int, np.ndarray]) -> "GaussianClassModel":
        """
        Copy whose class means move ``shift_sigmas`` standard deviations along the given directions.

        The standard deviation is the class density's own, measured along the
        (normalized) direction. Classes without a direction keep their mean.
        """
        clone = self.copy()
        for r, direction in directions.items():
            density = clone._require(int(r))
            u = np.asarray(direction, dtype=np.float64)
            norm = float(np.linalg.norm(u))
            if u.shape != (self.feature_dim,) or norm == 0.0:
                raise ValueError(f"Shift direction for class {r} must be a nonzero {self.feature_dim}-vector")
            u = u / norm
            sigma = float(np.sqrt(u @ self.class_covariance(int(r)) @ u))
            density.mean = density.mean + shift_sigmas * sigma * u
        return clone

    def copy(self) -> "GaussianClassModel":
        clone = GaussianClassModel(self.feature_dim, self.covariance, self.num_classes, self.var_floor, self.shrinkage)
        for r, c in self.classes.items():
            clone.classes[r] = ClassDensity(
                mean=c.mean.copy(),
                count=c.count,
                variances=None if c.variances is None else c.variances.copy(),
                scatter=None if c.scatter is None else c.scatter.copy(),
            )
        return clone

    @classmethod
    def from_blob_spec(cls, spec: BlobSpec, class_ids: Optional[List[int]] = None) -> "GaussianClassModel":
        """The exact data-generating densities of a blob spec (oracle surrogate)."""
        model = cls(spec.feature_dim, "diagonal_per_class", num_classes=spec.num_classes)
        for r in class_ids if class_ids is not None else range(spec.num_classes):
            model.classes[int(r)] = ClassDensity(
                mean=spec.centers[r].copy(),
                count=spec.samples_per_class_train,
                variances=np.full(spec.feature_dim, spec.scale[r] ** 2),
            )
        return model

    def save(self, path: Union[str, Path]) -> Path:
        header = {
            "kind": "generative",
            "covariance": self.covariance,
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "var_floor": self.var_floor,
            "shrinkage": self.shrinkage,
            "classes": self.fitted_classes,
            "counts": [self.classes[r].count for r in self.fitted_classes],
        }
        parts = []
        for r in self.fitted_classes:
            c = self.classes[r]
            parts.extend([c.mean, c.variances if c.variances is not None else c.scatter.ravel()])
        payload = np.concatenate(parts) if parts else np.zeros(0)
        return write_checkpoint(path, header, payload)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GaussianClassModel":
        header, payload = read_checkpoint(path)
        if header.get("kind") != "generative":
            raise ConfigError(f"{path} is not a generative checkpoint (kind={header.get('kind')})")
        model = cls(header["feature_dim"], header["covariance"], header["num_classes"], header["var_floor"], header["shrinkage"])
        d = model.feature_dim
        second = d if model.covariance == "diagonal_per_class" else d * d
        offset = 0
        for r, count in zip(header["classes"], header["counts"]):
            mean = payload[offset:offset + d].copy()
            rest = payload[offset + d:offset + d + second].copy()
            offset += d + second
            if model.covariance == "diagonal_per_class":
                model.classes[r] = ClassDensity(mean=mean, count=count, variances=rest)
            else:
                model.classes[r] = ClassDensity(mean=mean, count=count, scatter=rest.reshape(d, d))
        return model


def fit_class(model: GaussianClassModel, samples_of_class: SampleSet, class_id: int) -> GaussianClassModel:
    return model.fit_class(samples_of_class, class_id)


def class_nll(model: GaussianClassModel, x: np.ndarray, class_id: int) -> float:
    """-log p(x | class_id) for a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError(f"class_nll takes one input vector, got shape {x.shape}")
    return float(-model.log_density(x[None, :], class_id)[0])


def bayes_classify(model: GaussianClassModel, x: np.ndarray) -> int:
    """argmax_r log p(x|r) + log pi_r, ties to the lowest class index."""
    return int(np.argmax(model.scores(np.asarray(x, dtype=np.float64)[None, :])[0]))


def sample_replay(model: GaussianClassModel, class_id: int, n: int, seed: int) -> SampleSet:
    """
    Draw ``n`` i.i.d. samples of class ``class_id`` from the fitted density.

    The generator is keyed by (seed, class_id), so a fixed seed gives identical draws.
    """
    if n < 1:
        raise ValueError(f"Replay count must be at least 1, got {n}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(class_id)])))
    return SampleSet(model.sample(class_id, n, rng), np.full(n, class_id))


@dataclass
class QMatrix:
    """
    Generative loss matrix: only the per-class entries q_rr are defined.

    ``values[r]`` is the mean class-conditional NLL over class r's test samples.
    """

    values: np.ndarray
    num_tasks: int
    classes_per_task: int

    def to_matrix(self) -> np.ndarray:
        n = self.values.shape[0]
        out = np.full((n, n), np.nan)
        np.fill_diagonal(out, self.values)
        return out

    def task_sums(self) -> np.ndarray:
        """Sum of defined entries inside each diagonal task block."""
        return self.values.reshape(self.num_tasks, self.classes_per_task).sum(axis=1)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"k": r, "l": r, "value": float(v)} for r, v in enumerate(self.values)]
        return pd.DataFrame(rows, columns=["k", "l", "value"])


def q_matrix(model: GaussianClassModel, stream: TaskStream) -> QMatrix:
    """Per-class mean NLL over the stream's test data; every stream class must be fitted."""
    values = np.empty(stream.num_classes)
    test = stream.test_set
    for r in range(stream.num_classes):
        if r not in model.classes:
            raise NotFittedError(f"Class {r} has not been fitted")
        subset = test.with_classes([r])
        values[r] = float(np.mean(-model.log_density(subset.features, r)))
    return QMatrix(values=values, num_tasks=stream.num_tasks, classes_per_task=stream.classes_per_task)


def _lda_discriminants(
    means: Dict[int, np.ndarray],
    covariance: np.ndarray,
    features: np.ndarray,
    width: int,
    log_priors: Optional[Dict[int, float]] = None,
) -> np.ndarray:
    chol = linalg.cho_factor(covariance, lower=True)
    classes = sorted(means)
    mu = np.stack([means[r] for r in classes])
    weights = linalg.cho_solve(chol, mu.T)
    bias = -0.5 * np.sum(mu.T * weights, axis=0)
    if log_priors is not None:
        bias = bias + np.array([log_priors[r] for r in classes])
    out = np.full((features.shape[0], width), -np.inf)
    out[:, classes] = features @ weights + bias
    return out


@dataclass
class SLDAState:
    """
    Streaming LDA sufficient statistics.

    ``scatter`` is the pooled within-class scatter; after any prefix of
    updates it equals the batch scatter of the samples seen so far.
    """

    feature_dim: int
    shrinkage: float = SHRINKAGE
    num_classes: Optional[int] = None
    means: Dict[int, np.ndarray] = field(default_factory=dict)
    counts: Dict[int, int] = field(default_factory=dict)
    scatter: Optional[np.ndarray] = None
    total: int = 0

    def __post_init__(self):
        if self.scatter is None:
            self.scatter = np.zeros((self.feature_dim, self.feature_dim))

    def update(self, x: np.ndarray, y: int) -> "SLDAState":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.feature_dim,):
            raise ShapeMismatchError(f"SLDA expects inputs of shape ({self.feature_dim},), got {x.shape}")
        y = int(y)
        n = self.counts.get(y, 0)
        if n == 0:
            self.means[y] = x.copy()
        else:
            delta = x - self.means[y]
            self.means[y] = self.means[y] + delta / (n + 1)
            self.scatter += (n / (n + 1)) * np.outer(delta, delta)
        self.counts[y] = n + 1
        self.total += 1
        return self

    def fit(self, samples: SampleSet) -> "SLDAState":
        for x, y in zip(samples.features, samples.labels):
            self.update(x, y)
        return self

    def covariance(self) -> np.ndarray:
        if self.total == 0:
            raise NotFittedError("SLDA has seen no samples")
        return shrink_covariance(self.scatter / self.total, self.shrinkage)

    def scores(self, features: np.ndarray) -> np.ndarray:
        if self.total == 0:
            raise NotFittedError("SLDA has seen no samples")
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        width = self.num_classes or (max(self.means) + 1)
        return _lda_discriminants(self.means, self.covariance(), x, width)

    def classify(self, x: np.ndarray) -> int:
        return int(np.argmax(self.scores(x)[0]))


def slda_update(state: SLDAState, x: np.ndarray, y: int) -> SLDAState:
    return state.update(x, y)


def slda_classify(state: SLDAState, x: np.ndarray) -> int:
    return state.classify(x)


@dataclass
class BatchLDA:
    """Batch LDA with the same shrinkage and decision rule as :class:`SLDAState`."""

    means: Dict[int, np.ndarray]
    covariance: np.ndarray
    log_priors: Optional[Dict[int, float]] = None
    num_classes: Optional[int] = None

    @classmethod
    def fit(cls, samples: SampleSet, shrinkage: float = SHRINKAGE, use_priors: bool = False,
            num_classes: Optional[int] = None) -> "BatchLDA":
        x, y = samples.features, samples.labels
        means, scatter, counts = {}, np.zeros((x.shape[1], x.shape[1])), {}
        for r in np.unique(y).tolist():
            rows = x[y == r]
            means[r] = rows.mean(axis=0)
            centered = rows - means[r]
            scatter += centered.T @ centered
            counts[r] = rows.shape[0]
        cov = shrink_covariance(scatter / x.shape[0], shrinkage)
        log_priors = {r: float(np.log(c / x.shape[0])) for r, c in counts.items()} if use_priors else None
        return cls(means=means, covariance=cov, log_priors=log_priors, num_classes=num_classes)

    def scores(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        width = self.num_classes or (max(self.means) + 1)
        return _lda_discriminants(self.means, self.covariance, x, width, self.log_priors)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(features), axis=1)


def probe_grid(samples: SampleSet, n_points: int = 500, seed: int = 0) -> np.ndarray:
    """Uniform points over the bounding box of ``samples``, padded by 10%."""
    lo, hi = samples.features.min(axis=0), samples.features.max(axis=0)
    pad = 0.1 * (hi - lo)
    rng = np.random.default_rng(seed)
    return rng.uniform(lo - pad, hi + pad, size=(n_points, samples.feature_dim))


def decision_agreement(a, b, probes: np.ndarray) -> Tuple[int, int]:
    """(disagreements, probes) between two scorers' argmax decisions."""
    da = np.argmax(a.scores(probes), axis=1)
    db = np.argmax(b.scores(probes), axis=1)
    return int(np.sum(da != db)), int(probes.shape[0])
