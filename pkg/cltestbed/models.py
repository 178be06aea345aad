"""
Discriminative classifiers with analytic gradients.

Two architectures are supported: ``linear`` (softmax regression) and ``mlp``
(one rectifier hidden layer, width at most 64). Parameters are kept as a list
``[W1, b1]`` or ``[W1, b1, W2, b2]``; regularizers work on the flat
concatenation of that list in the same order.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from .data import SampleSet
from .exceptions import ConfigError, ShapeMismatchError, TrainingDivergedError
from .serialization import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

ARCHITECTURES = ("linear", "mlp")
MAX_HIDDEN_WIDTH = 64

Gradients = List[np.ndarray]
# (model, features, labels) -> (loss, gradients aligned with model.parameters())
Objective = Callable[["DiscriminativeModel", np.ndarray, np.ndarray], Tuple[float, Gradients]]
# flat parameters -> (penalty value, flat gradient)
PenaltyHook = Callable[[np.ndarray], Tuple[float, np.ndarray]]
# (generator, step) -> (features, labels) of one minibatch
BatchSampler = Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]]
# (flat params before, flat params after, flat objective gradient) after every step
StepObserver = Callable[[np.ndarray, np.ndarray, np.ndarray], None]


@dataclass
class DiscriminativeModel:
    arch: str
    feature_dim: int
    num_classes: int
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_width: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        self._check_architecture(self.arch, self.hidden_width)
        expected = self._shapes(self.arch, self.feature_dim, self.num_classes, self.hidden_width)
        actual = [p.shape for p in self.parameters()]
        if actual != expected:
            raise ShapeMismatchError(f"Parameter shapes {actual} do not match {self.arch} layout {expected}")

    @staticmethod
    def _check_architecture(arch: str, hidden_width: Optional[int]) -> None:
        if arch not in ARCHITECTURES:
            raise ConfigError(f"Unknown architecture '{arch}'. Supported: {ARCHITECTURES}")
        if arch == "mlp" and not (hidden_width and 0 < hidden_width <= MAX_HIDDEN_WIDTH):
            raise ConfigError(f"mlp hidden width must be in [1, {MAX_HIDDEN_WIDTH}], got {hidden_width}")

    @staticmethod
    def _shapes(arch: str, feature_dim: int, num_classes: int, hidden_width: Optional[int]) -> List[Tuple[int, ...]]:
        if arch == "linear":
            return [(num_classes, feature_dim), (num_classes,)]
        return [(hidden_width, feature_dim), (hidden_width,), (num_classes, hidden_width), (num_classes,)]

    @classmethod
    def initialize(
        cls,
        arch: str,
        feature_dim: int,
        num_classes: int,
        hidden_width: Optional[int] = None,
        seed: int = 0,
    ) -> "DiscriminativeModel":
        """
        Seeded initialization, uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for every layer.

        Args:
            arch: ``linear`` or ``mlp``
            feature_dim: Input dimension d
            num_classes: Number of output logits N
            hidden_width: Hidden units for ``mlp``
            seed: Initialization seed

        Returns:
            New model
        """
        if arch == "linear":
            hidden_width = None
        cls._check_architecture(arch, hidden_width)
        shapes = cls._shapes(arch, feature_dim, num_classes, hidden_width)
        rng = np.random.default_rng(seed)
        params = []
        for shape in shapes:
            fan_in = shape[1] if len(shape) == 2 else params[-1].shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            params.append(rng.uniform(-bound, bound, size=shape))
        return cls(
            arch=arch,
            feature_dim=feature_dim,
            num_classes=num_classes,
            weights=params[0::2],
            biases=params[1::2],
            hidden_width=hidden_width,
            seed=seed,
        )

    @classmethod
    def zeros(cls, arch: str, feature_dim: int, num_classes: int, hidden_width: Optional[int] = None):
        model = cls.initialize(arch, feature_dim, num_classes, hidden_width, seed=0)
        return model.with_flat_params(np.zeros(model.num_parameters))

    def parameters(self) -> List[np.ndarray]:
        ordered = []
        for w, b in zip(self.weights, self.biases):
            ordered.extend([w, b])
        return ordered

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def flat_params(self) -> np.ndarray:
        return flatten(self.parameters())

    def with_flat_params(self, flat: np.ndarray) -> "DiscriminativeModel":
        params = unflatten(flat, self.parameters())
        return DiscriminativeModel(
            arch=self.arch,
            feature_dim=self.feature_dim,
            num_classes=self.num_classes,
            weights=params[0::2],
            biases=params[1::2],
            hidden_width=self.hidden_width,
            seed=self.seed,
        )

    def copy(self) -> "DiscriminativeModel":
        return self.with_flat_params(self.flat_params().copy())

    def forward(self, features: np.ndarray) -> Tuple[np.ndarray, dict]:
        """Logits for a batch plus the activations needed for backprop."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ShapeMismatchError(f"Expected inputs of dimension {self.feature_dim}, got shape {x.shape}")
        if self.arch == "linear":
            return x @ self.weights[0].T + self.biases[0], {"x": x}
        pre = x @ self.weights[0].T + self.biases[0]
        hidden = np.maximum(pre, 0.0)
        return hidden @ self.weights[1].T + self.biases[1], {"x": x, "pre": pre, "hidden": hidden}

    def scores(self, features: np.ndarray) -> np.ndarray:
        return self.forward(features)[0]

    def backward(self, cache: dict, logit_grad: np.ndarray) -> Gradients:
        """Gradients of a loss w.r.t. parameters, given its gradient w.r.t. the logits."""
        x = cache["x"]
        if self.arch == "linear":
            return [logit_grad.T @ x, logit_grad.sum(axis=0)]
        hidden = cache["hidden"]
        d_hidden = (logit_grad @ self.weights[1]) * (cache["pre"] > 0)
        return [d_hidden.T @ x, d_hidden.sum(axis=0), logit_grad.T @ hidden, logit_grad.sum(axis=0)]

    def per_sample_gradients(self, features: np.ndarray, logit_grads: np.ndarray) -> np.ndarray:
        """
        One flat gradient row per sample.

        Args:
            features: n x d inputs
            logit_grads: n x N per-sample gradients w.r.t. the logits

        Returns:
            n x P array, columns in flat parameter order
        """
        _, cache = self.forward(features)
        x = cache["x"]
        n = x.shape[0]
        if self.arch == "linear":
            blocks = [np.einsum("nk,nd->nkd", logit_grads, x), logit_grads]
        else:
            hidden = cache["hidden"]
            d_hidden = (logit_grads @ self.weights[1]) * (cache["pre"] > 0)
            blocks = [
                np.einsum("nh,nd->nhd", d_hidden, x),
                d_hidden,
                np.einsum("nk,nh->nkh", logit_grads, hidden),
                logit_grads,
            ]
        return np.concatenate([b.reshape(n, -1) for b in blocks], axis=1)

    def save(self, path: Union[str, Path]) -> Path:
        header = {
            "kind": "discriminative",
            "arch": self.arch,
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "hidden_width": self.hidden_width,
            "seed": self.seed,
        }
        return write_checkpoint(path, header, self.flat_params())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DiscriminativeModel":
        header, payload = read_checkpoint(path)
        if header.get("kind") != "discriminative":
            raise ConfigError(f"{path} is not a discriminative checkpoint (kind={header.get('kind')})")
        template = cls.zeros(header["arch"], header["feature_dim"], header["num_classes"], header["hidden_width"])
        model = template.with_flat_params(payload)
        model.seed = header.get("seed")
        return model


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten(flat: np.ndarray, like: Sequence[np.ndarray]) -> List[np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(a.size for a in like)
    if flat.shape != (total,):
        raise ShapeMismatchError(f"Flat vector has shape {flat.shape}, expected ({total},)")
    out, offset = [], 0
    for a in like:
        out.append(flat[offset:offset + a.size].reshape(a.shape).copy())
        offset += a.size
    return out


@dataclass(frozen=True)
class LossFn:
    """
    Per-sample loss v(f(x), y).

    ``restricted_pair_cross_entropy`` uses only logits k and l and accepts
    only samples labelled k or l.
    """

    kind: str
    pair: Optional[Tuple[int, int]] = None

    KINDS = ("cross_entropy", "zero_one", "restricted_pair_cross_entropy")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"Unknown loss '{self.kind}'. Supported: {self.KINDS}")
        if (self.kind == "restricted_pair_cross_entropy") != (self.pair is not None):
            raise ConfigError("A class pair is required exactly for restricted_pair_cross_entropy")

    @classmethod
    def restricted_pair(cls, k: int, l: int) -> "LossFn":
        return cls("restricted_pair_cross_entropy", (int(k), int(l)))


CROSS_ENTROPY = LossFn("cross_entropy")
ZERO_ONE = LossFn("zero_one")


def stable_argmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(scores, axis=-1)


def cross_entropy_per_sample(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = np.take_along_axis(logits, labels[:, None], axis=1)[:, 0]
    return logsumexp(logits, axis=1) - picked


def per_sample_loss(logits: np.ndarray, labels: np.ndarray, loss: LossFn) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if loss.kind == "cross_entropy":
        return cross_entropy_per_sample(logits, labels)
    if loss.kind == "zero_one":
        return (stable_argmax(logits) != labels).astype(np.float64)

    k, l = loss.pair
    if not np.all((labels == k) | (labels == l)):
        raise ValueError(f"Restricted pair loss ({k}, {l}) got samples of other classes")
    pair_logits = logits[:, [k, l]]
    return cross_entropy_per_sample(pair_logits, (labels == l).astype(np.int64))


def forward_logits(model: DiscriminativeModel, x: np.ndarray) -> np.ndarray:
    """
    Logits for one input vector (length N) or a batch (n x N).

    Raises:
        ShapeMismatchError: if the input dimension is not the model's d
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return model.scores(x[None, :])[0]
    return model.scores(x)


def empirical_loss(model, samples: SampleSet, loss: LossFn = CROSS_ENTROPY) -> float:
    """
    Mean per-sample loss over a sample set.

    Args:
        model: Any scorer exposing ``scores(features)``
        samples: Non-empty samples
        loss: Loss kind

    Returns:
        Mean loss
    """
    if len(samples) == 0:
        raise ValueError("Cannot evaluate a loss over an empty sample list")
    return float(np.mean(per_sample_loss(model.scores(samples.features), samples.labels, loss)))


def cross_entropy_objective(model: DiscriminativeModel, features: np.ndarray, labels: np.ndarray):
    logits, cache = model.forward(features)
    probs = softmax(logits, axis=1)
    n = labels.shape[0]
    loss = float(np.mean(cross_entropy_per_sample(logits, labels)))
    probs[np.arange(n), labels] -= 1.0
    return loss, model.backward(cache, probs / n)


def loss_gradient(model: DiscriminativeModel, batch: SampleSet, loss: LossFn = CROSS_ENTROPY) -> Gradients:
    """
    Analytic gradient of the mean cross-entropy over a batch.

    Returns:
        Arrays aligned with ``model.parameters()``
    """
    if len(batch) == 0:
        raise ValueError("Cannot take a gradient over an empty batch")
    if loss.kind != "cross_entropy":
        raise ConfigError(f"loss_gradient supports cross_entropy only, got {loss.kind}")
    return cross_entropy_objective(model, batch.features, batch.labels)[1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    iterations: int = 600
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be finite and non-negative, got {self.learning_rate}")
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


def epoch_batches(samples: SampleSet, batch_size: int) -> BatchSampler:
    """Default sampler: reshuffle every epoch, then walk it in contiguous minibatches."""
    n = len(samples)
    size = min(batch_size, n)
    per_epoch = int(np.ceil(n / size))
    state = {"order": None}

    def sample(rng: np.random.Generator, step: int) -> Tuple[np.ndarray, np.ndarray]:
        position = step % per_epoch
        if position == 0 or state["order"] is None:
            state["order"] = rng.permutation(n)
        idx = state["order"][position * size:(position + 1) * size]
        return samples.features[idx], samples.labels[idx]

    return sample


@dataclass
class TrainingTrace:
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    steps: int = 0
    losses: List[float] = field(default_factory=list)


def sgd_train(
    model: DiscriminativeModel,
    samples: SampleSet,
    cfg: TrainConfig,
    extra_penalty: Optional[PenaltyHook] = None,
    objective: Optional[Objective] = None,
    batch_sampler: Optional[BatchSampler] = None,
    on_step: Optional[StepObserver] = None,
    trace: Optional[TrainingTrace] = None,
) -> DiscriminativeModel:
    """
    Plain minibatch gradient descent on a private copy of ``model``.

    Args:
        model: Starting point (left untouched)
        samples: Training samples (used by the default sampler)
        cfg: Learning rate, iterations, batch size, seed
        extra_penalty: Regularizer added to the objective (EWC, SI, ...)
        objective: Replaces mean cross-entropy (labels trick, distillation)
        batch_sampler: Replaces epoch shuffling over ``samples`` (replay)
        on_step: Called after every step with (before, after, objective gradient)
        trace: Receives the per-step objective values

    Returns:
        Trained copy of the model

    Raises:
        TrainingDivergedError: on NaN/Inf loss or parameters
    """
    if len(samples) == 0:
        raise ValueError("Cannot train on an empty sample list")
    objective = objective or cross_entropy_objective
    sampler = batch_sampler or epoch_batches(samples, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    trace = trace if trace is not None else TrainingTrace()

    theta = model.flat_params().copy()
    current = model.with_flat_params(theta)
    for step in range(cfg.iterations):
        features, labels = sampler(rng, step)
        loss, grads = objective(current, features, labels)
        grad = flatten(grads)
        total_grad = grad
        if extra_penalty is not None:
            penalty, penalty_grad = extra_penalty(theta)
            loss += penalty
            total_grad = grad + penalty_grad

        updated = theta - cfg.learning_rate * total_grad
        if not (np.isfinite(loss) and np.all(np.isfinite(updated))):
            logger.error(f"Non-finite values at step {step}: loss={loss}")
            raise TrainingDivergedError(
                f"Training diverged at step {step}/{cfg.iterations} (loss={loss}, lr={cfg.learning_rate})"
            )
        if on_step is not None:
            on_step(theta, updated, grad)

        trace.losses.append(float(loss))
        theta = updated
        current = model.with_flat_params(theta)

    trace.steps = cfg.iterations
    if trace.losses:
        trace.initial_loss, trace.final_loss = trace.losses[0], trace.losses[-1]
    logger.debug(f"Trained {cfg.iterations} steps: loss {trace.initial_loss:.4f} -> {trace.final_loss:.4f}")
    return current


def numerical_gradient(value_fn: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        step = np.zeros_like(theta)
        step[j] = eps
        grad[j] = (value_fn(theta + step) - value_fn(theta - step)) / (2 * eps)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, 1e-12)."""
    scale = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale
