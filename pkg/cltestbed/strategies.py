"""
Class-incremental training strategies: regularizers, alternative losses and
replay, plus the registry of strategy names and their hyperparameters.

Regularizers work on flat parameter vectors (see ``DiscriminativeModel.flat_params``)
and plug into the trainer through its ``extra_penalty`` hook; alternative
losses plug in as ``objective``; replay plugs in as ``batch_sampler``.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .data import SampleSet, Task
from .exceptions import ConfigError, NotFittedError, ShapeMismatchError, UnknownStrategyError
from .generative import GaussianClassModel
from .models import (
    BatchSampler,
    DiscriminativeModel,
    Gradients,
    Objective,
    cross_entropy_objective,
    cross_entropy_per_sample,
    epoch_batches,
)

logger = logging.getLogger(__name__)

STRATEGY_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "none": {},
    "joint": {},
    "ewc": {"lambda": 5.0, "fisher_draws": 1},
    "si": {"lambda": 1.0, "damping": 0.1},
    "distill": {"temperature": 2.0, "alpha": 0.5},
    "labels_trick": {},
    "generative_replay": {"replay_ratio": None, "surrogate": "fitted", "bias_sigmas": 2.0},
    "generative_classifier": {"covariance": "diagonal_per_class"},
    "slda": {"shrinkage": 0.01},
}
GENERATIVE_STRATEGIES = ("generative_classifier", "slda")
SURROGATES = ("fitted", "oracle", "biased")


def resolve_hyperparams(name: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Merge user hyperparameters over a strategy's defaults and validate them.

    Raises:
        UnknownStrategyError: for an unregistered strategy name
        ConfigError: for unknown keys or out-of-range values
    """
    if name not in STRATEGY_DEFAULTS:
        raise UnknownStrategyError(f"Unknown strategy '{name}'. Supported: {sorted(STRATEGY_DEFAULTS)}")
    params = dict(STRATEGY_DEFAULTS[name])
    extra = set(overrides or {}) - set(params)
    if extra:
        raise ConfigError(f"Strategy '{name}' does not take {sorted(extra)}")
    params.update(overrides or {})

    for key in ("lambda", "temperature", "damping", "bias_sigmas"):
        if key in params and not (isinstance(params[key], (int, float)) and params[key] > 0):
            raise ConfigError(f"{name}.{key} must be positive, got {params[key]}")
    if "alpha" in params and not 0 < params["alpha"] <= 1:
        raise ConfigError(f"{name}.alpha must be in (0, 1], got {params['alpha']}")
    if "fisher_draws" in params and int(params["fisher_draws"]) < 1:
        raise ConfigError(f"{name}.fisher_draws must be at least 1, got {params['fisher_draws']}")
    if params.get("replay_ratio") is not None and params["replay_ratio"] < 0:
        raise ConfigError(f"{name}.replay_ratio must be non-negative, got {params['replay_ratio']}")
    if "surrogate" in params and params["surrogate"] not in SURROGATES:
        raise ConfigError(f"{name}.surrogate must be one of {SURROGATES}, got {params['surrogate']}")
    if "shrinkage" in params and not 0 <= params["shrinkage"] < 1:
        raise ConfigError(f"{name}.shrinkage must be in [0, 1), got {params['shrinkage']}")
    return params


# --- EWC -------------------------------------------------------------------

@dataclass
class EWCState:
    strength: float
    anchors: List[np.ndarray] = field(default_factory=list)
    fishers: List[np.ndarray] = field(default_factory=list)

    def consolidate(self, theta: np.ndarray, fisher: np.ndarray) -> "EWCState":
        if theta.shape != fisher.shape:
            raise ShapeMismatchError(f"Anchor {theta.shape} and Fisher {fisher.shape} differ")
        self.anchors.append(np.array(theta, dtype=np.float64))
        self.fishers.append(np.array(fisher, dtype=np.float64))
        return self


def ewc_penalty(state: EWCState, theta: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    (lambda / 2) * sum over tasks and parameters of F_j * (theta_j - anchor_j)^2.

    Returns:
        (penalty value, flat gradient)
    """
    if not state.anchors:
        raise ValueError("EWC penalty needs at least one stored anchor")
    theta = np.asarray(theta, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(theta)
    for anchor, fisher in zip(state.anchors, state.fishers):
        if anchor.shape != theta.shape:
            raise ShapeMismatchError(f"Parameters {theta.shape} do not match anchor {anchor.shape}")
        diff = theta - anchor
        value += 0.5 * state.strength * float(np.sum(fisher * diff ** 2))
        grad += state.strength * fisher * diff
    return value, grad


def fisher_diagonal(
    model: DiscriminativeModel,
    samples: SampleSet,
    n_draws: int = 1,
    seed: int = 0,
    chunk_size: int = 256,
) -> np.ndarray:
    """
    Diagonal Fisher information with labels drawn from the model's own predictive distribution.

    Args:
        model: Trained model
        samples: Inputs to average over
        n_draws: Label draws per sample
        seed: Seed for the label draws
        chunk_size: Samples per vectorized chunk

    Returns:
        Flat non-negative array, one entry per parameter
    """
    if len(samples) == 0:
        raise ValueError("Fisher needs at least one sample")
    rng = np.random.default_rng(seed)
    total = np.zeros(model.num_parameters)
    for start in range(0, len(samples), chunk_size):
        x = samples.features[start:start + chunk_size]
        probs = softmax(model.scores(x), axis=1)
        for _ in range(n_draws):
            cumulative = np.cumsum(probs, axis=1)
            u = rng.random((x.shape[0], 1))
            drawn = np.minimum((u > cumulative).sum(axis=1), probs.shape[1] - 1)
            logit_grads = probs.copy()
            logit_grads[np.arange(x.shape[0]), drawn] -= 1.0
            total += np.sum(model.per_sample_gradients(x, logit_grads) ** 2, axis=0)
    return total / (len(samples) * n_draws)


# --- SI --------------------------------------------------------------------

@dataclass(frozen=True)
class StepInfo:
    before: np.ndarray
    after: np.ndarray
    grad: np.ndarray


@dataclass
class SIState:
    """
    Path-integral importances.

    ``omega`` accumulates -grad * delta over the current task's steps;
    ``importance`` holds the consolidated, non-negative Omega; ``anchor`` is
    the parameter vector at the end of the last consolidated task.
    """

    strength: float
    damping: float
    task_start: np.ndarray
    omega: Optional[np.ndarray] = None
    importance: Optional[np.ndarray] = None
    anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        self.task_start = np.array(self.task_start, dtype=np.float64)
        if self.omega is None:
            self.omega = np.zeros_like(self.task_start)
        if self.importance is None:
            self.importance = np.zeros_like(self.task_start)

    def consolidate(self, theta_end: np.ndarray) -> "SIState":
        theta_end = np.asarray(theta_end, dtype=np.float64)
        if theta_end.shape != self.task_start.shape:
            raise ShapeMismatchError(f"Parameters {theta_end.shape} do not match SI state {self.task_start.shape}")
        moved = theta_end - self.task_start
        self.importance = np.maximum(self.importance + self.omega / (moved ** 2 + self.damping), 0.0)
        self.anchor = theta_end.copy()
        self.task_start = theta_end.copy()
        self.omega = np.zeros_like(theta_end)
        return self


def si_update(state: SIState, step: StepInfo) -> SIState:
    if not (step.before.shape == step.after.shape == step.grad.shape == state.omega.shape):
        raise ShapeMismatchError("SI step info shapes do not match the tracked parameters")
    state.omega += -step.grad * (step.after - step.before)
    return state


def si_penalty(state: SIState, theta: np.ndarray) -> Tuple[float, np.ndarray]:
    """lambda * sum_j Omega_j * (theta_j - anchor_j)^2 and its gradient; zero before any consolidation."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != state.importance.shape:
        raise ShapeMismatchError(f"Parameters {theta.shape} do not match SI state {state.importance.shape}")
    if state.anchor is None:
        return 0.0, np.zeros_like(theta)
    diff = theta - state.anchor
    value = state.strength * float(np.sum(state.importance * diff ** 2))
    return value, 2.0 * state.strength * state.importance * diff


# --- distillation ------------------------------------------------------------

def distill_loss(
    teacher: DiscriminativeModel,
    student: DiscriminativeModel,
    features: np.ndarray,
    labels: np.ndarray,
    temperature: float,
    alpha: float,
    old_class_ids: Sequence[int],
) -> Tuple[float, Gradients]:
    """
    alpha * CE(student, labels) + (1 - alpha) * tau^2 * KL(teacher || student) on old-class logits.

    With no old classes (first task) this is plain cross-entropy.

    Returns:
        (loss, gradients aligned with ``student.parameters()``)
    """
    old = np.asarray(list(old_class_ids), dtype=np.int64)
    if old.size == 0:
        return cross_entropy_objective(student, features, labels)
    if old.min() < 0 or old.max() >= student.num_classes:
        raise ValueError(f"Old class ids {old.tolist()} outside [0, {student.num_classes})")

    logits, cache = student.forward(features)
    n = labels.shape[0]
    probs = softmax(logits, axis=1)
    ce = float(np.mean(cross_entropy_per_sample(logits, labels)))

    teacher_log = log_softmax(teacher.scores(features)[:, old] / temperature, axis=1)
    student_log = log_softmax(logits[:, old] / temperature, axis=1)
    teacher_p = np.exp(teacher_log)
    kl = float(np.mean(np.sum(teacher_p * (teacher_log - student_log), axis=1)))

    grad = alpha * probs
    grad[np.arange(n), labels] -= alpha
    grad[:, old] += (1.0 - alpha) * temperature * (np.exp(student_log) - teacher_p)
    loss = alpha * ce + (1.0 - alpha) * temperature ** 2 * kl
    return loss, student.backward(cache, grad / n)


def distillation_objective(teacher: DiscriminativeModel, temperature: float, alpha: float,
                           old_class_ids: Sequence[int]) -> Objective:
    def objective(model, features, labels):
        return distill_loss(teacher, model, features, labels, temperature, alpha, old_class_ids)
    return objective


# --- labels trick ------------------------------------------------------------

def labels_trick_loss(
    model: DiscriminativeModel,
    features: np.ndarray,
    labels: np.ndarray,
    current_task_class_ids: Sequence[int],
) -> Tuple[float, Gradients]:
    """Cross-entropy over the current task's logits only; other output rows get no gradient."""
    classes = np.asarray(list(current_task_class_ids), dtype=np.int64)
    position = {int(c): i for i, c in enumerate(classes)}
    stray = sorted(set(labels.tolist()) - set(position))
    if stray:
        raise ValueError(f"Labels {stray} are outside the current task classes {classes.tolist()}")

    logits, cache = model.forward(features)
    sub = logits[:, classes]
    target = np.array([position[int(y)] for y in labels], dtype=np.int64)
    n = labels.shape[0]
    loss = float(np.mean(cross_entropy_per_sample(sub, target)))

    sub_grad = softmax(sub, axis=1)
    sub_grad[np.arange(n), target] -= 1.0
    grad = np.zeros_like(logits)
    grad[:, classes] = sub_grad / n
    return loss, model.backward(cache, grad)


def labels_trick_objective(class_ids: Sequence[int]) -> Objective:
    def objective(model, features, labels):
        return labels_trick_loss(model, features, labels, class_ids)
    return objective


def within_task_loss(
    model: DiscriminativeModel,
    features: np.ndarray,
    labels: np.ndarray,
    classes_per_task: int,
) -> Tuple[float, Gradients]:
    """
    Mean cross-entropy of every sample over its own task's logits.

    This is the labels-trick loss applied to all tasks at once: only the
    diagonal task blocks of the loss matrix are optimized.
    """
    logits, cache = model.forward(features)
    n, width = logits.shape
    if width % classes_per_task:
        raise ShapeMismatchError(f"{width} logits do not split into tasks of {classes_per_task}")
    rows = np.arange(n)
    task = labels // classes_per_task
    target = labels % classes_per_task
    blocks = logits.reshape(n, width // classes_per_task, classes_per_task)
    own = blocks[rows, task]
    loss = float(np.mean(cross_entropy_per_sample(own, target)))

    own_grad = softmax(own, axis=1)
    own_grad[rows, target] -= 1.0
    grad = np.zeros_like(blocks)
    grad[rows, task] = own_grad / n
    return loss, model.backward(cache, grad.reshape(n, width))


# --- generative replay ---------------------------------------------------------

@dataclass
class ReplayState:
    """Replay densities for every class seen in earlier tasks."""

    densities: GaussianClassModel
    past_classes: List[int] = field(default_factory=list)

    def remember(self, task: Task, surrogate: GaussianClassModel) -> "ReplayState":
        for r in task.class_ids:
            if r not in surrogate.classes:
                raise NotFittedError(f"Surrogate density has no class {r}")
            self.densities.classes[r] = surrogate.copy().classes[r]
            self.past_classes.append(int(r))
        return self


def generative_replay_step(
    state: ReplayState,
    task: Task,
    replay_ratio: Optional[float],
    seed: int,
    batch_size: int,
) -> BatchSampler:
    """
    Minibatch sampler mixing the task's real samples with replayed past classes.

    Every minibatch holds up to ``batch_size`` real samples plus
    ``round(replay_ratio * real)`` replayed ones with labels drawn uniformly
    over past classes. ``replay_ratio=None`` replays in proportion to the
    number of past classes relative to the task's classes.

    Returns:
        Sampler for ``sgd_train(batch_sampler=...)``
    """
    for r in state.past_classes:
        if r not in state.densities.classes:
            raise NotFittedError(f"Past class {r} has no replay density")
    ratio = len(state.past_classes) / len(task.class_ids) if replay_ratio is None else float(replay_ratio)
    real = epoch_batches(task.train, batch_size)
    if ratio == 0 or not state.past_classes:
        return real

    replay_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(task.task_id)])))
    past = np.asarray(state.past_classes, dtype=np.int64)

    def sample(rng: np.random.Generator, step: int) -> Tuple[np.ndarray, np.ndarray]:
        features, labels = real(rng, step)
        n_replay = int(round(ratio * labels.shape[0]))
        if n_replay == 0:
            return features, labels
        drawn = replay_rng.choice(past, size=n_replay)
        parts_x, parts_y = [features], [labels]
        for r in np.unique(drawn):
            count = int(np.sum(drawn == r))
            parts_x.append(state.densities.sample(int(r), count, replay_rng))
            parts_y.append(np.full(count, r, dtype=np.int64))
        return np.concatenate(parts_x), np.concatenate(parts_y)

    return sample
