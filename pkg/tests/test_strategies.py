import numpy as np
import pytest

from cltestbed.data import SampleSet
from cltestbed.exceptions import ConfigError, NotFittedError, ShapeMismatchError, UnknownStrategyError
from cltestbed.generative import GaussianClassModel
from cltestbed.models import (
    DiscriminativeModel,
    cross_entropy_objective,
    epoch_batches,
    flatten,
    gradient_relative_error,
    numerical_gradient,
)
from cltestbed.strategies import (
    EWCState,
    ReplayState,
    SIState,
    StepInfo,
    distill_loss,
    ewc_penalty,
    fisher_diagonal,
    generative_replay_step,
    labels_trick_loss,
    resolve_hyperparams,
    si_penalty,
    si_update,
    within_task_loss,
)


def _grad_error(value_and_grad, theta):
    numeric = numerical_gradient(lambda p: value_and_grad(p)[0], theta)
    return gradient_relative_error(value_and_grad(theta)[1], numeric)


def _through(model, loss_fn):
    def value_and_grad(theta):
        loss, grads = loss_fn(model.with_flat_params(theta))
        return loss, flatten(grads)
    return value_and_grad


class TestResolveHyperparams:
    def test_defaults(self):
        assert resolve_hyperparams("ewc") == {"lambda": 5.0, "fisher_draws": 1}

    def test_override(self):
        assert resolve_hyperparams("si", {"lambda": 3.0})["lambda"] == 3.0

    def test_unknown_strategy(self):
        with pytest.raises(UnknownStrategyError):
            resolve_hyperparams("icarl")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            resolve_hyperparams("none", {"lambda": 1.0})

    @pytest.mark.parametrize("name, params", [
        ("ewc", {"lambda": 0.0}),
        ("distill", {"alpha": 1.5}),
        ("distill", {"temperature": -1.0}),
        ("generative_replay", {"replay_ratio": -0.5}),
        ("generative_replay", {"surrogate": "vae"}),
    ])
    def test_out_of_range(self, name, params):
        with pytest.raises(ConfigError):
            resolve_hyperparams(name, params)


class TestEwc:
    def test_zero_at_anchor(self, rng):
        theta = rng.normal(size=10)
        state = EWCState(3.0).consolidate(theta, rng.uniform(size=10))
        value, grad = ewc_penalty(state, theta)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_zero_fisher(self, rng):
        state = EWCState(3.0).consolidate(rng.normal(size=10), np.zeros(10))
        assert ewc_penalty(state, rng.normal(size=10))[0] == 0.0

    def test_gradient(self, rng):
        state = EWCState(2.0)
        for _ in range(3):
            state.consolidate(rng.normal(size=12), rng.uniform(size=12))
        assert _grad_error(lambda th: ewc_penalty(state, th), rng.normal(size=12)) < 1e-5

    def test_needs_an_anchor(self):
        with pytest.raises(ValueError):
            ewc_penalty(EWCState(1.0), np.zeros(3))

    def test_shape_mismatch(self):
        state = EWCState(1.0).consolidate(np.zeros(3), np.ones(3))
        with pytest.raises(ShapeMismatchError):
            ewc_penalty(state, np.zeros(4))


class TestFisher:
    def test_non_negative(self, small_stream, small_model):
        fisher = fisher_diagonal(small_model, small_stream.tasks[0].train, n_draws=2, seed=0)
        assert fisher.shape == (small_model.num_parameters,)
        assert np.all(fisher >= 0)

    def test_saturated_model_has_no_information(self, small_stream):
        model = DiscriminativeModel.zeros("linear", 4, 6)
        weights = model.flat_params()
        weights[-6:] = [50.0, 0, 0, 0, 0, 0]
        fisher = fisher_diagonal(model.with_flat_params(weights), small_stream.tasks[0].train, seed=0)
        assert fisher.max() < 1e-12

    def test_matches_bernoulli_closed_form(self, rng):
        # Two-class linear model in one dimension: F(W_0) = mean p(1-p) x^2.
        model = DiscriminativeModel.zeros("linear", 1, 2).with_flat_params(np.array([0.8, -0.3, 0.1, 0.0]))
        x = rng.normal(size=(200, 1))
        samples = SampleSet(x, np.zeros(200, dtype=int))
        logits = model.scores(x)
        p = 1.0 / (1.0 + np.exp(logits[:, 1] - logits[:, 0]))
        expected = np.mean(p * (1 - p) * x[:, 0] ** 2)
        fisher = fisher_diagonal(model, samples, n_draws=64, seed=0)
        assert fisher[0] == pytest.approx(expected, rel=0.05)

    def test_empty_samples(self, small_model):
        with pytest.raises(ValueError):
            fisher_diagonal(small_model, SampleSet(np.zeros((0, 4)), []))


class TestSi:
    def test_no_steps_means_no_penalty(self, rng):
        start = rng.normal(size=6)
        state = SIState(1.0, 0.1, start).consolidate(start + 1.0)
        np.testing.assert_array_equal(state.importance, 0.0)
        assert si_penalty(state, rng.normal(size=6))[0] == 0.0

    def test_gradient_step_accumulates_non_negative_omega(self, rng):
        theta = rng.normal(size=6)
        grad = rng.normal(size=6)
        lr = 0.1
        state = si_update(SIState(1.0, 0.1, theta), StepInfo(theta, theta - lr * grad, grad))
        np.testing.assert_allclose(state.omega, lr * grad ** 2)

    def test_importance_is_clamped(self):
        state = SIState(1.0, 0.1, np.zeros(2))
        state.omega = np.array([-1.0, 2.0])
        state.consolidate(np.ones(2))
        np.testing.assert_allclose(state.importance, [0.0, 2.0 / 1.1])

    def test_penalty_gradient(self, rng):
        state = SIState(2.5, 0.1, rng.normal(size=8))
        state.omega = rng.uniform(size=8)
        state.consolidate(rng.normal(size=8))
        assert _grad_error(lambda th: si_penalty(state, th), rng.normal(size=8)) < 1e-5

    def test_zero_before_consolidation(self, rng):
        value, grad = si_penalty(SIState(1.0, 0.1, np.zeros(3)), rng.normal(size=3))
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            si_update(SIState(1.0, 0.1, np.zeros(3)), StepInfo(np.zeros(2), np.zeros(2), np.zeros(2)))


@pytest.fixture
def batch(rng):
    return rng.normal(size=(6, 3)), np.array([0, 1, 2, 3, 2, 3])


class TestDistillLoss:
    def test_student_equal_to_teacher_has_no_kl(self, batch):
        model = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=0)
        loss, _ = distill_loss(model, model, *batch, temperature=2.0, alpha=0.5, old_class_ids=[0, 1])
        ce, _ = cross_entropy_objective(model, *batch)
        assert loss == pytest.approx(0.5 * ce, abs=1e-12)

    def test_alpha_one_is_cross_entropy(self, batch):
        teacher = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=1)
        student = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=2)
        loss, grads = distill_loss(teacher, student, *batch, temperature=2.0, alpha=1.0, old_class_ids=[0, 1])
        ce, ce_grads = cross_entropy_objective(student, *batch)
        assert loss == pytest.approx(ce)
        np.testing.assert_allclose(flatten(grads), flatten(ce_grads), atol=1e-12)

    def test_first_task_is_plain_cross_entropy(self, batch):
        teacher = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=1)
        student = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=2)
        loss, _ = distill_loss(teacher, student, *batch, temperature=2.0, alpha=0.3, old_class_ids=[])
        assert loss == pytest.approx(cross_entropy_objective(student, *batch)[0])

    def test_gradient(self, batch):
        teacher = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=1)
        student = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=2)
        value_and_grad = _through(student, lambda m: distill_loss(teacher, m, *batch, 2.0, 0.5, [0, 1]))
        assert _grad_error(value_and_grad, student.flat_params()) < 1e-5

    def test_old_classes_in_range(self, batch):
        model = DiscriminativeModel.initialize("linear", 3, 4, seed=0)
        with pytest.raises(ValueError):
            distill_loss(model, model, *batch, temperature=2.0, alpha=0.5, old_class_ids=[4])


class TestLabelsTrick:
    def test_uniform_logits_two_classes(self):
        model = DiscriminativeModel.zeros("linear", 3, 4)
        loss, _ = labels_trick_loss(model, np.ones((2, 3)), np.array([2, 3]), [2, 3])
        assert loss == pytest.approx(np.log(2))

    def test_single_task_equals_cross_entropy(self, batch):
        model = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=0)
        loss, grads = labels_trick_loss(model, *batch, [0, 1, 2, 3])
        ce, ce_grads = cross_entropy_objective(model, *batch)
        assert loss == pytest.approx(ce)
        np.testing.assert_allclose(flatten(grads), flatten(ce_grads), atol=1e-12)

    def test_other_rows_get_no_gradient(self, rng):
        model = DiscriminativeModel.initialize("linear", 3, 4, seed=0)
        grads = labels_trick_loss(model, rng.normal(size=(4, 3)), np.array([2, 3, 3, 2]), [2, 3])[1]
        np.testing.assert_array_equal(grads[0][:2], 0.0)
        np.testing.assert_array_equal(grads[1][:2], 0.0)

    def test_gradient(self, rng):
        model = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=0)
        features, labels = rng.normal(size=(4, 3)), np.array([2, 3, 3, 2])
        value_and_grad = _through(model, lambda m: labels_trick_loss(m, features, labels, [2, 3]))
        assert _grad_error(value_and_grad, model.flat_params()) < 1e-5

    def test_label_outside_task(self, batch):
        model = DiscriminativeModel.initialize("linear", 3, 4, seed=0)
        with pytest.raises(ValueError):
            labels_trick_loss(model, *batch, [2, 3])


class TestWithinTaskLoss:
    def test_one_task_is_cross_entropy(self, batch):
        model = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=0)
        loss, _ = within_task_loss(model, *batch, classes_per_task=4)
        assert loss == pytest.approx(cross_entropy_objective(model, *batch)[0])

    def test_gradient(self, batch):
        model = DiscriminativeModel.initialize("mlp", 3, 4, 5, seed=0)
        value_and_grad = _through(model, lambda m: within_task_loss(m, *batch, classes_per_task=2))
        assert _grad_error(value_and_grad, model.flat_params()) < 1e-5


class TestGenerativeReplay:
    @pytest.fixture
    def replay(self, small_stream):
        state = ReplayState(GaussianClassModel(small_stream.feature_dim, num_classes=small_stream.num_classes))
        first = small_stream.tasks[0]
        fitted = GaussianClassModel(small_stream.feature_dim)
        for r in first.class_ids:
            fitted.fit_class(first.train.with_classes([r]), r)
        return state.remember(first, fitted)

    def test_batches_mix_real_and_replayed(self, replay, small_stream, rng):
        sampler = generative_replay_step(replay, small_stream.tasks[1], replay_ratio=1.0, seed=0, batch_size=10)
        features, labels = sampler(rng, 0)
        assert len(labels) == 20
        assert set(labels[:10].tolist()) <= {2, 3}
        assert set(labels[10:].tolist()) <= {0, 1}

    def test_zero_ratio_is_plain_training(self, replay, small_stream):
        task = small_stream.tasks[1]
        replayed = generative_replay_step(replay, task, replay_ratio=0.0, seed=0, batch_size=10)
        plain = epoch_batches(task.train, 10)
        a_rng, b_rng = np.random.default_rng(5), np.random.default_rng(5)
        for step in range(8):
            a, b = replayed(a_rng, step), plain(b_rng, step)
            np.testing.assert_array_equal(a[0], b[0])
            np.testing.assert_array_equal(a[1], b[1])

    def test_proportional_ratio(self, replay, small_stream, rng):
        sampler = generative_replay_step(replay, small_stream.tasks[1], replay_ratio=None, seed=0, batch_size=10)
        assert len(sampler(rng, 0)[1]) == 20

    def test_replay_is_seeded(self, replay, small_stream):
        draws = []
        for _ in range(2):
            sampler = generative_replay_step(replay, small_stream.tasks[1], 1.0, seed=4, batch_size=10)
            draws.append(sampler(np.random.default_rng(0), 0)[0].tobytes())
        assert draws[0] == draws[1]

    def test_unfitted_past_class(self, small_stream):
        state = ReplayState(GaussianClassModel(small_stream.feature_dim), past_classes=[0])
        with pytest.raises(NotFittedError):
            generative_replay_step(state, small_stream.tasks[1], 1.0, seed=0, batch_size=10)
