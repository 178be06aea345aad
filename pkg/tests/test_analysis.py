import numpy as np
import pytest

from cltestbed.analysis import (
    LossMatrix,
    Quadratic1D,
    block_report,
    cf_record,
    incompatibility_check,
    inter_task_pair_accuracy,
    intra_task_pair_accuracy,
    offdiag_implication_holds,
    pairwise_matrix,
    partition_residual,
    tc_score,
    total_cf,
)
from cltestbed.data import desk_blob_spec, make_blob_stream
from cltestbed.exceptions import ConfigError
from cltestbed.models import ZERO_ONE, DiscriminativeModel, empirical_loss


class FixedScorer:
    """Scores every input with the same logit row."""

    def __init__(self, row):
        self.row = np.asarray(row, dtype=float)

    def scores(self, features):
        return np.tile(self.row, (np.asarray(features).shape[0], 1))


class TestPairwiseMatrix:
    @pytest.mark.parametrize("arch", ["linear", "mlp"])
    def test_partition_entries_sum_to_empirical_loss(self, arch, small_stream):
        model = DiscriminativeModel.initialize(arch, 4, 6, 8, seed=3)
        model = model.with_flat_params(model.flat_params() * 4.0)
        matrix = pairwise_matrix(model, small_stream, mode="partition")
        assert abs(matrix.total() - empirical_loss(model, small_stream.test_set)) < 1e-12
        assert partition_residual(model, small_stream) < 1e-12

    def test_diagonal_is_undefined(self, small_stream, small_model):
        matrix = pairwise_matrix(small_model, small_stream, mode="restricted_pair")
        assert np.all(np.isnan(np.diag(matrix.entries)))
        assert matrix.defined.sum() == 6 * 5

    def test_uniform_scorer_restricted_pairs(self, small_stream):
        matrix = pairwise_matrix(FixedScorer(np.zeros(6)), small_stream, mode="restricted_pair")
        # Equal class sizes: each ordered entry holds half of ln 2.
        off = ~np.eye(6, dtype=bool)
        np.testing.assert_allclose(matrix.entries[off], np.log(2) / 2)

    @pytest.mark.parametrize("mode", ["partition", "restricted_pair"])
    def test_pair_order_does_not_matter(self, mode, small_stream, small_model, rng):
        pairs = [(k, l) for k in range(6) for l in range(6) if k != l]
        shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
        forward = pairwise_matrix(small_model, small_stream, mode, pairs=pairs)
        backward = pairwise_matrix(small_model, small_stream, mode, pairs=pairs[::-1])
        scrambled = pairwise_matrix(small_model, small_stream, mode, pairs=shuffled)
        np.testing.assert_array_equal(forward.entries, backward.entries)
        np.testing.assert_array_equal(forward.entries, scrambled.entries)

    def test_zero_one_ties_go_to_lower_index(self, small_stream):
        matrix = pairwise_matrix(FixedScorer(np.zeros(6)), small_stream, "restricted_pair", loss=ZERO_ONE)
        # Class-0 samples always win a tie against class 1; class-1 samples always lose it.
        assert matrix.entries[0, 1] == 0.0
        assert matrix.entries[1, 0] == pytest.approx(0.5)

    def test_skip_offdiag_leaves_inter_task_entries_undefined(self, small_stream, small_model):
        matrix = pairwise_matrix(small_model, small_stream, "restricted_pair", skip_offdiag=True)
        report = block_report(matrix)
        assert report.defined_counts.sum() == 3 * 2
        assert report.offdiag_total == 0.0

    def test_unknown_mode(self, small_stream, small_model):
        with pytest.raises(ConfigError):
            pairwise_matrix(small_model, small_stream, mode="blockwise")

    def test_heatmap_frame(self, small_stream, small_model):
        frame = pairwise_matrix(small_model, small_stream, "partition").to_frame()
        assert list(frame.columns) == ["k", "l", "value"]
        assert len(frame) == 30


class TestBlockReport:
    def test_blocks_sum_to_matrix_total(self, small_stream, small_model):
        matrix = pairwise_matrix(small_model, small_stream, "partition")
        report = block_report(matrix)
        assert report.diag_total + report.offdiag_total == pytest.approx(matrix.total(), abs=1e-12)
        assert report.defined_counts[0, 0] == 2
        assert report.defined_counts[0, 1] == 4
        assert report.expected_offdiag_entries(2) == 24

    def test_single_task_has_no_offdiag(self):
        stream = make_blob_stream(desk_blob_spec(num_classes=3, feature_dim=2), 1, 3)
        model = DiscriminativeModel.initialize("linear", 2, 3, seed=0)
        report = block_report(pairwise_matrix(model, stream, "partition"))
        assert report.offdiag_total == 0.0
        assert tc_score(report) == 0.0

    def test_layout_must_match(self):
        with pytest.raises(ValueError):
            LossMatrix(np.zeros((3, 3)), "partition", "cross_entropy", 2, 2)


class TestCfRecord:
    def test_deltas(self):
        history = [np.array([0.2]), np.array([0.5, 0.1]), np.array([0.5, 0.3, 0.1])]
        records = cf_record(history)
        assert [r.task for r in records] == [0, 1]
        assert records[0].delta == pytest.approx(0.3)
        assert records[1].delta == pytest.approx(0.2)
        assert all(r.forgot for r in records)
        assert total_cf(records) == pytest.approx(0.5)

    def test_unchanged_block_does_not_forget(self):
        records = cf_record([np.array([0.4]), np.array([0.4, 0.2])])
        assert records[0].delta == 0.0
        assert not records[0].forgot


class TestOffdiagImplication:
    @pytest.mark.parametrize(
        "offdiag,loss,holds",
        [
            (2.0, 3.0, True),    # worse off-diagonal, worse loss
            (2.0, 0.5, False),   # worse off-diagonal, better loss
            (0.5, 0.5, True),    # better off-diagonal: nothing to imply
            (1.0 + 1e-9, 0.5, True),  # within tolerance
        ],
    )
    def test_truth_table(self, offdiag, loss, holds):
        assert offdiag_implication_holds(offdiag, loss, 1.0, 1.0) is holds

    def test_tolerance_is_configurable(self):
        assert offdiag_implication_holds(1.05, 0.5, 1.0, 1.0, tol=0.1)
        assert not offdiag_implication_holds(1.05, 0.5, 1.0, 1.0, tol=0.01)


class TestPairAccuracy:
    def test_separable_model_is_perfect(self, small_stream):
        class CenterScorer:
            def scores(self, features):
                return -np.linalg.norm(features[:, None] - small_stream.source.centers[None], axis=2)

        assert inter_task_pair_accuracy(CenterScorer(), small_stream) == 1.0
        assert intra_task_pair_accuracy(CenterScorer(), small_stream) == 1.0

    def test_single_class_tasks_have_no_intra_pairs(self):
        stream = make_blob_stream(desk_blob_spec(num_classes=3, feature_dim=2), 3, 1)
        assert np.isnan(intra_task_pair_accuracy(FixedScorer(np.zeros(3)), stream))


class TestIncompatibility:
    def test_distinct_minimizers(self):
        result = incompatibility_check(Quadratic1D(0.0, 1.0), Quadratic1D(2.0, 3.0))
        assert result.x_star == pytest.approx(1.5)
        assert result.is_incompatible and result.minimizer_distinct
        assert result.g_prime_at_x_f != 0.0 and result.f_prime_at_x_g != 0.0

    def test_equal_minimizers(self):
        result = incompatibility_check(Quadratic1D(1.0, 1.0), Quadratic1D(1.0, 5.0))
        assert result.x_star == 1.0
        assert not result.is_incompatible and not result.minimizer_distinct

    @pytest.mark.parametrize("a,curvatures", [(0.1, (0.3, 0.7)), (-3.7, (0.1, 9.9)), (2.2, (7.0, 0.3))])
    def test_equal_minimizers_with_unequal_curvatures(self, a, curvatures):
        result = incompatibility_check(Quadratic1D(a, curvatures[0]), Quadratic1D(a, curvatures[1]))
        assert result.x_star == a
        assert not result.minimizer_distinct

    def test_curvature_must_be_positive(self):
        with pytest.raises(ValueError):
            Quadratic1D(0.0, 0.0)
