"""Unit tests for scoring and masking."""
import numpy as np
import pytest

from spam_prune.curvature import DiagCurvature, ggn_diag
from spam_prune.errors import LayerCollapseError, StalenessError, StructuralError
from spam_prune.laplace import build_posterior, posterior_diag
from spam_prune.likelihood import mean_nll_and_grad
from spam_prune.network import Network
from spam_prune.pruning import (
    PruneMask,
    ScoreVector,
    apply_mask,
    grasp_scores,
    hvp_fd,
    make_mask,
    prune_count,
    score,
    score_structured,
    scoring_batch,
)
from spam_prune.tensor_core import make_rng


def _scores(values, criterion="test"):
    return ScoreVector(values=np.asarray(values, dtype=float), criterion=criterion)


class TestPruneCount:
    """Test the floor rule."""

    @pytest.mark.parametrize(
        "sparsity,n,expected",
        [(0.3, 10, 3), (0.7, 10, 7), (0.29, 100, 29), (0.0, 50, 0), (0.99, 27, 26)],
    )
    def test_floor(self, sparsity, n, expected):
        """Test ⌊s·n⌋ without representation error."""
        assert prune_count(sparsity, n) == expected


class TestScores:
    """Test criteria."""

    def test_opd(self, small_net, small_batch, categorical):
        """Test OPD equals the posterior diagonal times θ²."""
        est = ggn_diag(small_net, categorical, small_batch)
        ps = build_posterior(small_net, est, np.full(small_net.num_params, 2.0))
        result = score("opd", small_net, ps=ps)
        np.testing.assert_allclose(result.values, posterior_diag(ps) * small_net.params**2)
        assert result.metadata["snapshot_id"] == ps.snapshot_id

    def test_opd_rejects_stale_posterior(self, small_net):
        """Test OPD refuses a posterior of other parameters."""
        ps = build_posterior(
            small_net, DiagCurvature(np.zeros(small_net.num_params)), np.ones(small_net.num_params)
        )
        small_net.params[2] += 1.0
        with pytest.raises(StalenessError):
            score("opd", small_net, ps=ps)

    def test_opd_needs_posterior(self, small_net):
        """Test OPD without a posterior raises."""
        with pytest.raises(StructuralError):
            score("opd", small_net)

    def test_magnitude(self, small_net):
        """Test magnitude scores are |θ|."""
        np.testing.assert_array_equal(score("magnitude", small_net).values, np.abs(small_net.params))

    def test_random_is_seeded(self, small_net):
        """Test random scores reproduce under a seed."""
        first = score("random", small_net, rng=make_rng(3)).values
        again = score("random", small_net, rng=make_rng(3)).values
        np.testing.assert_array_equal(first, again)

    def test_snip(self, small_net, small_batch, categorical):
        """Test SNIP scores are |θ · ∂L/∂θ|."""
        x, y = small_batch
        _, grad = mean_nll_and_grad(small_net, categorical, x, y)
        result = score("snip", small_net, categorical, small_batch)
        np.testing.assert_allclose(result.values, np.abs(small_net.params * grad))

    def test_hvp_on_quadratic(self, rng):
        """Test the finite-difference HVP is exact for a quadratic."""
        b = rng.standard_normal((4, 4))
        hess = b @ b.T
        theta = rng.standard_normal(4)
        v = rng.standard_normal(4)
        np.testing.assert_allclose(hvp_fd(lambda t: hess @ t, theta, v), hess @ v, rtol=1e-6)

    def test_grasp_on_quadratic(self, rng):
        """Test GraSP scores |θ ⊙ H g| on a quadratic loss."""
        b = rng.standard_normal((5, 5))
        hess = b @ b.T
        theta = rng.standard_normal(5)
        expected = np.abs(theta * (hess @ (hess @ theta)))
        np.testing.assert_allclose(grasp_scores(theta, lambda t: hess @ t), expected, rtol=1e-6)

    def test_hvp_matches_dense_hessian(self, small_batch, categorical, rng):
        """Test the finite-difference HVP against a dense Hessian of the loss."""
        net = Network.from_dims([2, 3, 3], "tanh", seed=3)
        x, y = small_batch

        def grad_fn(theta):
            return mean_nll_and_grad(net.with_params(theta), categorical, x, y)[1]

        theta = net.params.copy()
        eps = 1e-5
        dense = np.stack(
            [(grad_fn(theta + eps * e) - grad_fn(theta - eps * e)) / (2 * eps) for e in np.eye(net.num_params)],
            axis=1,
        )
        dense = 0.5 * (dense + dense.T)
        for _ in range(3):
            v = rng.standard_normal(net.num_params)
            np.testing.assert_allclose(
                hvp_fd(grad_fn, theta, v), dense @ v, rtol=1e-3, atol=1e-5 * np.linalg.norm(v)
            )

    def test_grasp_dispatch(self, small_net, small_batch, categorical):
        """Test GraSP through dispatch returns finite nonnegative scores."""
        values = score("grasp", small_net, categorical, small_batch).values
        assert values.shape == (small_net.num_params,)
        assert np.all(values >= 0.0)

    def test_synflow_single_layer(self, rng):
        """Test SynFlow reduces to |θ| for one linear layer."""
        net = Network.from_dims([3, 2], "relu")
        net.params[:] = rng.standard_normal(net.num_params)
        np.testing.assert_allclose(score("synflow", net).values, np.abs(net.params))

    def test_unknown_criterion(self, small_net):
        """Test unknown criteria raise."""
        with pytest.raises(StructuralError):
            score("taylor", small_net)

    def test_structured_sums_units(self, small_net):
        """Test unit scores sum the incoming row and bias."""
        values = np.arange(small_net.num_params, dtype=float)
        unit = score_structured(_scores(values), small_net, exempt_last=True)
        assert unit.units == [(0, u) for u in range(4)]
        expected = values[small_net.structure_params(0, 1)].sum()
        assert unit.values[1] == pytest.approx(expected)

    def test_scoring_batch(self, blobs):
        """Test the scoring batch is a seeded subset."""
        x, y = scoring_batch(blobs[0], make_rng(0), 16)
        assert x.shape == (16, 3)
        again, _ = scoring_batch(blobs[0], make_rng(0), 16)
        np.testing.assert_array_equal(x, again)


class TestUnstructuredMask:
    """Test parameter-level masks."""

    def test_ties_prune_lower_index(self, small_net):
        """Test equal scores prune the lowest indices first."""
        mask = make_mask(small_net, _scores(np.ones(small_net.num_params)), 0.5)
        expected = np.ones(small_net.num_params)
        expected[:13] = 0.0
        np.testing.assert_array_equal(mask.bits, expected)

    @pytest.mark.parametrize("scope", ["global", "uniform"])
    def test_positive_scaling_keeps_mask(self, small_net, rng, scope):
        """Test multiplying every score by a positive constant selects the same entries."""
        values = rng.random(small_net.num_params)
        base = make_mask(small_net, _scores(values), 0.4, scope=scope)
        for factor in (1e-3, 7.0, 1e6):
            scaled = make_mask(small_net, _scores(values * factor), 0.4, scope=scope)
            np.testing.assert_array_equal(scaled.bits, base.bits)

    def test_uniform_per_layer_counts(self, small_net, rng):
        """Test the uniform scope prunes ⌊s·n_l⌋ in every layer."""
        mask = make_mask(small_net, _scores(rng.random(small_net.num_params)), 0.5, scope="uniform")
        assert np.sum(mask.bits[small_net.layer_params(0)] == 0) == 6
        assert np.sum(mask.bits[small_net.layer_params(1)] == 0) == 7

    def test_exempt_last(self, small_net, rng):
        """Test the output layer is untouched when exempt."""
        mask = make_mask(small_net, _scores(rng.random(small_net.num_params)), 0.9, exempt_last=True)
        assert np.all(mask.bits[small_net.layer_params(1)] == 1.0)
        assert mask.num_pruned == prune_count(0.9, 12)

    def test_current_mask_stays_pruned(self, small_net, rng):
        """Test a later mask keeps earlier pruned entries."""
        first = make_mask(small_net, _scores(rng.random(small_net.num_params)), 0.3)
        second = make_mask(
            small_net, _scores(rng.random(small_net.num_params)), 0.6, current=first
        )
        assert np.all(second.bits[first.bits == 0] == 0)
        assert second.num_pruned == prune_count(0.6, small_net.num_params)

    def test_empty_layer_warning(self, small_net):
        """Test losing a whole layer is reported as a warning."""
        values = np.ones(small_net.num_params)
        values[small_net.layer_params(1)] = 0.0
        mask = make_mask(small_net, _scores(values), 0.6)
        assert mask.warnings

    @pytest.mark.parametrize("target", [-0.1, 1.0])
    def test_invalid_target(self, small_net, target):
        """Test targets outside [0, 1) raise."""
        with pytest.raises(StructuralError):
            make_mask(small_net, _scores(np.ones(small_net.num_params)), target)

    def test_unknown_scope(self, small_net):
        """Test unknown scopes raise."""
        with pytest.raises(StructuralError):
            make_mask(small_net, _scores(np.ones(small_net.num_params)), 0.5, scope="layer")


class TestStructuredMask:
    """Test unit-level masks."""

    def test_removed_unit_is_cut_out(self, small_net):
        """Test a removed unit loses its row, bias and outgoing column."""
        values = np.ones(small_net.num_params)
        values[small_net.structure_params(0, 2)] = 0.0
        mask = make_mask(small_net, _scores(values), 0.25, scope="uniform", structured=True)
        assert mask.removed_units == [(0, 2)]
        assert mask.sparsity == pytest.approx(0.25)
        assert np.all(mask.bits[small_net.structure_params(0, 2)] == 0)
        assert np.all(mask.bits[small_net.outgoing_params(0, 2)] == 0)
        assert mask.num_pruned == 2 + 1 + 3

    @pytest.mark.parametrize("scope", ["global", "uniform"])
    def test_only_removed_units_lose_bits(self, rng, scope):
        """Test every zeroed bit belongs to a removed unit's row, bias or outgoing column."""
        net = Network.from_dims([4, 6, 5, 3], "relu", seed=1)
        mask = make_mask(net, _scores(rng.random(net.num_params)), 0.4, scope=scope, structured=True)
        assert mask.removed_units
        assert all(l < net.num_layers - 1 for l, _ in mask.removed_units)
        expected = np.ones(net.num_params)
        for l, u in mask.removed_units:
            expected[net.structure_params(l, u)] = 0.0
            expected[net.outgoing_params(l, u)] = 0.0
        np.testing.assert_array_equal(mask.bits, expected)

    def test_scaling_keeps_removed_units(self, rng):
        """Test positive scaling of structured scores keeps the removed units."""
        net = Network.from_dims([4, 6, 5, 3], "relu", seed=1)
        values = rng.random(net.num_params)
        base = make_mask(net, _scores(values), 0.5, scope="uniform", structured=True)
        scaled = make_mask(net, _scores(values * 250.0), 0.5, scope="uniform", structured=True)
        assert scaled.removed_units == base.removed_units

    def test_layer_collapse(self, small_net, rng):
        """Test removing all but an impossible fraction raises."""
        with pytest.raises(LayerCollapseError):
            make_mask(
                small_net,
                _scores(rng.random(small_net.num_params)),
                0.75,
                scope="uniform",
                structured=True,
            )

    def test_current_units_stay_removed(self, rng):
        """Test structured masks keep earlier removed units."""
        net = Network.from_dims([4, 10, 2])
        first = make_mask(net, _scores(rng.random(net.num_params)), 0.2, scope="uniform", structured=True)
        second = make_mask(
            net, _scores(rng.random(net.num_params)), 0.5, scope="uniform", structured=True, current=first
        )
        assert set(first.removed_units) <= set(second.removed_units)
        assert len(second.removed_units) == 5


class TestApplyMask:
    """Test mask application."""

    def test_apply_zeroes_and_attaches(self, small_net):
        """Test the mask is attached and parameters zeroed."""
        bits = np.ones(small_net.num_params)
        bits[[0, 1]] = 0.0
        mask = PruneMask(bits=bits, sparsity=2 / 27, target=0.07)
        apply_mask(small_net, mask)
        assert small_net.params[0] == 0.0
        np.testing.assert_array_equal(small_net.masks, bits)

    def test_wrong_length(self, small_net):
        """Test mismatched masks raise."""
        with pytest.raises(StructuralError):
            apply_mask(small_net, PruneMask(bits=np.ones(3), sparsity=0.0, target=0.0))
