"""Unit tests for the Laplace posterior and marginal likelihood."""
import numpy as np
import pytest

from spam_prune.curvature import DiagCurvature, ggn_diag, kfac
from spam_prune.errors import NumericalError, StalenessError, StructuralError
from spam_prune.laplace import (
    build_posterior,
    check_fresh,
    kfac_prior_correction,
    log_det,
    log_marglik,
    marglik_grad_delta,
    posterior_diag,
    with_delta,
)
from spam_prune.network import Network
from spam_prune.tensor_core import sym_eig


class TestDiagPosterior:
    """Test the diagonal posterior."""

    def test_posterior_diag(self, small_net):
        """Test diag(P) = h / T + δ."""
        h = np.arange(small_net.num_params, dtype=float)
        ps = build_posterior(small_net, DiagCurvature(h), np.full(small_net.num_params, 2.0), 4.0)
        np.testing.assert_allclose(posterior_diag(ps), h / 4.0 + 2.0)
        assert log_det(ps, small_net) == pytest.approx(np.sum(np.log(h / 4.0 + 2.0)))

    def test_rejects_non_positive_precision(self, small_net):
        """Test δ must be positive."""
        delta = np.ones(small_net.num_params)
        delta[4] = 0.0
        with pytest.raises(NumericalError):
            build_posterior(small_net, DiagCurvature(np.zeros(small_net.num_params)), delta)

    def test_rejects_wrong_length(self, small_net):
        """Test δ must cover every parameter."""
        with pytest.raises(StructuralError):
            build_posterior(small_net, DiagCurvature(np.zeros(small_net.num_params)), np.ones(3))

    def test_marglik_terms(self, small_net, small_batch, categorical):
        """Test total = log joint − ½ log det + (P/2) log 2π."""
        est = ggn_diag(small_net, categorical, small_batch)
        ps = build_posterior(small_net, est, np.ones(small_net.num_params))
        value = log_marglik(small_net, categorical, small_batch, ps)
        x, y = small_batch
        nll = float(np.sum(categorical.nll(small_net.forward(x), y)))
        assert value.log_likelihood == pytest.approx(-nll)
        expected = value.log_joint - 0.5 * log_det(ps, small_net)
        expected += 0.5 * small_net.num_params * np.log(2 * np.pi)
        assert value.total == pytest.approx(expected)

    def test_empty_data(self, small_net, categorical):
        """Test an empty dataset contributes no likelihood term."""
        ps = build_posterior(small_net, DiagCurvature(np.zeros(small_net.num_params)), np.ones(small_net.num_params))
        value = log_marglik(small_net, categorical, (np.zeros((0, 2)), np.zeros(0, dtype=int)), ps)
        assert value.log_likelihood == 0.0
        assert np.isfinite(value.total)


class TestStaleness:
    """Test snapshot binding."""

    def test_fresh_posterior_passes(self, small_net):
        """Test a new posterior matches its network."""
        ps = build_posterior(small_net, DiagCurvature(np.zeros(small_net.num_params)), np.ones(small_net.num_params))
        check_fresh(ps, small_net)

    def test_changed_params_are_stale(self, small_net, small_batch, categorical):
        """Test editing parameters invalidates the posterior."""
        ps = build_posterior(small_net, DiagCurvature(np.zeros(small_net.num_params)), np.ones(small_net.num_params))
        small_net.params[0] += 0.1
        with pytest.raises(StalenessError):
            log_marglik(small_net, categorical, small_batch, ps)

    def test_with_delta_keeps_snapshot(self, small_net):
        """Test a new prior keeps the expansion point."""
        ps = build_posterior(small_net, DiagCurvature(np.zeros(small_net.num_params)), np.ones(small_net.num_params))
        again = with_delta(small_net, ps, np.full(small_net.num_params, 3.0))
        assert again.snapshot_id == ps.snapshot_id
        np.testing.assert_allclose(again.delta, 3.0)


class TestKfacPosterior:
    """Test the KFAC posterior and its prior correction."""

    def test_zero_curvature_gives_prior(self, rng):
        """Test λ̂ equals δ̂ when the factors vanish."""
        eig_a = sym_eig(np.zeros((3, 3)))
        eig_g = sym_eig(np.zeros((2, 2)))
        lam = kfac_prior_correction(eig_a, eig_g, np.full(6, 1.5))
        np.testing.assert_allclose(lam, 1.5)

    def test_length_mismatch(self):
        """Test δ must match the factor sizes."""
        with pytest.raises(StructuralError):
            kfac_prior_correction(sym_eig(np.eye(2)), sym_eig(np.eye(2)), np.ones(5))

    def test_posterior_diag_matches_dense(self, small_net, small_batch, categorical, rng):
        """Test the KFAC posterior diagonal against the reconstructed precision."""
        est = kfac(small_net, categorical, small_batch, mode="ggn_exact")
        delta = rng.uniform(0.5, 2.0, size=small_net.num_params)
        ps = build_posterior(small_net, est, delta)
        diag = posterior_diag(ps, small_net)
        for sl, block, lam in zip(small_net.index, est.layers, ps.lambda_hat):
            q = np.kron(block.eig_a.eigenvectors, block.eig_g.eigenvectors)
            dense = (q * lam) @ q.T
            np.testing.assert_allclose(diag[sl.full], np.diag(dense), atol=1e-10)

    def test_kfac_diag_needs_network(self, small_net, small_batch, categorical):
        """Test the KFAC diagonal requires the layout."""
        est = kfac(small_net, categorical, small_batch, mode="ef")
        ps = build_posterior(small_net, est, np.ones(small_net.num_params))
        with pytest.raises(StructuralError):
            posterior_diag(ps)

    def test_temperature_scales_curvature(self, small_net, small_batch, categorical):
        """Test a larger temperature shrinks the log determinant."""
        est = kfac(small_net, categorical, small_batch, mode="ggn_exact")
        delta = np.ones(small_net.num_params)
        cold = build_posterior(small_net, est, delta, 1.0)
        warm = build_posterior(small_net, est, delta, 10.0)
        assert log_det(warm, small_net) < log_det(cold, small_net)


class TestGradient:
    """Test the marginal likelihood gradient in δ."""

    def test_diag_gradient_formula(self, small_net):
        """Test ∂/∂δ = ½(1/δ − θ²) − ½ / (h/T + δ)."""
        h = np.full(small_net.num_params, 3.0)
        delta = np.full(small_net.num_params, 2.0)
        ps = build_posterior(small_net, DiagCurvature(h), delta)
        theta = small_net.params
        expected = 0.5 * (1.0 / delta - theta**2) - 0.5 / (h + delta)
        np.testing.assert_allclose(marglik_grad_delta(small_net, ps), expected)


class TestOccam:
    """Test the shape of the evidence in the prior precision."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_concave_in_scalar_log_delta(self, small_batch, categorical, seed):
        """Test second differences along a log δ grid are never positive."""
        net = Network.from_dims([2, 4, 3], "tanh", seed=seed)
        ps = build_posterior(net, ggn_diag(net, categorical, small_batch), np.ones(net.num_params))
        grid = np.linspace(-4.0, 4.0, 17)
        values = np.array(
            [
                log_marglik(
                    net, categorical, small_batch, with_delta(net, ps, np.full(net.num_params, np.exp(t)))
                ).total
                for t in grid
            ]
        )
        second = values[2:] - 2.0 * values[1:-1] + values[:-2]
        assert np.all(second <= 1e-8)

    def test_concave_in_each_log_delta(self, small_net, small_batch, categorical, rng):
        """Test concavity along single coordinates of log δ."""
        ps = build_posterior(
            small_net, ggn_diag(small_net, categorical, small_batch), np.ones(small_net.num_params)
        )
        for p in rng.choice(small_net.num_params, size=6, replace=False):
            values = []
            for t in (-1.0, 0.0, 1.0):
                delta = np.ones(small_net.num_params)
                delta[p] = np.exp(t)
                values.append(log_marglik(small_net, categorical, small_batch, with_delta(small_net, ps, delta)).total)
            assert values[0] - 2.0 * values[1] + values[2] <= 1e-10

    def test_posterior_diag_dominates_prior(self, small_net, small_batch, categorical, rng):
        """Test the diagonal posterior precision is at least δ."""
        delta = rng.uniform(0.1, 10.0, size=small_net.num_params)
        ps = build_posterior(small_net, ggn_diag(small_net, categorical, small_batch), delta)
        assert np.all(posterior_diag(ps) >= delta)
