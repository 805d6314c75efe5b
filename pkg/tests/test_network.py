"""Unit tests for the feed-forward network."""
import numpy as np
import pytest

from spam_prune.errors import ResourceError, StructuralError
from spam_prune.network import Activation, LayerSpec, Network


def _fd_grad(fn, theta, eps=1e-6):
    grad = np.zeros_like(theta)
    for p in range(theta.size):
        step = np.zeros_like(theta)
        step[p] = eps
        grad[p] = (fn(theta + step) - fn(theta - step)) / (2 * eps)
    return grad


class TestStructure:
    """Test layout and structural queries."""

    def test_param_count(self):
        """Test the 784-256-10 parameter count."""
        net = Network.from_dims([784, 256, 10])
        assert net.num_params == 784 * 256 + 256 + 256 * 10 + 10
        assert net.dims == [784, 256, 10]

    def test_dims_must_chain(self):
        """Test mismatched layers are rejected."""
        with pytest.raises(StructuralError):
            Network([LayerSpec(in_dim=2, out_dim=3), LayerSpec(in_dim=4, out_dim=1)])

    def test_weight_view_uses_column_major_layout(self, small_net):
        """Test W[row, col] sits at start + col * out + row."""
        w = small_net.weight(0)
        assert w.shape == (4, 2)
        for row in range(4):
            for col in range(2):
                p = small_net.flat_index(0, "weight", row, col)
                assert p == col * 4 + row
                assert small_net.params[p] == w[row, col]

    def test_coordinate_inverts_flat_index(self, small_net):
        """Test coordinate and flat_index are inverse maps."""
        for p in range(small_net.num_params):
            layer, kind, row, col = small_net.coordinate(p)
            assert small_net.flat_index(layer, kind, row, col) == p

    def test_coordinate_out_of_range(self, small_net):
        """Test an invalid flat index raises."""
        with pytest.raises(StructuralError):
            small_net.coordinate(small_net.num_params)

    def test_structure_params(self, small_net):
        """Test a unit's incoming row and bias indices."""
        idx = small_net.structure_params(0, 1)
        expected = [small_net.flat_index(0, "weight", 1, c) for c in range(2)]
        expected.append(small_net.flat_index(0, "bias", 1))
        np.testing.assert_array_equal(idx, expected)

    def test_outgoing_params(self, small_net):
        """Test outgoing weights form a column of the next layer."""
        idx = small_net.outgoing_params(0, 2)
        expected = [small_net.flat_index(1, "weight", r, 2) for r in range(3)]
        np.testing.assert_array_equal(idx, expected)
        assert small_net.outgoing_params(1, 0).size == 0

    def test_layer_of_params(self, small_net):
        """Test each parameter maps to its layer."""
        owner = small_net.layer_of_params()
        assert np.sum(owner == 0) == 12
        assert np.sum(owner == 1) == 15

    def test_initial_biases_are_zero(self, small_net):
        """Test initialization leaves biases at zero."""
        assert np.all(small_net.bias(0) == 0.0)
        assert np.all(small_net.bias(1) == 0.0)


class TestPasses:
    """Test forward, backward and Jacobian computations."""

    def test_forward_matches_manual(self, rng):
        """Test forward against explicit matrix algebra."""
        net = Network.from_dims([3, 5, 2], "relu", seed=3)
        net.params[:] = rng.standard_normal(net.num_params)
        x = rng.standard_normal((7, 3))
        hidden = np.maximum(x @ net.weight(0).T + net.bias(0), 0.0)
        expected = hidden @ net.weight(1).T + net.bias(1)
        np.testing.assert_allclose(net.forward(x), expected, atol=1e-12)

    def test_input_dimension_checked(self, small_net):
        """Test wrong feature counts raise."""
        with pytest.raises(StructuralError):
            small_net.forward(np.ones((3, 5)))

    def test_backward_matches_finite_differences(self, small_net, rng):
        """Test the gradient of ⟨u, f(x)⟩ against central differences."""
        x = rng.standard_normal((5, 2))
        u = rng.standard_normal((5, 3))
        grad, _ = small_net.backward(x, u)
        fd = _fd_grad(lambda t: float(np.sum(u * small_net.with_params(t).forward(x))), small_net.params)
        np.testing.assert_allclose(grad, fd, atol=1e-7)

    def test_per_sample_grads_sum_to_batch_grad(self, small_net, rng):
        """Test per-sample gradients sum to the batch gradient."""
        x = rng.standard_normal((6, 2))
        u = rng.standard_normal((6, 3))
        grad, acts = small_net.backward(x, u)
        np.testing.assert_allclose(small_net.per_sample_grads(acts).sum(axis=0), grad, atol=1e-12)

    def test_jacobian_matches_finite_differences(self, small_net, rng):
        """Test each Jacobian row against central differences."""
        x = rng.standard_normal(2)
        jac = small_net.jacobian(x)
        assert jac.shape == (3, small_net.num_params)
        for c in range(3):
            fd = _fd_grad(lambda t: float(small_net.with_params(t).forward(x)[0, c]), small_net.params)
            np.testing.assert_allclose(jac[c], fd, atol=1e-7)

    def test_jacobian_cap(self, small_net):
        """Test the Jacobian cap raises a resource error."""
        with pytest.raises(ResourceError):
            small_net.jacobian(np.zeros(2), cap=10)

    def test_relu_derivative_at_zero(self):
        """Test the ReLU derivative is zero at the kink."""
        z = np.array([-1.0, 0.0, 2.0])
        out = Activation.RELU.apply(z)
        np.testing.assert_array_equal(Activation.RELU.derivative(z, out), [0.0, 0.0, 1.0])


class TestMasks:
    """Test mask handling."""

    def test_set_mask_zeroes_params(self, small_net):
        """Test masked parameters are forced to zero."""
        mask = np.ones(small_net.num_params)
        mask[:5] = 0.0
        small_net.set_mask(mask)
        assert np.all(small_net.params[:5] == 0.0)

    def test_mask_values_checked(self, small_net):
        """Test non-binary masks are rejected."""
        with pytest.raises(StructuralError):
            small_net.set_mask(np.full(small_net.num_params, 0.5))

    def test_mask_length_checked(self, small_net):
        """Test mask length must match the parameter count."""
        with pytest.raises(StructuralError):
            small_net.set_mask(np.ones(3))

    def test_masked_gradient_is_zero(self, small_net, rng):
        """Test gradients vanish on masked entries."""
        mask = np.ones(small_net.num_params)
        mask[[0, 7, 20]] = 0.0
        small_net.set_mask(mask)
        grad, _ = small_net.backward(rng.standard_normal((4, 2)), rng.standard_normal((4, 3)))
        assert np.all(grad[[0, 7, 20]] == 0.0)

    def test_forward_ignores_masked_values(self, small_net, rng):
        """Test values stored under masked entries never reach the output."""
        mask = np.ones(small_net.num_params)
        mask[[1, 9, 12, 24]] = 0.0
        small_net.set_mask(mask)
        x = rng.standard_normal((5, 2))
        before = small_net.forward(x)
        small_net.params[[1, 9, 12, 24]] = rng.normal(scale=100.0, size=4)
        np.testing.assert_array_equal(small_net.forward(x), before)

    def test_copy_is_independent(self, small_net):
        """Test copies do not share parameter storage."""
        clone = small_net.copy()
        clone.params[0] += 1.0
        assert clone.params[0] != small_net.params[0]


class TestFingerprint:
    """Test content fingerprints."""

    def test_equal_for_copies(self, small_net):
        """Test a copy has the same fingerprint."""
        assert small_net.copy().fingerprint() == small_net.fingerprint()

    def test_changes_with_params(self, small_net):
        """Test editing a parameter changes the fingerprint."""
        before = small_net.fingerprint()
        small_net.params[3] += 1e-9
        assert small_net.fingerprint() != before
