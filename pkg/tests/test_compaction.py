"""Unit tests for compaction of structurally pruned networks."""
import numpy as np
import pytest

from spam_prune.compaction import compact, cost, plan, structured_pipeline
from spam_prune.config import PruneConfig
from spam_prune.errors import LayerCollapseError, StructuralError
from spam_prune.network import Network
from spam_prune.pruning import PruneMask, ScoreVector, make_mask


def _unit_mask(net, removed):
    values = np.ones(net.num_params)
    for l, u in removed:
        values[net.structure_params(l, u)] = 0.0
    scores = ScoreVector(values=values, criterion="test")
    hidden = net.unit_count(0)
    return make_mask(net, scores, len(removed) / hidden, scope="global", structured=True)


class TestCost:
    """Test the cost model."""

    def test_mnist_mlp(self):
        """Test the 784-256-10 cost."""
        report = cost(Network.from_dims([784, 256, 10]))
        assert report.params_total == 203530
        assert report.flops_per_forward == 407060
        assert report.bytes_on_disk == 1628240

    def test_without_bias(self):
        """Test biasless layers skip the bias FLOPs."""
        report = cost(Network.from_dims([3, 2], has_bias=False))
        assert report.params_total == 6
        assert report.flops_per_forward == 2 * 3 * 2 + 2


class TestPlan:
    """Test compaction planning."""

    def test_identity_plan(self, small_net):
        """Test an unmasked network keeps every unit."""
        result = plan(small_net)
        assert [k.tolist() for k in result.kept] == [[0, 1, 2, 3], [0, 1, 2]]
        assert result.removed_count == 0

    def test_removed_unit(self):
        """Test removing the middle of three units."""
        net = Network.from_dims([2, 3, 2])
        mask = _unit_mask(net, [(0, 1)])
        result = plan(net, mask)
        assert result.kept[0].tolist() == [0, 2]
        assert result.layers[1].in_dim == 2
        assert result.provenance()[0] == {0: 0, 1: 2}

    def test_plan_from_attached_mask(self):
        """Test the plan can be read off a masked network."""
        net = Network.from_dims([2, 3, 2])
        mask = _unit_mask(net, [(0, 0)])
        net.set_mask(mask.bits)
        assert plan(net).kept[0].tolist() == [1, 2]

    def test_output_units_cannot_be_removed(self, small_net):
        """Test masks touching the output layer are rejected."""
        mask = PruneMask(
            bits=np.ones(small_net.num_params), sparsity=0.0, target=0.0, removed_units=[(1, 0)]
        )
        with pytest.raises(StructuralError):
            plan(small_net, mask)

    def test_collapse(self, small_net):
        """Test a plan without units in a layer raises."""
        mask = PruneMask(
            bits=np.ones(small_net.num_params),
            sparsity=1.0,
            target=0.0,
            removed_units=[(0, u) for u in range(4)],
        )
        with pytest.raises(LayerCollapseError):
            plan(small_net, mask)


class TestCompact:
    """Test compaction itself."""

    def test_outputs_preserved(self, rng):
        """Test the compact network reproduces the masked outputs."""
        net = Network.from_dims([3, 6, 2], "tanh", seed=2)
        net.params[:] = rng.standard_normal(net.num_params)
        mask = _unit_mask(net, [(0, 1), (0, 4)])
        net.set_mask(mask.bits)
        small = compact(net, plan(net, mask))
        assert small.dims == [3, 4, 2]
        x = rng.standard_normal((20, 3))
        np.testing.assert_allclose(small.forward(x), net.forward(x), atol=1e-12)

    def test_architecture_mismatch(self, small_net):
        """Test a plan for another architecture raises."""
        other = plan(Network.from_dims([2, 5, 3]))
        with pytest.raises(StructuralError):
            compact(small_net, other)

    def test_cost_monotone_in_target(self):
        """Test higher unit sparsity never costs more."""
        net = Network.from_dims([5, 10, 10, 2])
        values = np.random.default_rng(0).random(net.num_params)
        previous = None
        for target in (0.0, 0.2, 0.5, 0.8):
            scores = ScoreVector(values=values, criterion="test")
            mask = make_mask(net, scores, target, scope="uniform", structured=True)
            report = cost(plan(net, mask))
            if previous is not None:
                assert report.params_total <= previous.params_total
                assert report.flops_per_forward <= previous.flops_per_forward
            previous = report


class TestPipeline:
    """Test the score, mask, fine-tune and compact pipeline."""

    def test_half_of_units(self, blobs, categorical, fast_train_config):
        """Test removing half the hidden units of each layer."""
        train_ds, test_ds = blobs
        net = Network.from_dims([3, 16, 16, 3], "relu", seed=0)
        result = structured_pipeline(
            net,
            categorical,
            train_ds,
            test_ds,
            "magnitude",
            0.5,
            fast_train_config,
            PruneConfig(finetune_epochs=1),
        )
        assert result.network.dims == [3, 8, 8, 3]
        assert result.cost.params_total == 3 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3
        assert result.row.realized_sparsity == pytest.approx(0.5)
        assert result.row.params_total == result.cost.params_total
        assert result.row.n == len(test_ds)

    def test_zero_target_is_identity(self, blobs, categorical, fast_train_config):
        """Test nothing changes at target zero without fine-tuning."""
        train_ds, test_ds = blobs
        net = Network.from_dims([3, 16, 3], "relu", seed=0)
        result = structured_pipeline(
            net, categorical, train_ds, test_ds, "magnitude", 0.0, fast_train_config, PruneConfig()
        )
        np.testing.assert_allclose(
            result.network.forward(test_ds.features), net.forward(test_ds.features), atol=1e-12
        )
