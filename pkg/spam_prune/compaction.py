"""
Compaction of structurally pruned networks into smaller dense networks.

Removed hidden units lose their incoming row, bias and the next layer's
column that reads them. Since every implemented activation maps 0 to 0, the
compact network computes exactly what the masked one does.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from .config import PruneConfig, TrainConfig
from .const import SCOPE_UNIFORM
from .data import Dataset
from .errors import LayerCollapseError, StructuralError
from .laplace import PosteriorState
from .likelihood import Likelihood
from .metrics import evaluate
from .network import LayerSpec, Network
from .prior import PriorSpec
from .pruning import PruneMask, apply_mask, make_mask, score, score_structured
from .reporting import ReportRow
from .training import finetune, train_map

_LOGGER = logging.getLogger(__name__)


class CostReport(BaseModel):
    """Size and compute of a dense network."""

    params_total: int
    flops_per_forward: int
    bytes_on_disk: int


@dataclass
class CompactionPlan:
    """
    Which units survive in each layer.

    Attributes:
        source_layers: Layer specs of the network the plan was made for.
        kept: Ascending kept output units per layer; the output layer is
            always kept in full.
        layers: Layer specs of the compact network.
    """

    source_layers: List[LayerSpec]
    kept: List[np.ndarray]
    layers: List[LayerSpec]

    @property
    def removed_count(self) -> int:
        return sum(s.out_dim - k.size for s, k in zip(self.source_layers, self.kept))

    def provenance(self) -> List[Dict[int, int]]:
        """Per layer, new unit index → old unit index."""
        return [{new: int(old) for new, old in enumerate(k)} for k in self.kept]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source_layers": [s.model_dump(mode="json") for s in self.source_layers],
            "layers": [s.model_dump(mode="json") for s in self.layers],
            "kept_units": [k.tolist() for k in self.kept],
            "removed_units": self.removed_count,
        }


def _removed_from_bits(net: Network, bits: np.ndarray) -> List[set]:
    removed = [set() for _ in net.layers]
    for l in range(net.num_layers - 1):
        for u in range(net.unit_count(l)):
            if not bits[net.structure_params(l, u)].any():
                removed[l].add(u)
    return removed


def plan(net: Network, mask: Optional[PruneMask] = None) -> CompactionPlan:
    """
    Derive kept units from a structured mask.

    Uses ``mask.removed_units`` when given, otherwise treats hidden units
    whose incoming row and bias are fully masked on ``net`` as removed.

    Raises:
        LayerCollapseError: A layer would keep no units.
        StructuralError: The mask removes output units.
    """
    if mask is not None:
        removed = [set() for _ in net.layers]
        for l, u in mask.removed_units:
            if l >= net.num_layers - 1:
                raise StructuralError("Compaction keeps every output unit")
            removed[l].add(u)
    elif net.masks is not None:
        removed = _removed_from_bits(net, net.masks)
    else:
        removed = [set() for _ in net.layers]
    kept = []
    for l, spec in enumerate(net.layers):
        k = np.array([u for u in range(spec.out_dim) if u not in removed[l]], dtype=np.int64)
        if k.size == 0:
            raise LayerCollapseError(f"Layer {l} has no remaining units")
        kept.append(k)
    layers = []
    in_dim = net.input_dim
    for spec, k in zip(net.layers, kept):
        layers.append(spec.model_copy(update={"in_dim": in_dim, "out_dim": int(k.size)}))
        in_dim = int(k.size)
    return CompactionPlan(source_layers=list(net.layers), kept=kept, layers=layers)


def compact(net: Network, compaction: CompactionPlan) -> Network:
    """Gather the kept rows and columns into a fresh dense network."""
    if list(net.layers) != compaction.source_layers:
        raise StructuralError("Compaction plan was made for a different architecture")
    theta = net.effective_params()
    small = Network(compaction.layers, seed=net.seed)
    prev_kept = np.arange(net.input_dim)
    for l, k in enumerate(compaction.kept):
        small.weight(l)[:, :] = net.weight(l, theta)[np.ix_(k, prev_kept)]
        bias = net.bias(l, theta)
        if bias is not None:
            small.bias(l)[:] = bias[k]
        prev_kept = k
    _LOGGER.info(
        "Compacted %d parameters into %d (%d units removed)",
        net.num_params,
        small.num_params,
        compaction.removed_count,
    )
    return small


def cost(target: Union[Network, CompactionPlan, Sequence[LayerSpec]]) -> CostReport:
    """Parameter count, FLOPs per single-input forward pass and float64 size."""
    if isinstance(target, Network):
        layers = target.layers
    elif isinstance(target, CompactionPlan):
        layers = target.layers
    else:
        layers = list(target)
    params = flops = 0
    for spec in layers:
        params += spec.num_params
        flops += 2 * spec.in_dim * spec.out_dim
        flops += spec.out_dim if spec.has_bias else 0
        flops += spec.out_dim
    return CostReport(params_total=params, flops_per_forward=flops, bytes_on_disk=8 * params)


@dataclass
class PipelineResult:
    """Outputs of the structured prune-and-compact pipeline."""

    network: Network
    masked: Network
    mask: PruneMask
    plan: CompactionPlan
    cost: CostReport
    row: ReportRow


def structured_pipeline(
    net: Network,
    lik: Likelihood,
    train_data: Dataset,
    test_data: Dataset,
    criterion: str,
    target: float,
    train_cfg: TrainConfig,
    prune_cfg: PruneConfig,
    ps: Optional[PosteriorState] = None,
    prior: Optional[PriorSpec] = None,
    batch=None,
    rng: Optional[np.random.Generator] = None,
    mode: str = "",
) -> PipelineResult:
    """
    Score, mask whole units uniformly per layer, fine-tune, compact, evaluate.

    Args:
        net: Trained network; not modified.
        lik: Likelihood of the outputs.
        train_data: Data for fine-tuning.
        test_data: Data for the final evaluation.
        criterion: Scoring rule.
        target: Fraction of hidden units to remove in every layer.
        train_cfg: Optimizer settings for fine-tuning.
        prune_cfg: Fine-tuning and post-compaction epoch counts.
        ps: Posterior for OPD scoring.
        prior: Prior used as weight decay while fine-tuning.
        batch: Scoring batch for data-dependent criteria.
        rng: Generator for random scores.
        mode: Training mode recorded in the report row.

    Returns:
        PipelineResult with the compact network and its report row.
    """
    started = time.perf_counter()
    scores = score_structured(score(criterion, net, lik, batch, ps, rng), net, exempt_last=True)
    mask = make_mask(net, scores, target, SCOPE_UNIFORM, structured=True, exempt_last=True)
    masked = apply_mask(net.copy(), mask)
    masked = finetune(masked, lik, train_data, prune_cfg.finetune_epochs, train_cfg, prior)
    compaction = plan(masked, mask)
    small = compact(masked, compaction)
    if prune_cfg.post_compact_epochs:
        tuned = train_map(
            small,
            lik,
            train_data,
            train_cfg.model_copy(update={"epochs": prune_cfg.post_compact_epochs}),
        )
        small = tuned.net
    result = evaluate(small, lik, test_data)
    report = cost(small)
    row = ReportRow(
        seed=train_cfg.seed,
        mode=mode or train_cfg.mode,
        criterion=criterion,
        sparsity=target,
        realized_sparsity=mask.sparsity,
        accuracy=result.accuracy,
        nll=result.nll,
        ece=result.ece,
        brier=result.brier,
        n=result.n,
        params_total=report.params_total,
        flops_per_forward=report.flops_per_forward,
        bytes_on_disk=report.bytes_on_disk,
        wall_time=time.perf_counter() - started,
    )
    return PipelineResult(
        network=small, masked=masked, mask=mask, plan=compaction, cost=report, row=row
    )
