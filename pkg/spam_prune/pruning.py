"""
Importance scores, thresholding into binary masks, and mask application.

Scores are nonnegative; lower scores are pruned first and ties go to the lower
flat index. Structured masks remove whole units: the unit's incoming weight
row, its bias, and the column of the next layer's weights that reads it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .const import (
    CRITERIA,
    CRITERION_GRASP,
    CRITERION_MAGNITUDE,
    CRITERION_OPD,
    CRITERION_RANDOM,
    CRITERION_SNIP,
    CRITERION_SYNFLOW,
    DEFAULT_SCORING_BATCH,
    GRASP_FD_STEP,
    SCOPE_GLOBAL,
    SCOPE_UNIFORM,
)
from .data import Dataset
from .errors import LayerCollapseError, NumericalError, StructuralError
from .laplace import PosteriorState, check_fresh, posterior_diag
from .likelihood import Likelihood, mean_nll_and_grad
from .network import Activation, Network

_LOGGER = logging.getLogger(__name__)


@dataclass
class ScoreVector:
    """
    Importance per parameter, or per unit when ``units`` is set.

    Attributes:
        values: Nonnegative finite scores.
        criterion: Name of the scoring rule.
        units: (layer, unit) of each entry for structured scores.
        metadata: Provenance such as the posterior snapshot id.
    """

    values: np.ndarray
    criterion: str
    units: Optional[List[Tuple[int, int]]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def structured(self) -> bool:
        return self.units is not None


@dataclass
class PruneMask:
    """
    Binary keep-mask over the flat parameters.

    Attributes:
        bits: 1 keeps a parameter, 0 prunes it.
        sparsity: Realized fraction pruned among prunable entries (units in
            structured mode).
        target: Requested sparsity.
        scope: global or uniform.
        structured: Whether whole units were removed.
        exempt_last: Whether the output layer was protected.
        criterion: Scoring rule that produced the mask.
        removed_units: (layer, unit) pairs removed in structured mode.
        param_sparsity: Fraction of all parameters that are zero in ``bits``.
        warnings: Recoverable anomalies noticed while thresholding.
    """

    bits: np.ndarray
    sparsity: float
    target: float
    scope: str = SCOPE_GLOBAL
    structured: bool = False
    exempt_last: bool = False
    criterion: str = ""
    removed_units: List[Tuple[int, int]] = field(default_factory=list)
    param_sparsity: float = 0.0
    warnings: List[str] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_pruned(self) -> int:
        return int(self.bits.size - np.count_nonzero(self.bits))


def prune_count(sparsity: float, n: int) -> int:
    """⌊s·n⌋, robust to representation error in s."""
    return int(math.floor(sparsity * n + 1e-9))


def _vector(values: np.ndarray, criterion: str, **metadata) -> ScoreVector:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{criterion} scores contain non-finite values")
    return ScoreVector(values=values, criterion=criterion, metadata=dict(metadata))


# Scores


def score_opd(net: Network, ps: PosteriorState) -> ScoreVector:
    """Posterior precision times squared parameter."""
    check_fresh(ps, net)
    theta = net.effective_params()
    return _vector(
        posterior_diag(ps, net) * theta**2, CRITERION_OPD, snapshot_id=ps.snapshot_id
    )


def score_magnitude(net: Network) -> ScoreVector:
    return _vector(np.abs(net.effective_params()), CRITERION_MAGNITUDE)


def score_random(net: Network, rng: np.random.Generator) -> ScoreVector:
    return _vector(rng.random(net.num_params), CRITERION_RANDOM)


def score_snip(net: Network, lik: Likelihood, batch: Tuple[np.ndarray, np.ndarray]) -> ScoreVector:
    """|θ · ∂L/∂θ| for the batch-mean loss L."""
    x, y = batch
    _, grad = mean_nll_and_grad(net, lik, x, y)
    return _vector(np.abs(net.effective_params() * grad), CRITERION_SNIP)


def hvp_fd(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    v: np.ndarray,
    step: Optional[float] = None,
) -> np.ndarray:
    """Hessian-vector product by central differences of ``grad_fn``.

    ``v`` is normalized internally and the result rescaled by its norm.
    """
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(theta)
    if step is None:
        step = GRASP_FD_STEP * (1.0 + float(np.max(np.abs(theta), initial=0.0)))
    u = v / norm
    hu = (grad_fn(theta + step * u) - grad_fn(theta - step * u)) / (2.0 * step)
    return norm * hu


def grasp_scores(
    theta: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """|θ ⊙ H g| with g the gradient at θ and H the Hessian of the same loss."""
    g = grad_fn(theta)
    hg = hvp_fd(grad_fn, theta, g)
    if not np.all(np.isfinite(hg)):
        raise NumericalError("Hessian-vector product is not finite")
    return np.abs(theta * hg)


def score_grasp(net: Network, lik: Likelihood, batch: Tuple[np.ndarray, np.ndarray]) -> ScoreVector:
    x, y = batch

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        return mean_nll_and_grad(net.with_params(theta), lik, x, y)[1]

    return _vector(grasp_scores(net.effective_params().copy(), grad_fn), CRITERION_GRASP)


def score_synflow(net: Network) -> ScoreVector:
    """|θ · ∂R/∂θ| with R the summed output of the linearized |θ| network on ones."""
    theta = net.effective_params()
    linear_layers = [
        spec.model_copy(update={"activation": Activation.IDENTITY}) for spec in net.layers
    ]
    abs_params = np.abs(theta)
    for sl in net.index:
        if sl.bias is not None:
            abs_params[sl.bias] = 0.0
    linearized = Network(linear_layers, abs_params, net.masks, net.seed)
    ones = np.ones((1, net.input_dim))
    grad, _ = linearized.backward(ones, np.ones((1, net.output_dim)))
    return _vector(np.abs(theta * grad), CRITERION_SYNFLOW)


def scoring_batch(
    ds: Dataset, rng: np.random.Generator, size: int = DEFAULT_SCORING_BATCH
) -> Tuple[np.ndarray, np.ndarray]:
    """One fixed random batch for data-dependent criteria."""
    if len(ds) == 0:
        raise StructuralError("Scoring batch requested from an empty dataset")
    idx = np.sort(rng.choice(len(ds), size=min(size, len(ds)), replace=False))
    return ds.features[idx], ds.labels[idx]


def score(
    criterion: str,
    net: Network,
    lik: Optional[Likelihood] = None,
    batch: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ps: Optional[PosteriorState] = None,
    rng: Optional[np.random.Generator] = None,
) -> ScoreVector:
    """Dispatch on a criterion name."""
    if criterion == CRITERION_OPD:
        if ps is None:
            raise StructuralError("OPD scoring needs a posterior")
        return score_opd(net, ps)
    if criterion == CRITERION_MAGNITUDE:
        return score_magnitude(net)
    if criterion == CRITERION_RANDOM:
        if rng is None:
            raise StructuralError("Random scoring needs a generator")
        return score_random(net, rng)
    if criterion in (CRITERION_SNIP, CRITERION_GRASP):
        if lik is None or batch is None:
            raise StructuralError(f"{criterion} scoring needs a likelihood and a batch")
        fn = score_snip if criterion == CRITERION_SNIP else score_grasp
        return fn(net, lik, batch)
    if criterion == CRITERION_SYNFLOW:
        return score_synflow(net)
    raise StructuralError(f"Unknown criterion {criterion!r}, expected one of {CRITERIA}")


def score_structured(
    scores: ScoreVector, net: Network, exempt_last: bool = True
) -> ScoreVector:
    """Sum parameter scores over each unit's incoming row and bias."""
    if scores.structured:
        return scores
    if scores.values.shape != (net.num_params,):
        raise StructuralError("Unstructured scores do not match the network")
    layers = range(net.num_layers - 1 if exempt_last else net.num_layers)
    values, units = [], []
    for l in layers:
        spec, sl = net.layers[l], net.index[l]
        per_unit = scores.values[sl.weight].reshape(spec.in_dim, spec.out_dim).sum(axis=0)
        if sl.bias is not None:
            per_unit = per_unit + scores.values[sl.bias]
        values.append(per_unit)
        units.extend((l, u) for u in range(spec.out_dim))
    flat = np.concatenate(values) if values else np.empty(0)
    return ScoreVector(
        values=flat, criterion=scores.criterion, units=units, metadata=dict(scores.metadata)
    )


# Masks


def _lowest(values: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest values, ties to the lower position."""
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    return np.argsort(values, kind="stable")[:k]


def _prioritized(values: np.ndarray, already: Optional[np.ndarray]) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if already is None:
        return values
    return np.where(already, -np.inf, values)


def make_mask(
    net: Network,
    scores: ScoreVector,
    target_sparsity: float,
    scope: str = SCOPE_GLOBAL,
    structured: bool = False,
    exempt_last: Optional[bool] = None,
    current: Optional[PruneMask] = None,
) -> PruneMask:
    """
    Threshold scores into a binary mask.

    Args:
        net: Network the scores belong to.
        scores: Per-parameter scores, or per-unit scores in structured mode.
        target_sparsity: Fraction to prune, 0 ≤ s < 1.
        scope: ``global`` threshold or ``uniform`` per-layer quantile.
        structured: Remove whole units instead of single parameters.
        exempt_last: Protect the output layer; defaults to ``structured``.
        current: Earlier mask whose pruned entries must stay pruned.

    Returns:
        PruneMask with exactly ⌊s·n⌋ pruned entries per threshold group.

    Raises:
        StructuralError: Bad sparsity, scope or score shape.
        LayerCollapseError: Structured pruning would empty a layer.
    """
    if not 0.0 <= target_sparsity < 1.0:
        raise StructuralError(f"Target sparsity must be in [0, 1), got {target_sparsity}")
    if scope not in (SCOPE_GLOBAL, SCOPE_UNIFORM):
        raise StructuralError(f"Unknown pruning scope {scope!r}")
    if exempt_last is None:
        exempt_last = structured
    if structured:
        return _structured_mask(net, scores, target_sparsity, scope, exempt_last, current)
    if scores.structured or scores.values.shape != (net.num_params,):
        raise StructuralError("Unstructured pruning needs one score per parameter")

    n_layers = net.num_layers - 1 if exempt_last else net.num_layers
    groups = [net.layer_params(l) for l in range(n_layers)]
    already = None if current is None else current.bits == 0
    values = _prioritized(scores.values, already)
    bits = np.ones(net.num_params)
    prunable = np.concatenate(groups) if groups else np.empty(0, dtype=np.int64)
    if scope == SCOPE_GLOBAL:
        chosen = prunable[_lowest(values[prunable], prune_count(target_sparsity, prunable.size))]
        bits[chosen] = 0.0
    else:
        for idx in groups:
            bits[idx[_lowest(values[idx], prune_count(target_sparsity, idx.size))]] = 0.0

    warnings = []
    for l, idx in enumerate(groups):
        if idx.size and not bits[idx].any():
            msg = f"Layer {l} lost all of its parameters"
            _LOGGER.warning("%s at sparsity %.3f", msg, target_sparsity)
            warnings.append(msg)
    pruned = int(prunable.size - np.count_nonzero(bits[prunable]))
    mask = PruneMask(
        bits=bits,
        sparsity=pruned / prunable.size if prunable.size else 0.0,
        target=float(target_sparsity),
        scope=scope,
        structured=False,
        exempt_last=exempt_last,
        criterion=scores.criterion,
        param_sparsity=float(np.mean(bits == 0.0)),
        warnings=warnings,
        metadata=dict(scores.metadata),
    )
    _LOGGER.debug("Mask at %.3f pruned %d of %d parameters", target_sparsity, pruned, prunable.size)
    return mask


def _structured_mask(
    net: Network,
    scores: ScoreVector,
    target: float,
    scope: str,
    exempt_last: bool,
    current: Optional[PruneMask],
) -> PruneMask:
    scores = score_structured(scores, net, exempt_last)
    units = scores.units
    if exempt_last:
        units_ok = all(l < net.num_layers - 1 for l, _ in units)
        if not units_ok:
            raise StructuralError("Structured scores include the exempt output layer")
    already = None
    if current is not None:
        removed = set(current.removed_units)
        already = np.array([u in removed for u in units], dtype=bool)
    values = _prioritized(scores.values, already)
    layer_of = np.array([l for l, _ in units], dtype=np.int64)

    chosen: List[int] = []
    if scope == SCOPE_GLOBAL:
        chosen = list(_lowest(values, prune_count(target, len(units))))
    else:
        for l in np.unique(layer_of):
            pos = np.flatnonzero(layer_of == l)
            m = pos.size
            k = prune_count(target, m)
            if k > 0 and target >= 1.0 - 1.0 / m:
                raise LayerCollapseError(
                    f"Sparsity {target} would collapse layer {int(l)} with {m} units"
                )
            chosen.extend(pos[_lowest(values[pos], k)])

    removed_units = sorted(units[i] for i in chosen)
    per_layer: Dict[int, int] = {}
    for l, _ in removed_units:
        per_layer[l] = per_layer.get(l, 0) + 1
    for l, count in per_layer.items():
        if count >= net.unit_count(l):
            raise LayerCollapseError(f"Structured pruning would remove every unit of layer {l}")

    bits = np.ones(net.num_params)
    for l, u in removed_units:
        bits[net.structure_params(l, u)] = 0.0
        bits[net.outgoing_params(l, u)] = 0.0
    mask = PruneMask(
        bits=bits,
        sparsity=len(removed_units) / len(units) if units else 0.0,
        target=float(target),
        scope=scope,
        structured=True,
        exempt_last=exempt_last,
        criterion=scores.criterion,
        removed_units=removed_units,
        param_sparsity=float(np.mean(bits == 0.0)),
        metadata=dict(scores.metadata),
    )
    _LOGGER.debug("Structured mask at %.3f removed %d units", target, len(removed_units))
    return mask


def apply_mask(net: Network, mask: PruneMask) -> Network:
    """Zero the masked parameters and attach the mask so training respects it."""
    bits = np.asarray(mask.bits, dtype=np.float64)
    if bits.shape != (net.num_params,):
        raise StructuralError(
            f"Mask of length {bits.size} does not fit {net.num_params} parameters"
        )
    net.set_mask(bits)
    return net
