"""
Curvature estimates of the negative log-likelihood.

Diagonal estimates hold one value per parameter. KFAC estimates hold, per
layer, an input-side factor A (carrying the 1/N average) and an output-side
factor G (carrying the sum over samples) so that A ⊗ G approximates the
layer's block of Σ_n Jᵀ Λ J.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .const import (
    CURVATURE_DIAG_EF,
    CURVATURE_DIAG_GGN,
    CURVATURE_KFAC_EF,
    CURVATURE_KFAC_GGN,
    CURVATURE_KFAC_GGN_EXACT,
    CURVATURE_KINDS,
    DENSE_GGN_MAX_PARAMS,
)
from .data import iter_batches
from .errors import ResourceError, StructuralError
from .likelihood import Likelihood
from .network import BatchActivations, Network
from .tensor_core import SymEig, make_rng, sym_eig

_LOGGER = logging.getLogger(__name__)

KFAC_EF = "ef"
KFAC_GGN_SAMPLED = "ggn_sampled"
KFAC_GGN_EXACT = "ggn_exact"


class CurvatureEstimate(ABC):
    """Base class of curvature estimates."""

    kind: str

    @abstractmethod
    def diagonal(self, net: Network) -> np.ndarray:
        """Diagonal of the estimate over the flat parameter vector."""


@dataclass
class DiagCurvature(CurvatureEstimate):
    """Per-parameter curvature h_p ≥ 0."""

    h: np.ndarray
    kind: str = CURVATURE_DIAG_GGN
    num_samples: int = 0

    def diagonal(self, net: Network) -> np.ndarray:
        return self.h


@dataclass
class KfacLayer:
    """Kronecker factors of one layer and their eigendecompositions."""

    a: np.ndarray
    g: np.ndarray
    eig_a: SymEig
    eig_g: SymEig

    @property
    def shape(self) -> tuple:
        return self.a.shape[0], self.g.shape[0]


@dataclass
class KfacCurvature(CurvatureEstimate):
    """Per-layer factors with H_l ≈ A_l ⊗ G_l."""

    layers: List[KfacLayer] = field(default_factory=list)
    kind: str = CURVATURE_KFAC_EF
    num_samples: int = 0

    def diagonal(self, net: Network) -> np.ndarray:
        out = np.empty(net.num_params)
        for l, sl in enumerate(net.index):
            out[sl.full] = kfac_diag(self, l)
        return out


def _squared_grad_sums(net: Network, acts: BatchActivations) -> np.ndarray:
    """Σ_n of squared per-sample gradients, without forming them."""
    out = np.zeros(net.num_params)
    for l, sl in enumerate(net.index):
        a2 = acts.inputs[l] ** 2
        g2 = acts.output_grads[l] ** 2
        out[sl.weight] = (a2.T @ g2).ravel()
        if sl.bias is not None:
            out[sl.bias] = g2.sum(axis=0)
    if net.masks is not None:
        out *= net.masks
    return out


def ggn_diag(net: Network, lik: Likelihood, data) -> DiagCurvature:
    """
    Exact diagonal of the generalized Gauss-Newton matrix.

    Args:
        net: Network at the expansion point.
        lik: Likelihood providing the output Hessian factor.
        data: Dataset, (x, y) pair or iterable of (x, y) batches.

    Returns:
        DiagCurvature with h_p = Σ_n Σ_c [(Jᵀ L)_pc]².
    """
    h = np.zeros(net.num_params)
    count = 0
    for x, _y in iter_batches(data):
        cache = net.forward_cache(x)
        factor = lik.hessian_factor(cache.output)
        for c in range(factor.shape[2]):
            _, acts = net.backward_cache(cache, factor[:, :, c])
            h += _squared_grad_sums(net, acts)
        count += cache.output.shape[0]
    _LOGGER.debug("Diagonal GGN over %d samples", count)
    return DiagCurvature(h=h, kind=CURVATURE_DIAG_GGN, num_samples=count)


def ef_diag(net: Network, lik: Likelihood, data) -> DiagCurvature:
    """Diagonal empirical Fisher, Σ_n (∂ nll_n / ∂θ_p)²."""
    h = np.zeros(net.num_params)
    count = 0
    for x, y in iter_batches(data):
        cache = net.forward_cache(x)
        _, acts = net.backward_cache(cache, lik.output_grad(cache.output, y))
        h += _squared_grad_sums(net, acts)
        count += cache.output.shape[0]
    _LOGGER.debug("Diagonal EF over %d samples", count)
    return DiagCurvature(h=h, kind=CURVATURE_DIAG_EF, num_samples=count)


def _augmented(net: Network, l: int, a: np.ndarray) -> np.ndarray:
    if net.layers[l].has_bias:
        return np.hstack([a, np.ones((a.shape[0], 1))])
    return a


def _clipped_eig(m: np.ndarray) -> SymEig:
    eig = sym_eig(m)
    return SymEig(np.maximum(eig.eigenvalues, 0.0), eig.eigenvectors)


def kfac(
    net: Network,
    lik: Likelihood,
    data,
    mode: str = KFAC_EF,
    rng: Optional[np.random.Generator] = None,
) -> KfacCurvature:
    """
    Layer-wise Kronecker-factored curvature.

    Args:
        net: Network at the expansion point.
        lik: Likelihood of the outputs.
        data: Dataset, (x, y) pair or iterable of (x, y) batches.
        mode: ``ef`` uses the observed targets, ``ggn_sampled`` one target
            drawn from the model per sample, ``ggn_exact`` every column of the
            output Hessian factor.
        rng: Generator for sampled targets; seeded from the network when None.

    Returns:
        KfacCurvature with factors and eigendecompositions per layer.
    """
    if mode not in (KFAC_EF, KFAC_GGN_SAMPLED, KFAC_GGN_EXACT):
        raise StructuralError(f"Unknown KFAC mode {mode!r}")
    if rng is None:
        rng = make_rng(net.seed)
    a_sums = [np.zeros((s.in_dim + s.has_bias,) * 2) for s in net.layers]
    g_sums = [np.zeros((s.out_dim,) * 2) for s in net.layers]
    count = 0

    def accumulate(acts: BatchActivations, with_inputs: bool) -> None:
        for l in range(net.num_layers):
            if with_inputs:
                a = _augmented(net, l, acts.inputs[l])
                a_sums[l] += a.T @ a
            g = acts.output_grads[l]
            g_sums[l] += g.T @ g

    for x, y in iter_batches(data):
        cache = net.forward_cache(x)
        if mode == KFAC_GGN_EXACT:
            factor = lik.hessian_factor(cache.output)
            for c in range(factor.shape[2]):
                _, acts = net.backward_cache(cache, factor[:, :, c])
                accumulate(acts, with_inputs=c == 0)
        else:
            if mode == KFAC_GGN_SAMPLED:
                y = lik.sample_targets(cache.output, rng)
            _, acts = net.backward_cache(cache, lik.output_grad(cache.output, y))
            accumulate(acts, with_inputs=True)
        count += cache.output.shape[0]

    layers = []
    for l in range(net.num_layers):
        a = a_sums[l] / max(count, 1)
        a = 0.5 * (a + a.T)
        g = 0.5 * (g_sums[l] + g_sums[l].T)
        layers.append(KfacLayer(a=a, g=g, eig_a=_clipped_eig(a), eig_g=_clipped_eig(g)))
    kind = {
        KFAC_EF: CURVATURE_KFAC_EF,
        KFAC_GGN_SAMPLED: CURVATURE_KFAC_GGN,
        KFAC_GGN_EXACT: CURVATURE_KFAC_GGN_EXACT,
    }[mode]
    _LOGGER.debug("KFAC (%s) over %d samples", mode, count)
    return KfacCurvature(layers=layers, kind=kind, num_samples=count)


def kfac_diag(k: KfacCurvature, layer: int) -> np.ndarray:
    """Diagonal of A_l ⊗ G_l over the layer's parameters."""
    if not 0 <= layer < len(k.layers):
        raise StructuralError(f"Layer {layer} out of range for KFAC estimate")
    block = k.layers[layer]
    return np.kron(np.diag(block.a), np.diag(block.g))


def ggn_dense(
    net: Network, lik: Likelihood, data, cap: int = DENSE_GGN_MAX_PARAMS
) -> np.ndarray:
    """Full P×P GGN from per-sample Jacobians, for small networks only."""
    if net.num_params > cap:
        raise ResourceError(
            f"Dense GGN of {net.num_params} parameters exceeds the cap of {cap}"
        )
    out = np.zeros((net.num_params, net.num_params))
    for x, _y in iter_batches(data):
        f = net.forward(x)
        hess = lik.output_hessian(f)
        for n in range(x.shape[0]):
            jac = net.jacobian(x[n])
            out += jac.T @ hess[n] @ jac
    return out


def estimate(
    kind: str,
    net: Network,
    lik: Likelihood,
    data,
    rng: Optional[np.random.Generator] = None,
) -> CurvatureEstimate:
    """Dispatch on a curvature kind name."""
    if kind == CURVATURE_DIAG_GGN:
        return ggn_diag(net, lik, data)
    if kind == CURVATURE_DIAG_EF:
        return ef_diag(net, lik, data)
    if kind == CURVATURE_KFAC_EF:
        return kfac(net, lik, data, KFAC_EF, rng)
    if kind == CURVATURE_KFAC_GGN:
        return kfac(net, lik, data, KFAC_GGN_SAMPLED, rng)
    if kind == CURVATURE_KFAC_GGN_EXACT:
        return kfac(net, lik, data, KFAC_GGN_EXACT, rng)
    raise StructuralError(f"Unknown curvature kind {kind!r}, expected one of {CURVATURE_KINDS}")
