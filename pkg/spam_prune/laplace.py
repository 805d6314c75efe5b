"""
Laplace posterior precision and the approximate log marginal likelihood.

The posterior precision is P = H / T + diag(δ). For KFAC curvature the prior
is folded into the Kronecker eigenbasis: the diagonal of the conjugated prior
is added to the products of factor eigenvalues, which is the best diagonal
correction in Frobenius norm and keeps determinants and diagonals cheap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .const import DEFAULT_TEMPERATURE
from .curvature import CurvatureEstimate, DiagCurvature, KfacCurvature
from .data import iter_batches
from .errors import NumericalError, StalenessError, StructuralError
from .likelihood import Likelihood
from .network import Network
from .prior import log_prior
from .tensor_core import SymEig, mat, vec

_LOGGER = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PosteriorState:
    """
    Laplace posterior at θ*.

    Attributes:
        curvature: Diagonal or KFAC estimate of the likelihood Hessian.
        delta: Expanded prior precision, one entry per parameter.
        theta: Parameters the expansion was taken at.
        temperature: T dividing the likelihood term.
        snapshot_id: Fingerprint of the network parameters at build time.
        lambda_hat: Corrected eigenvalues per layer (KFAC only), stored in
            the vec layout of the layer.
    """

    curvature: CurvatureEstimate
    delta: np.ndarray
    theta: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    snapshot_id: str = ""
    lambda_hat: Optional[List[np.ndarray]] = field(default=None)

    @property
    def kind(self) -> str:
        return self.curvature.kind

    @property
    def is_kfac(self) -> bool:
        return isinstance(self.curvature, KfacCurvature)

    @property
    def num_params(self) -> int:
        return self.delta.size

    def diagnostics(self) -> Dict[str, Any]:
        """Numbers that help locate numerical failures."""
        info: Dict[str, Any] = {
            "kind": self.kind,
            "min_delta": float(self.delta.min()) if self.delta.size else None,
            "max_delta": float(self.delta.max()) if self.delta.size else None,
            "temperature": self.temperature,
        }
        if self.lambda_hat is not None:
            info["min_lambda_hat"] = float(min(lam.min() for lam in self.lambda_hat))
        else:
            info["min_posterior_diag"] = float(posterior_diag(self).min())
        return info


@dataclass(frozen=True)
class MargLikValue:
    """Terms of the Laplace log marginal likelihood.

    ``total = log_joint − half_logdet_term + (P/2)·log 2π``.
    """

    log_likelihood: float
    log_prior: float
    log_joint: float
    half_logdet_term: float
    total: float


def kfac_prior_correction(
    eig_a: SymEig,
    eig_g: SymEig,
    delta_layer: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
    layer: Optional[int] = None,
) -> np.ndarray:
    """
    Corrected eigenvalues of (A ⊗ G) / T + diag(δ) in the Kronecker eigenbasis.

    Args:
        eig_a: Eigendecomposition of the input-side factor.
        eig_g: Eigendecomposition of the output-side factor.
        delta_layer: Prior precision of the layer's parameters in vec layout.
        temperature: Divides the factor eigenvalue products.
        layer: Layer index, used only in error messages.

    Returns:
        λ̂ = vec(λ_G λ_Aᵀ) / T + vec((Q_G∘Q_G)ᵀ mat(δ) (Q_A∘Q_A)).

    Raises:
        NumericalError: An entry of λ̂ is not strictly positive.
    """
    n_in = eig_a.eigenvalues.size
    n_out = eig_g.eigenvalues.size
    delta_layer = np.asarray(delta_layer, dtype=np.float64)
    if delta_layer.size != n_in * n_out:
        raise StructuralError(
            f"Layer prior of length {delta_layer.size} does not match factors "
            f"{n_in}x{n_out}"
        )
    qa2 = eig_a.eigenvectors**2
    qg2 = eig_g.eigenvectors**2
    delta_hat = qg2.T @ mat(delta_layer, n_out, n_in) @ qa2
    lam = np.kron(eig_a.eigenvalues, eig_g.eigenvalues) / temperature + vec(delta_hat)
    if not np.all(np.isfinite(lam)) or lam.min() <= 0.0:
        where = "" if layer is None else f" in layer {layer}"
        raise NumericalError(
            f"Corrected KFAC eigenvalue not positive{where}: min {lam.min():.3e}",
            {"layer": layer, "min_lambda_hat": float(np.nanmin(lam))},
        )
    return lam


def build_posterior(
    net: Network,
    curvature: CurvatureEstimate,
    delta: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
) -> PosteriorState:
    """Assemble the posterior precision at the network's current parameters."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (net.num_params,):
        raise StructuralError(
            f"Prior precision length {delta.size} does not match {net.num_params}"
        )
    if not np.all(np.isfinite(delta)) or delta.min() <= 0.0:
        raise NumericalError(
            "Prior precision must be finite and positive",
            {"min_delta": float(np.nanmin(delta))},
        )
    if not temperature > 0:
        raise StructuralError(f"Temperature must be positive, got {temperature}")
    lambda_hat = None
    if isinstance(curvature, KfacCurvature):
        if len(curvature.layers) != net.num_layers:
            raise StructuralError("KFAC estimate does not match the network layers")
        lambda_hat = [
            kfac_prior_correction(
                block.eig_a, block.eig_g, delta[sl.full], temperature, layer=l
            )
            for l, (block, sl) in enumerate(zip(curvature.layers, net.index))
        ]
    elif isinstance(curvature, DiagCurvature):
        if curvature.h.shape != delta.shape:
            raise StructuralError("Diagonal curvature does not match the network")
    else:
        raise StructuralError(f"Unsupported curvature {type(curvature).__name__}")
    return PosteriorState(
        curvature=curvature,
        delta=delta.copy(),
        theta=net.effective_params().copy(),
        temperature=float(temperature),
        snapshot_id=net.fingerprint(),
        lambda_hat=lambda_hat,
    )


def with_delta(net: Network, ps: PosteriorState, delta: np.ndarray) -> PosteriorState:
    """Same curvature and expansion point, new prior precision."""
    state = build_posterior(net, ps.curvature, delta, ps.temperature)
    state.theta = ps.theta.copy()
    state.snapshot_id = ps.snapshot_id
    return state


def check_fresh(ps: PosteriorState, net: Network) -> None:
    """Raise StalenessError unless ``ps`` was built at the network's parameters."""
    if ps.num_params != net.num_params or ps.snapshot_id != net.fingerprint():
        raise StalenessError(
            f"Posterior snapshot {ps.snapshot_id or '<none>'} does not match "
            f"network {net.fingerprint()}"
        )


def log_det(ps: PosteriorState, net: Network) -> float:
    """log det of the posterior precision."""
    if ps.lambda_hat is None:
        args = posterior_diag(ps, net)
        if args.min() <= 0.0:
            raise NumericalError(
                f"Posterior precision not positive: min {args.min():.3e}",
                ps.diagnostics(),
            )
        return float(np.sum(np.log(args)))
    total = 0.0
    for l, lam in enumerate(ps.lambda_hat):
        if lam.min() <= 0.0:
            raise NumericalError(
                f"Corrected KFAC eigenvalue not positive in layer {l}", ps.diagnostics()
            )
        total += float(np.sum(np.log(lam)))
    return total


def posterior_diag(ps: PosteriorState, net: Optional[Network] = None) -> np.ndarray:
    """Diagonal of the posterior precision over the flat parameters."""
    if ps.lambda_hat is None:
        return ps.curvature.h / ps.temperature + ps.delta
    if net is None:
        raise StructuralError("KFAC posterior diagonal needs the network layout")
    out = np.empty(ps.num_params)
    for sl, block, lam in zip(net.index, ps.curvature.layers, ps.lambda_hat):
        n_in, n_out = block.shape
        qa2 = block.eig_a.eigenvectors**2
        qg2 = block.eig_g.eigenvectors**2
        out[sl.full] = vec(qg2 @ mat(lam, n_out, n_in) @ qa2.T)
    return out


def log_marglik(net: Network, lik: Likelihood, data, ps: PosteriorState) -> MargLikValue:
    """
    Laplace approximation of log p(D | δ).

    Args:
        net: Network at the expansion point of ``ps``.
        lik: Likelihood of the outputs.
        data: Dataset, (x, y) pair or iterable of batches; may be empty.
        ps: Posterior built at the network's parameters.

    Returns:
        MargLikValue with
        total = (−Σ nll)/T + log_prior − ½(log det P − P·log 2π).
    """
    check_fresh(ps, net)
    nll_sum = 0.0
    for x, y in iter_batches(data):
        if x.shape[0] == 0:
            continue
        nll_sum += float(np.sum(lik.nll(net.forward(x), y)))
    log_lik = -nll_sum / ps.temperature
    log_p = log_prior(ps.delta, ps.theta)
    log_joint = log_lik + log_p
    half_logdet = 0.5 * log_det(ps, net)
    total = log_joint - half_logdet + 0.5 * ps.num_params * _LOG_2PI
    if not np.isfinite(total):
        raise NumericalError("Log marginal likelihood is not finite", ps.diagnostics())
    return MargLikValue(
        log_likelihood=log_lik,
        log_prior=log_p,
        log_joint=log_joint,
        half_logdet_term=half_logdet,
        total=float(total),
    )


def marglik_grad_delta(net: Network, ps: PosteriorState) -> np.ndarray:
    """∂ log_marglik / ∂δ_p for every parameter, at fixed θ* and curvature."""
    delta = ps.delta
    grad = 0.5 * (1.0 / delta - ps.theta**2)
    if ps.lambda_hat is None:
        return grad - 0.5 / posterior_diag(ps, net)
    for sl, block, lam in zip(net.index, ps.curvature.layers, ps.lambda_hat):
        n_in, n_out = block.shape
        qa2 = block.eig_a.eigenvectors**2
        qg2 = block.eig_g.eigenvectors**2
        grad[sl.full] -= 0.5 * vec(qg2 @ mat(1.0 / lam, n_out, n_in) @ qa2.T)
    return grad
