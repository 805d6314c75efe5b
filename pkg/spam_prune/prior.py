"""
Structured Gaussian priors on the flat parameter vector.

Precisions are stored as log-values in one flat vector whose layout depends on
the prior kind:

- scalar: one entry
- layerwise: one entry per layer
- unitwise: one block per unit layer, the input layer first, then the output
  units of every network layer (M_0 = input dim, M_l = out_dim of layer l).
  Weight i→j gets the product of its input and output unit factors; a bias
  is a weight from the constant input and gets its output factor squared, so
  equal factors expand to one precision everywhere.
- parameterwise: one entry per parameter
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, List

import numpy as np

from .const import (
    DEFAULT_PRIOR_PRECISION,
    PRIOR_KINDS,
    PRIOR_LAYERWISE,
    PRIOR_PARAMETERWISE,
    PRIOR_SCALAR,
    PRIOR_UNITWISE,
)
from .errors import StructuralError
from .network import Network

_LOGGER = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


def hyper_size(kind: str, net: Network) -> int:
    """Number of log-precision hyperparameters ``kind`` needs on ``net``."""
    if kind == PRIOR_SCALAR:
        return 1
    if kind == PRIOR_LAYERWISE:
        return net.num_layers
    if kind == PRIOR_UNITWISE:
        return sum(net.dims)
    if kind == PRIOR_PARAMETERWISE:
        return net.num_params
    raise StructuralError(f"Unknown prior kind {kind!r}")


def _unit_offsets(net: Network) -> List[slice]:
    """Slices of each unit layer's block inside a unitwise hyper vector."""
    slices, offset = [], 0
    for m in net.dims:
        slices.append(slice(offset, offset + m))
        offset += m
    return slices


@dataclass(frozen=True)
class PriorSpec:
    """
    Prior precisions δ in log-space.

    Attributes:
        kind: One of scalar, layerwise, unitwise, parameterwise.
        log_delta: Flat vector of log-precisions laid out per ``kind``.
    """

    kind: str
    log_delta: np.ndarray

    @classmethod
    def initial(
        cls, kind: str, net: Network, delta: float = DEFAULT_PRIOR_PRECISION
    ) -> "PriorSpec":
        """All precisions equal to ``delta``."""
        if kind not in PRIOR_KINDS:
            raise StructuralError(f"Unknown prior kind {kind!r}")
        if not delta > 0:
            raise StructuralError(f"Prior precision must be positive, got {delta}")
        size = hyper_size(kind, net)
        if kind == PRIOR_UNITWISE:
            # every unitwise precision is a product of two unit factors
            value = 0.5 * np.log(delta)
        else:
            value = np.log(delta)
        return cls(kind, np.full(size, value))

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.log_delta)

    def with_log_delta(self, log_delta: np.ndarray) -> "PriorSpec":
        log_delta = np.asarray(log_delta, dtype=np.float64)
        if log_delta.shape != self.log_delta.shape:
            raise StructuralError(
                f"Hyperparameter length {log_delta.size} does not match "
                f"{self.log_delta.size}"
            )
        return PriorSpec(self.kind, log_delta.copy())

    def check(self, net: Network) -> None:
        """Raise StructuralError if the spec does not fit ``net``."""
        expected = hyper_size(self.kind, net)
        if self.log_delta.shape != (expected,):
            raise StructuralError(
                f"{self.kind} prior needs {expected} hyperparameters for this network, "
                f"got {self.log_delta.size}"
            )

    def expand(self, net: Network) -> np.ndarray:
        """One precision per parameter of ``net``."""
        self.check(net)
        delta = self.delta
        if self.kind == PRIOR_SCALAR:
            return np.full(net.num_params, delta[0])
        if self.kind == PRIOR_PARAMETERWISE:
            return delta.copy()
        out = np.empty(net.num_params)
        if self.kind == PRIOR_LAYERWISE:
            for l, sl in enumerate(net.index):
                out[sl.full] = delta[l]
            return out
        units = _unit_offsets(net)
        for l, sl in enumerate(net.index):
            d_in = delta[units[l]]
            d_out = delta[units[l + 1]]
            out[sl.weight] = np.outer(d_in, d_out).ravel()
            if sl.bias is not None:
                out[sl.bias] = d_out**2
        return out

    def chain_to_hypers(self, net: Network, grad_delta: np.ndarray) -> np.ndarray:
        """
        Pull a gradient over the expanded precisions back to ``log_delta``.

        Args:
            net: Network the spec is expanded on.
            grad_delta: ∂F/∂δ_p for every parameter p.

        Returns:
            ∂F/∂log_delta with the layout of ``log_delta``.
        """
        self.check(net)
        grad_delta = np.asarray(grad_delta, dtype=np.float64)
        if grad_delta.shape != (net.num_params,):
            raise StructuralError(
                f"Gradient length {grad_delta.size} does not match {net.num_params}"
            )
        delta = self.delta
        if self.kind == PRIOR_SCALAR:
            return np.array([delta[0] * grad_delta.sum()])
        if self.kind == PRIOR_PARAMETERWISE:
            return delta * grad_delta
        out = np.zeros_like(delta)
        if self.kind == PRIOR_LAYERWISE:
            for l, sl in enumerate(net.index):
                out[l] = delta[l] * grad_delta[sl.full].sum()
            return out
        units = _unit_offsets(net)
        for l, (spec, sl) in enumerate(zip(net.layers, net.index)):
            d_in = delta[units[l]]
            d_out = delta[units[l + 1]]
            weighted = grad_delta[sl.weight].reshape(spec.in_dim, spec.out_dim)
            weighted = weighted * np.outer(d_in, d_out)
            out[units[l]] += weighted.sum(axis=1)
            out[units[l + 1]] += weighted.sum(axis=0)
            if sl.bias is not None:
                out[units[l + 1]] += 2.0 * grad_delta[sl.bias] * d_out**2
        return out

    def summary(self) -> Dict[str, float]:
        """Min, max, mean and median of the stored precisions."""
        delta = self.delta
        return {
            "min": float(delta.min()),
            "max": float(delta.max()),
            "mean": float(delta.mean()),
            "median": float(np.median(delta)),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "log_delta": self.log_delta.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PriorSpec":
        kind = data.get("kind")
        if kind not in PRIOR_KINDS:
            raise StructuralError(f"Unknown prior kind {kind!r}")
        log_delta = np.asarray(data.get("log_delta", []), dtype=np.float64)
        if log_delta.ndim != 1 or log_delta.size == 0:
            raise StructuralError("Prior log_delta must be a nonempty list")
        return cls(kind, log_delta)


def log_prior(delta: np.ndarray, theta: np.ndarray) -> float:
    """Log density of θ under N(0, diag(δ)⁻¹)."""
    delta = np.asarray(delta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if delta.shape != theta.shape:
        raise StructuralError(
            f"Precision length {delta.size} does not match parameter length {theta.size}"
        )
    return float(0.5 * np.sum(np.log(delta) - delta * theta**2 - _LOG_2PI))
