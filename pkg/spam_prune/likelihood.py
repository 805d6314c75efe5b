"""
Negative log-likelihoods and their output-space derivatives.

All functions work on batches: ``f`` is (N, C) and the per-sample results are
stacked along the first axis. A single output vector is accepted and the
batch axis is dropped from the result.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import NumericalError, StructuralError

_LOGGER = logging.getLogger(__name__)

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _as_batch(f: np.ndarray) -> Tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 1:
        return f[None, :], True
    if f.ndim != 2:
        raise StructuralError(f"Outputs must be a vector or a batch, got rank {f.ndim}")
    return f, False


class Likelihood(ABC):
    """Observation model p(y | f) evaluated at network outputs f."""

    kind: str = ""

    @property
    def is_classification(self) -> bool:
        return False

    @abstractmethod
    def check_targets(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Validate targets against a batch of outputs and return them."""

    @abstractmethod
    def _nll(self, f: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _grad(self, f: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _factor(self, f: np.ndarray) -> np.ndarray: ...

    def nll(self, f: np.ndarray, y) -> np.ndarray | float:
        """Per-sample negative log-likelihood."""
        fb, single = _as_batch(f)
        yb = self.check_targets(fb, np.asarray(y)[None, ...] if single else y)
        out = self._nll(fb, yb)
        return float(out[0]) if single else out

    def output_grad(self, f: np.ndarray, y) -> np.ndarray:
        """∂ nll / ∂ f per sample."""
        fb, single = _as_batch(f)
        yb = self.check_targets(fb, np.asarray(y)[None, ...] if single else y)
        out = self._grad(fb, yb)
        return out[0] if single else out

    def hessian_factor(self, f: np.ndarray, y=None) -> np.ndarray:
        """Per-sample L with L Lᵀ equal to the output Hessian.

        Both implemented likelihoods have Hessians independent of ``y``.
        """
        fb, single = _as_batch(f)
        out = self._factor(fb)
        return out[0] if single else out

    def output_hessian(self, f: np.ndarray, y=None) -> np.ndarray:
        """∂² nll / ∂ f² per sample, shape (N, C, C)."""
        factor = self.hessian_factor(f, y)
        if factor.ndim == 2:
            return factor @ factor.T
        return np.einsum("nij,nkj->nik", factor, factor)

    @abstractmethod
    def sample_targets(self, f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw targets from p(y | f) for each row of ``f``."""

    @abstractmethod
    def predictive(self, f: np.ndarray) -> np.ndarray:
        """Class probabilities or predicted means for a batch of outputs."""

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class Categorical(Likelihood):
    """Softmax cross-entropy over integer class labels."""

    kind = "categorical"

    @property
    def is_classification(self) -> bool:
        return True

    def check_targets(self, f: np.ndarray, y) -> np.ndarray:
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != f.shape[0]:
            raise StructuralError(
                f"Expected {f.shape[0]} integer labels, got shape {y.shape}"
            )
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise StructuralError("Class labels must be integers")
            y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= f.shape[1]):
            raise StructuralError(
                f"Class label outside [0, {f.shape[1]}): "
                f"min {int(y.min())}, max {int(y.max())}"
            )
        return y.astype(np.int64)

    def _nll(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        return -log_softmax(f, axis=1)[np.arange(f.shape[0]), y]

    def _grad(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        grad = softmax(f, axis=1)
        grad[np.arange(f.shape[0]), y] -= 1.0
        return grad

    def _factor(self, f: np.ndarray) -> np.ndarray:
        # L = diag(√p) − p √pᵀ satisfies L Lᵀ = diag(p) − p pᵀ since Σ p = 1
        p = softmax(f, axis=1)
        root = np.sqrt(p)
        n, c = p.shape
        factor = np.zeros((n, c, c))
        idx = np.arange(c)
        factor[:, idx, idx] = root
        factor -= p[:, :, None] * root[:, None, :]
        if not np.all(np.isfinite(factor)):
            raise NumericalError("Non-finite softmax Hessian factor")
        return factor

    def sample_targets(self, f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        fb, _ = _as_batch(f)
        p = softmax(fb, axis=1)
        cum = np.cumsum(p, axis=1)
        u = rng.random(fb.shape[0])[:, None]
        return np.minimum((u > cum).sum(axis=1), fb.shape[1] - 1).astype(np.int64)

    def predictive(self, f: np.ndarray) -> np.ndarray:
        fb, single = _as_batch(f)
        p = softmax(fb, axis=1)
        return p[0] if single else p


class Gaussian(Likelihood):
    """Homoscedastic Gaussian regression with fixed noise variance σ²."""

    kind = "gaussian"

    def __init__(self, sigma2: float = 1.0):
        if not sigma2 > 0:
            raise StructuralError(f"Noise variance must be positive, got {sigma2}")
        self.sigma2 = float(sigma2)

    def check_targets(self, f: np.ndarray, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1 and f.shape[1] == 1 and y.shape[0] == f.shape[0]:
            y = y[:, None]
        if y.shape != f.shape:
            raise StructuralError(
                f"Regression targets of shape {y.shape} do not match outputs {f.shape}"
            )
        return y

    def _nll(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        d = f.shape[1]
        sq = np.sum((y - f) ** 2, axis=1)
        return 0.5 * sq / self.sigma2 + d * (_HALF_LOG_2PI + 0.5 * np.log(self.sigma2))

    def _grad(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (f - y) / self.sigma2

    def _factor(self, f: np.ndarray) -> np.ndarray:
        n, c = f.shape
        return np.broadcast_to(np.eye(c) / np.sqrt(self.sigma2), (n, c, c)).copy()

    def sample_targets(self, f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        fb, _ = _as_batch(f)
        return fb + np.sqrt(self.sigma2) * rng.standard_normal(fb.shape)

    def predictive(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma2": self.sigma2}


def likelihood_from_dict(data: dict) -> Likelihood:
    """Rebuild a likelihood from :meth:`Likelihood.to_dict` output."""
    kind = data.get("kind")
    if kind == Categorical.kind:
        return Categorical()
    if kind == Gaussian.kind:
        return Gaussian(data.get("sigma2", 1.0))
    raise StructuralError(f"Unknown likelihood kind {kind!r}")


def mean_nll_and_grad(net, lik: Likelihood, x: np.ndarray, y) -> Tuple[float, np.ndarray]:
    """Batch-mean negative log-likelihood of ``net`` and its parameter gradient."""
    cache = net.forward_cache(x)
    n = cache.output.shape[0]
    if n == 0:
        raise StructuralError("Cannot take a loss gradient over an empty batch")
    loss = float(np.mean(lik.nll(cache.output, y)))
    grad, _ = net.backward_cache(cache, lik.output_grad(cache.output, y) / n)
    return loss, grad
