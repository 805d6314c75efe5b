"""Diagnostics report written when a run fails numerically."""

from __future__ import annotations

from typing import Any, Dict, Mapping, Optional

import numpy as np

from .errors import NumericalError
from .laplace import PosteriorState
from .network import Network

# Local filesystem locations are not useful to someone reading a shared report
TO_REDACT = {
    "path",
    "data_dir",
    "output_dir",
}

REDACTED = "**REDACTED**"


def redact(data: Any, keys: set = TO_REDACT) -> Any:
    """Copy of nested dicts and lists with the values of ``keys`` replaced."""
    if isinstance(data, Mapping):
        return {
            k: (REDACTED if k in keys and v is not None else redact(v, keys))
            for k, v in data.items()
        }
    if isinstance(data, (list, tuple)):
        return [redact(v, keys) for v in data]
    return data


def network_diagnostics(net: Network) -> Dict[str, Any]:
    theta = net.params
    return {
        "dims": net.dims,
        "num_params": net.num_params,
        "non_finite_params": int(np.size(theta) - np.count_nonzero(np.isfinite(theta))),
        "max_abs_param": float(np.max(np.abs(theta[np.isfinite(theta)]), initial=0.0)),
        "masked": net.masks is not None,
        "fingerprint": net.fingerprint(),
    }


def numerical_diagnostics(
    err: Exception,
    config: Optional[Mapping[str, Any]] = None,
    net: Optional[Network] = None,
    ps: Optional[PosteriorState] = None,
) -> Dict[str, Any]:
    """
    Collect what is known about a failure.

    Args:
        err: The error that ended the run.
        config: Raw experiment configuration; filesystem paths are redacted.
        net: Network at the time of the failure.
        ps: Posterior at the time of the failure.

    Returns:
        JSON-serializable dict.
    """
    report: Dict[str, Any] = {
        "error": {"type": type(err).__name__, "message": str(err)},
        "numbers": dict(err.diagnostics) if isinstance(err, NumericalError) else {},
    }
    if config is not None:
        report["config"] = redact(dict(config))
    if net is not None:
        report["network"] = network_diagnostics(net)
    if ps is not None:
        try:
            report["posterior"] = ps.diagnostics()
        except (ArithmeticError, ValueError) as inner:
            report["posterior"] = {"unavailable": str(inner)}
    return report
