"""Evaluation metrics: accuracy, NLL, expected calibration error and Brier score."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel

from .const import DEFAULT_CHUNK_SIZE, ECE_BINS
from .data import iter_batches
from .errors import StructuralError
from .likelihood import Likelihood
from .network import Network

_LOGGER = logging.getLogger(__name__)


class EvalResult(BaseModel):
    """Averages over an evaluation set; classification-only fields are None for regression."""

    accuracy: Optional[float] = None
    nll: float
    ece: Optional[float] = None
    brier: Optional[float] = None
    n: int


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def expected_calibration_error(
    probs: np.ndarray, labels: np.ndarray, bins: int = ECE_BINS
) -> float:
    """Σ_b (n_b/N)·|acc_b − conf_b| over equal-width bins of the top probability."""
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    edges = np.linspace(0.0, 1.0, bins + 1)
    # bin b holds confidences in (edges[b], edges[b+1]]
    which = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        in_bin = which == b
        count = int(in_bin.sum())
        if count == 0:
            continue
        total += count / conf.size * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(total)


def brier_score(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.sum((probs - _one_hot(labels, probs.shape[1])) ** 2, axis=1)))


def evaluate_probs(probs: np.ndarray, labels: np.ndarray, bins: int = ECE_BINS) -> EvalResult:
    """Classification metrics from predicted class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise StructuralError("Cannot evaluate an empty set of predictions")
    if labels.shape != (probs.shape[0],):
        raise StructuralError(f"{labels.size} labels for {probs.shape[0]} predictions")
    picked = probs[np.arange(labels.size), labels]
    return EvalResult(
        accuracy=float(np.mean(np.argmax(probs, axis=1) == labels)),
        nll=float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny)))),
        ece=expected_calibration_error(probs, labels, bins),
        brier=brier_score(probs, labels),
        n=int(labels.size),
    )


def evaluate(net: Network, lik: Likelihood, data, bins: int = ECE_BINS) -> EvalResult:
    """
    Evaluate a network on a dataset.

    Args:
        net: Network to evaluate, masks applied.
        lik: Likelihood; calibration metrics need a classification likelihood.
        data: Dataset, (x, y) pair or iterable of batches.
        bins: Number of equal-width confidence bins for ECE.

    Returns:
        EvalResult averaged over all samples.

    Raises:
        StructuralError: The dataset is empty.
    """
    outputs, targets, nll_sum = [], [], 0.0
    for x, y in iter_batches(data, DEFAULT_CHUNK_SIZE):
        if x.shape[0] == 0:
            continue
        f = net.forward(x)
        nll_sum += float(np.sum(lik.nll(f, y)))
        outputs.append(f)
        targets.append(np.asarray(y))
    if not outputs:
        raise StructuralError("Cannot evaluate on an empty dataset")
    f = np.vstack(outputs)
    y = np.concatenate(targets)
    n = f.shape[0]
    if not lik.is_classification:
        return EvalResult(nll=nll_sum / n, n=n)
    result = evaluate_probs(lik.predictive(f), y, bins)
    return result.model_copy(update={"nll": nll_sum / n})
