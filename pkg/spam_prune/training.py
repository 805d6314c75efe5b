"""
Training loops: MAP, SpaM (learned prior precisions), online pruning during
SpaM training, masked fine-tuning and the L1 baseline.

Every loop minimizes the data-mean objective (Σ nll + penalty) / N with
mini-batch first-order steps and a per-epoch cosine learning-rate decay.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel

from .config import MargLikConfig, OptimizerConfig, PruneConfig, TrainConfig
from .const import (
    CRITERION_OPD,
    MODE_L1,
    MODE_MAP,
    MODE_SPAM,
    RAMP_CUBIC,
)
from .curvature import estimate
from .data import Dataset, batches
from .errors import NumericalError, StructuralError
from .laplace import (
    PosteriorState,
    build_posterior,
    log_marglik,
    marglik_grad_delta,
    with_delta,
)
from .likelihood import Likelihood
from .network import Network
from .prior import PriorSpec
from .pruning import PruneMask, apply_mask, make_mask, score, scoring_batch
from .tensor_core import spawn_rngs

_LOGGER = logging.getLogger(__name__)


# Optimizers


class Optimizer:
    """First-order optimizer over a flat vector."""

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self._velocity: Optional[np.ndarray] = None

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self._velocity is None:
            self._velocity = np.zeros_like(params)
        self._velocity = self.momentum * self._velocity + grad
        return params - lr * self._velocity


class Adam(Optimizer):
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Optional[np.ndarray] = None
        self._v: Optional[np.ndarray] = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * grad**2
        m_hat = self._m / (1.0 - self.beta1**self._t)
        v_hat = self._v / (1.0 - self.beta2**self._t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: OptimizerConfig) -> Optimizer:
    if cfg.name == "sgd":
        return SGD(cfg.momentum)
    return Adam(cfg.beta1, cfg.beta2, cfg.eps)


def cosine_lr(base: float, min_lr: float, epoch: int, epochs: int) -> float:
    """Learning rate of ``epoch`` (0-based) decaying from ``base`` to ``min_lr``."""
    if epochs <= 1:
        return base
    return min_lr + 0.5 * (base - min_lr) * (1.0 + math.cos(math.pi * epoch / epochs))


# Logs


class EpochRecord(BaseModel):
    """One line of the training log."""

    epoch: int
    lr: float
    train_loss: float
    train_accuracy: Optional[float] = None
    val_accuracy: Optional[float] = None
    log_marglik: Optional[float] = None
    delta_summary: Optional[Dict[str, float]] = None
    sparsity: Optional[float] = None
    elapsed: float = 0.0


class TrainLog:
    """Append-only per-epoch records, optionally streamed to a JSON-lines file."""

    def __init__(self, sink: Optional[Path | str] = None):
        self.records: List[EpochRecord] = []
        self.sink = Path(sink) if sink is not None else None
        if self.sink is not None:
            self.sink.parent.mkdir(parents=True, exist_ok=True)
            self.sink.write_text("", encoding="utf-8")

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise StructuralError(
                f"Epoch {record.epoch} does not follow {self.records[-1].epoch}"
            )
        self.records.append(record)
        if self.sink is not None:
            with open(self.sink, "a", encoding="utf-8") as handle:
                handle.write(record.model_dump_json() + "\n")

    def __len__(self) -> int:
        return len(self.records)

    def deterministic_view(self) -> List[dict]:
        """Records without wall-clock fields."""
        return [r.model_dump(exclude={"elapsed"}) for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(r.model_dump_json() + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                log.append(EpochRecord(**json.loads(line)))
        return log


@dataclass
class TrainResult:
    """Outcome of a training run."""

    net: Network
    log: TrainLog
    prior: Optional[PriorSpec] = None
    posterior: Optional[PosteriorState] = None
    mask: Optional[PruneMask] = None
    history: List[float] = field(default_factory=list)


# Shared epoch loop


def _accuracy(net: Network, lik: Likelihood, ds: Optional[Dataset]) -> Optional[float]:
    if ds is None or len(ds) == 0 or not lik.is_classification:
        return None
    return float(np.mean(np.argmax(net.forward(ds.features), axis=1) == ds.labels))


class _Fitter:
    """Runs epochs of masked mini-batch descent on one network."""

    def __init__(
        self,
        net: Network,
        lik: Likelihood,
        data: Dataset,
        cfg: TrainConfig,
        epochs: int,
        log: TrainLog,
        val: Optional[Dataset] = None,
    ):
        if len(data) == 0:
            raise StructuralError("Cannot train on an empty dataset")
        self.net = net
        self.lik = lik
        self.data = data
        self.cfg = cfg
        self.epochs = epochs
        self.log = log
        self.val = val
        self.optimizer = make_optimizer(cfg.optimizer)
        self.batch_rng, self.curvature_rng, self.score_rng = spawn_rngs(cfg.seed, 3)
        self.started = time.perf_counter()

    def run_epoch(
        self, epoch: int, delta: Optional[np.ndarray], l1: float = 0.0
    ) -> EpochRecord:
        net, lik = self.net, self.lik
        n_total = len(self.data)
        lr = cosine_lr(self.cfg.lr, self.cfg.min_lr, epoch, self.epochs)
        loss_sum, correct = 0.0, 0
        for x, y in batches(self.data, self.cfg.batch_size, self.batch_rng):
            cache = net.forward_cache(x)
            nll = lik.nll(cache.output, y)
            grad, _ = net.backward_cache(cache, lik.output_grad(cache.output, y) / x.shape[0])
            if delta is not None:
                grad = grad + delta * net.params / n_total
            if l1:
                grad = grad + l1 * np.sign(net.params) / n_total
            if net.masks is not None:
                grad = grad * net.masks
            net.params = self.optimizer.step(net.params, grad, lr)
            if net.masks is not None:
                net.params *= net.masks
            loss_sum += float(np.sum(nll))
            if lik.is_classification:
                correct += int(np.sum(np.argmax(cache.output, axis=1) == y))
        loss = loss_sum / n_total
        if not np.isfinite(loss) or not np.all(np.isfinite(net.params)):
            raise NumericalError(
                f"Training diverged in epoch {epoch}", {"epoch": epoch, "loss": loss}
            )
        _LOGGER.debug("Epoch %d lr %.2e loss %.4f", epoch, lr, loss)
        return EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=loss,
            train_accuracy=correct / n_total if lik.is_classification else None,
            val_accuracy=_accuracy(net, lik, self.val),
            elapsed=time.perf_counter() - self.started,
        )


# Public loops


def train_map(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    prior: Optional[PriorSpec] = None,
    delta: Optional[np.ndarray] = None,
    log_path: Optional[Path | str] = None,
) -> TrainResult:
    """
    Minimize Σ nll + ½ Σ δ_p θ_p² with a fixed prior.

    Args:
        net: Initial network; not modified.
        lik: Likelihood of the outputs.
        data: Training set.
        cfg: Training settings; ``cfg.prior`` and ``cfg.prior_precision``
            define δ unless ``prior`` or ``delta`` is given.
        val: Optional validation set for the log.
        prior: Fixed prior to use instead of the configured one.
        delta: Explicit per-parameter precision, zero allowed.
        log_path: Stream the log to this JSON-lines file.

    Returns:
        TrainResult with the trained copy and its log.
    """
    net = net.copy()
    if delta is None:
        if prior is None:
            prior = PriorSpec.initial(cfg.prior, net, cfg.prior_precision)
        delta = prior.expand(net)
    log = TrainLog(log_path)
    fitter = _Fitter(net, lik, data, cfg, cfg.epochs, log, val)
    for epoch in range(cfg.epochs):
        log.append(fitter.run_epoch(epoch, delta))
    _LOGGER.info("MAP training finished after %d epochs", cfg.epochs)
    return TrainResult(net=net, log=log, prior=prior)


def train_l1(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    log_path: Optional[Path | str] = None,
) -> TrainResult:
    """Minimize Σ nll + λ Σ |θ_p| with subgradient 0 at 0."""
    net = net.copy()
    log = TrainLog(log_path)
    fitter = _Fitter(net, lik, data, cfg, cfg.epochs, log, val)
    for epoch in range(cfg.epochs):
        log.append(fitter.run_epoch(epoch, None, l1=cfg.l1_lambda))
    _LOGGER.info("L1 training (λ=%g) finished after %d epochs", cfg.l1_lambda, cfg.epochs)
    return TrainResult(net=net, log=log)


def is_marglik_epoch(epoch: int, mcfg: MargLikConfig) -> bool:
    """Whether prior precisions are updated at the end of ``epoch`` (0-based)."""
    return (
        epoch >= mcfg.n_epochs_burnin
        and (epoch - mcfg.n_epochs_burnin) % mcfg.marglik_frequency == 0
    )


def fit_prior(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    prior: PriorSpec,
    mcfg: MargLikConfig,
    rng: Optional[np.random.Generator] = None,
):
    """
    Refit prior precisions by gradient ascent on the Laplace marginal likelihood.

    Curvature is computed once over ``data`` at the network's current
    parameters; ``mcfg.hyper_steps`` Adam steps then move the log-precisions.

    Returns:
        (updated prior, posterior at the updated prior, marglik value).

    Raises:
        NumericalError: Non-finite marginal likelihood or gradient.
    """
    curvature = estimate(mcfg.curvature, net, lik, data, rng)
    ps = build_posterior(net, curvature, prior.expand(net), mcfg.temperature)
    adam = Adam()
    log_delta = prior.log_delta.copy()
    for step in range(mcfg.hyper_steps):
        if step:
            ps = with_delta(net, ps, prior.expand(net))
        grad = prior.chain_to_hypers(net, marglik_grad_delta(net, ps))
        if not np.all(np.isfinite(grad)):
            raise NumericalError(
                "Marginal likelihood gradient is not finite",
                {**ps.diagnostics(), "hyper_step": step},
            )
        log_delta = adam.step(log_delta, -grad, mcfg.hyper_lr)
        prior = prior.with_log_delta(log_delta)
    if mcfg.hyper_steps:
        ps = with_delta(net, ps, prior.expand(net))
    try:
        value = log_marglik(net, lik, data, ps)
    except NumericalError as err:
        err.diagnostics.update(ps.diagnostics())
        raise
    return prior, ps, value


def _final_posterior(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    prior: PriorSpec,
    ps: Optional[PosteriorState],
    mcfg: MargLikConfig,
    rng: np.random.Generator,
) -> PosteriorState:
    if ps is not None and ps.snapshot_id == net.fingerprint():
        return ps
    _LOGGER.debug("Rebuilding posterior at the final parameters")
    curvature = estimate(mcfg.curvature, net, lik, data, rng)
    return build_posterior(net, curvature, prior.expand(net), mcfg.temperature)


def _warn_burnin(cfg: TrainConfig) -> None:
    if cfg.marglik.n_epochs_burnin > cfg.epochs:
        _LOGGER.warning(
            "Burn-in of %d epochs exceeds %d training epochs; prior stays fixed",
            cfg.marglik.n_epochs_burnin,
            cfg.epochs,
        )


def train_spam(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    log_path: Optional[Path | str] = None,
) -> TrainResult:
    """
    Train while learning the prior precisions by marginal-likelihood ascent.

    Epochs run MAP steps against the current δ. At the end of every epoch
    past the burn-in that falls on the update frequency, curvature over the
    full training set is rebuilt and the prior is refit. The returned
    posterior matches the returned network.
    """
    mcfg = cfg.marglik
    _warn_burnin(cfg)
    net = net.copy()
    prior = PriorSpec.initial(mcfg.prior, net, mcfg.prior_init)
    log = TrainLog(log_path)
    fitter = _Fitter(net, lik, data, cfg, cfg.epochs, log, val)
    ps: Optional[PosteriorState] = None
    history: List[float] = []
    for epoch in range(cfg.epochs):
        record = fitter.run_epoch(epoch, prior.expand(net))
        if is_marglik_epoch(epoch, mcfg):
            prior, ps, value = _marglik_event(net, lik, data, prior, mcfg, fitter, epoch)
            history.append(value)
            record.log_marglik = value
            record.delta_summary = prior.summary()
        log.append(record)
    ps = _final_posterior(net, lik, data, prior, ps, mcfg, fitter.curvature_rng)
    _LOGGER.info("SpaM training finished after %d epochs", cfg.epochs)
    return TrainResult(net=net, log=log, prior=prior, posterior=ps, history=history)


def _marglik_event(net, lik, data, prior, mcfg, fitter: _Fitter, epoch: int):
    try:
        prior, ps, value = fit_prior(net, lik, data, prior, mcfg, fitter.curvature_rng)
    except NumericalError as err:
        err.diagnostics.setdefault("epoch", epoch)
        raise
    _LOGGER.info(
        "Epoch %d: log marglik %.4f, median δ %.4g", epoch, value.total, prior.summary()["median"]
    )
    return prior, ps, value.total


def ramp_sparsity(target: float, epoch: int, epochs: int, burnin: int, ramp: str) -> float:
    """Sparsity after ``epoch`` (0-based) on a ramp from 0 at burn-in to target at the end."""
    span = epochs - burnin
    if span <= 0:
        return target
    frac = min(max((epoch + 1 - burnin) / span, 0.0), 1.0)
    if ramp == RAMP_CUBIC:
        return target * (1.0 - (1.0 - frac) ** 3)
    return target * frac


def train_online_spam(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    cfg: TrainConfig,
    prune_cfg: PruneConfig,
    val: Optional[Dataset] = None,
    log_path: Optional[Path | str] = None,
) -> TrainResult:
    """
    SpaM training that prunes gradually after each prior update.

    Sparsity follows the configured ramp and reaches ``target_sparsity`` at
    the final epoch; pruned entries stay zero for the rest of training.
    """
    mcfg = cfg.marglik
    target = prune_cfg.target_sparsity
    criterion = prune_cfg.online_criterion
    exempt = prune_cfg.effective_exempt_last
    _warn_burnin(cfg)
    net = net.copy()
    prior = PriorSpec.initial(mcfg.prior, net, mcfg.prior_init)
    log = TrainLog(log_path)
    fitter = _Fitter(net, lik, data, cfg, cfg.epochs, log, val)
    batch = scoring_batch(data, fitter.score_rng, prune_cfg.scoring_batch)
    ps: Optional[PosteriorState] = None
    mask: Optional[PruneMask] = None
    history: List[float] = []
    for epoch in range(cfg.epochs):
        record = fitter.run_epoch(epoch, prior.expand(net))
        event = is_marglik_epoch(epoch, mcfg)
        if event:
            prior, ps, value = _marglik_event(net, lik, data, prior, mcfg, fitter, epoch)
            history.append(value)
            record.log_marglik = value
            record.delta_summary = prior.summary()
        last = epoch == cfg.epochs - 1
        if target > 0 and (event or last):
            if criterion == CRITERION_OPD:
                ps = _final_posterior(net, lik, data, prior, ps, mcfg, fitter.curvature_rng)
            sparsity = ramp_sparsity(
                target, epoch, cfg.epochs, mcfg.n_epochs_burnin, prune_cfg.ramp
            )
            scores = score(criterion, net, lik, batch, ps, fitter.score_rng)
            mask = make_mask(
                net,
                scores,
                sparsity,
                prune_cfg.scope,
                prune_cfg.structured,
                exempt,
                current=mask,
            )
            apply_mask(net, mask)
            record.sparsity = mask.sparsity
            _LOGGER.info("Epoch %d: pruned to sparsity %.3f", epoch, mask.sparsity)
        log.append(record)
    ps = _final_posterior(net, lik, data, prior, ps, mcfg, fitter.curvature_rng)
    return TrainResult(net=net, log=log, prior=prior, posterior=ps, mask=mask, history=history)


def finetune(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    epochs: int,
    cfg: TrainConfig,
    prior: Optional[PriorSpec] = None,
    val: Optional[Dataset] = None,
) -> Network:
    """Continue training a masked network; the mask is left unchanged."""
    if net.masks is None:
        raise StructuralError("Fine-tuning needs a masked network")
    net = net.copy()
    if epochs == 0:
        return net
    if prior is None:
        prior = PriorSpec.initial(cfg.prior, net, cfg.prior_precision)
    delta = prior.expand(net)
    fitter = _Fitter(net, lik, data, cfg, epochs, TrainLog(), val)
    for epoch in range(epochs):
        fitter.run_epoch(epoch, delta)
    _LOGGER.info("Fine-tuned for %d epochs", epochs)
    return net


def train(
    net: Network,
    lik: Likelihood,
    data: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    log_path: Optional[Path | str] = None,
) -> TrainResult:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == MODE_MAP:
        return train_map(net, lik, data, cfg, val, log_path=log_path)
    if cfg.mode == MODE_SPAM:
        return train_spam(net, lik, data, cfg, val, log_path)
    if cfg.mode == MODE_L1:
        return train_l1(net, lik, data, cfg, val, log_path)
    raise StructuralError(f"Unknown training mode {cfg.mode!r}")
