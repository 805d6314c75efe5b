"""
Command-line front door.

Verbs: ``train``, ``prune``, ``compact``, ``sweep`` and ``eval``. Every verb
reads one JSON experiment configuration; artifacts of a (mode, seed) run live
under ``<out>/<mode>/seed<seed>/``.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .compaction import cost, structured_pipeline
from .config import ExperimentConfig, PruneConfig, load_config
from .const import (
    CHECKPOINT_FILE,
    COMPACT_DIR,
    CRITERIA,
    CRITERION_OPD,
    DIAGNOSTICS_FILE,
    EVAL_FILE,
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_NUMERICAL,
    EXIT_OK,
    MANIFEST_FILE,
    MASK_FILE,
    MODE_SPAM,
    POSTERIOR_FILE,
    PROVENANCE_FILE,
    REPORT_CSV_FILE,
    REPORT_JSON_FILE,
    SWEEP_CSV_FILE,
    TRAIN_LOG_FILE,
)
from .curvature import estimate
from .data import (
    Dataset,
    load_csv,
    load_mnist_idx,
    mnist_paths,
    split,
    standardize,
    synth_blobs,
    synth_linear,
    synth_noise_features,
)
from .diagnostics import numerical_diagnostics
from .errors import ConfigError, LayerCollapseError, NumericalError, SpamPruneError
from .laplace import PosteriorState, build_posterior, check_fresh
from .likelihood import Categorical, Gaussian, Likelihood
from .metrics import evaluate
from .network import Network
from .prior import PriorSpec
from .pruning import apply_mask, make_mask, score, score_structured, scoring_batch
from .reporting import PruneReport, ReportRow, aggregate, write_sweep_csv
from .storage import (
    load_checkpoint,
    load_posterior,
    save_checkpoint,
    save_mask,
    save_posterior,
    write_json,
    write_manifest,
)
from .tensor_core import make_rng
from .training import finetune, train, train_online_spam

_LOGGER = logging.getLogger(__name__)

VERBS = ["train", "prune", "compact", "sweep", "eval"]


@dataclass
class ExperimentData:
    """Train and test splits with the likelihood that fits their labels."""

    train: Dataset
    test: Dataset
    lik: Likelihood


@dataclass
class TrainedRun:
    """A trained network loaded back from, or about to be written to, a run directory."""

    mode: str
    seed: int
    net: Network
    prior: Optional[PriorSpec]
    posterior: Optional[PosteriorState]
    directory: Path


# Data and networks


def prepare_data(config: ExperimentConfig) -> ExperimentData:
    """Load or generate the configured dataset and standardize it on the train split."""
    ds = config.dataset
    rng = make_rng(ds.seed)
    lik: Likelihood = Categorical()
    if ds.kind == "mnist":
        images, labels = mnist_paths("train", ds.data_dir)
        train_ds = load_mnist_idx(images, labels, ds.train_limit, "train")
        images, labels = mnist_paths("test", ds.data_dir)
        test_ds = load_mnist_idx(images, labels, None, "test")
        return ExperimentData(train=train_ds, test=test_ds, lik=lik)
    if ds.kind == "csv":
        if ds.path is None:
            raise ConfigError("dataset.path is required for csv datasets")
        full = load_csv(ds.path)
    elif ds.kind == "blobs":
        full = synth_blobs(rng, ds.n, ds.d, ds.classes, ds.noise)
    elif ds.kind == "noise_features":
        full = synth_noise_features(rng, ds.n, ds.d, ds.d_noise, ds.classes, ds.noise)
    else:
        full, _ = synth_linear(rng, ds.n, ds.d, ds.noise)
        lik = Gaussian(ds.noise**2 if ds.noise > 0 else 1.0)
    train_ds, test_ds = split(full, rng, ds.train_fraction)
    train_ds, test_ds = standardize(train_ds, test_ds)
    _LOGGER.info(
        "Prepared %s data: %d train and %d test samples", ds.kind, len(train_ds), len(test_ds)
    )
    return ExperimentData(train=train_ds, test=test_ds, lik=lik)


def build_network(config: ExperimentConfig, data: ExperimentData, seed: int) -> Network:
    arch = config.architecture
    dims = [data.train.num_features, *arch.hidden, data.train.num_classes]
    return Network.from_dims(dims, arch.activation, seed=seed, has_bias=arch.has_bias)


def run_directory(out: Path, mode: str, seed: int) -> Path:
    return out / mode / f"seed{seed}"


def cell_rng(seed: int, criterion: str, sparsity: float) -> np.random.Generator:
    """Generator owned by one (seed, criterion, sparsity) cell."""
    key = [int(seed), CRITERIA.index(criterion), int(round(sparsity * 10_000))]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


# Training


def train_run(
    config: ExperimentConfig, data: ExperimentData, mode: str, seed: int, out: Path
) -> TrainedRun:
    """Train one (mode, seed) cell and write its artifacts with a manifest."""
    directory = run_directory(out, mode, seed)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = config.train_config(mode, seed)
    net = build_network(config, data, seed)
    log_path = directory / TRAIN_LOG_FILE
    if mode == MODE_SPAM and config.prune.online:
        result = train_online_spam(
            net, data.lik, data.train, cfg, config.prune, data.test, log_path
        )
    else:
        result = train(net, data.lik, data.train, cfg, data.test, log_path)
    extra = {"mode": mode, "seed": seed, "likelihood": data.lik.to_dict()}
    artifacts = [save_checkpoint(directory / CHECKPOINT_FILE, result.net, result.prior, extra)]
    if result.posterior is not None:
        artifacts.append(save_posterior(directory / POSTERIOR_FILE, result.posterior))
    if result.mask is not None:
        artifacts.append(save_mask(directory / MASK_FILE, result.mask, seed))
    write_manifest(directory / MANIFEST_FILE, artifacts)
    _LOGGER.info("Finished %s run for seed %d in %s", mode, seed, directory)
    return TrainedRun(mode, seed, result.net, result.prior, result.posterior, directory)


def load_run(checkpoint: Path) -> TrainedRun:
    """Read a checkpoint and, when present, the posterior snapshot beside it."""
    net, prior, header = load_checkpoint(checkpoint)
    extra = header.get("extra", {})
    posterior_path = checkpoint.parent / POSTERIOR_FILE
    posterior = load_posterior(posterior_path) if posterior_path.exists() else None
    return TrainedRun(
        mode=extra.get("mode", ""),
        seed=int(extra.get("seed", net.seed)),
        net=net,
        prior=prior,
        posterior=posterior,
        directory=checkpoint.parent,
    )


def find_runs(config: ExperimentConfig, out: Path, checkpoint: Optional[Path]) -> List[TrainedRun]:
    if checkpoint is not None:
        return [load_run(checkpoint)]
    runs = []
    for mode in config.modes:
        for seed in config.seeds:
            path = run_directory(out, mode, seed) / CHECKPOINT_FILE
            if not path.exists():
                raise ConfigError(f"No checkpoint at {path}; run the train verb first")
            runs.append(load_run(path))
    return runs


def posterior_for(
    run: TrainedRun, config: ExperimentConfig, data: ExperimentData
) -> PosteriorState:
    """
    Posterior used by OPD scoring.

    A stored snapshot is reused when it matches the network. Otherwise a
    Laplace approximation is built at the trained parameters with the
    configured prune curvature and the prior the network was trained with.

    Raises:
        ConfigError: No usable snapshot and ``prune.curvature`` is null.
    """
    if run.posterior is not None:
        check_fresh(run.posterior, run.net)
        return run.posterior
    kind = config.prune.curvature
    if kind is None:
        raise ConfigError(
            f"OPD needs a posterior for the {run.mode or 'given'} network and "
            "prune.curvature is null"
        )
    _LOGGER.warning("No posterior snapshot for %s; building one with %s", run.directory, kind)
    train_cfg = config.train_config(run.mode or config.train.mode, run.seed)
    prior = run.prior or PriorSpec.initial(train_cfg.prior, run.net, train_cfg.prior_precision)
    curvature = estimate(kind, run.net, data.lik, data.train, make_rng(run.seed))
    return build_posterior(
        run.net, curvature, prior.expand(run.net), train_cfg.marglik.temperature
    )


# Pruning


def prune_cell(
    run: TrainedRun,
    config: ExperimentConfig,
    data: ExperimentData,
    criterion: str,
    sparsity: float,
    ps: Optional[PosteriorState] = None,
) -> ReportRow:
    """Prune a fresh copy of the run's network, fine-tune it and evaluate."""
    started = time.perf_counter()
    prune_cfg: PruneConfig = config.prune
    net = run.net.copy()
    rng = cell_rng(run.seed, criterion, sparsity)
    batch = scoring_batch(data.train, rng, prune_cfg.scoring_batch)
    scores = score(criterion, net, data.lik, batch, ps, rng)
    exempt = prune_cfg.effective_exempt_last
    if prune_cfg.structured:
        scores = score_structured(scores, net, exempt_last=exempt)
    mask = make_mask(net, scores, sparsity, prune_cfg.scope, prune_cfg.structured, exempt)
    apply_mask(net, mask)
    train_cfg = config.train_config(run.mode or config.train.mode, run.seed)
    if mask.num_pruned and prune_cfg.finetune_epochs:
        net = finetune(net, data.lik, data.train, prune_cfg.finetune_epochs, train_cfg, run.prior)
    result = evaluate(net, data.lik, data.test)
    report = cost(net)
    return ReportRow(
        seed=run.seed,
        mode=run.mode,
        criterion=criterion,
        sparsity=sparsity,
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


def _needs_posterior(config: ExperimentConfig) -> bool:
    return CRITERION_OPD in config.prune.criteria


def prune_run(
    run: TrainedRun, config: ExperimentConfig, data: ExperimentData
) -> List[ReportRow]:
    ps = posterior_for(run, config, data) if _needs_posterior(config) else None
    rows = []
    for criterion in config.prune.criteria:
        for sparsity in config.prune.sparsities:
            row = prune_cell(run, config, data, criterion, sparsity, ps)
            _LOGGER.info(
                "%s seed %d %s@%.2f: accuracy %s, nll %.4f",
                run.mode,
                run.seed,
                criterion,
                sparsity,
                "n/a" if row.accuracy is None else f"{row.accuracy:.4f}",
                row.nll,
            )
            rows.append(row)
    return rows


def _write_report(report: PruneReport, directory: Path) -> None:
    ordered = PruneReport(
        sorted(report.rows, key=lambda r: (r.mode, r.seed, r.criterion, r.sparsity))
    )
    ordered.write_csv(directory / REPORT_CSV_FILE)
    ordered.write_json(directory / REPORT_JSON_FILE)


# Verbs


def cmd_train(config: ExperimentConfig, out: Path) -> List[TrainedRun]:
    data = prepare_data(config)
    return [
        train_run(config, data, mode, seed, out)
        for mode in config.modes
        for seed in config.seeds
    ]


def cmd_prune(
    config: ExperimentConfig, out: Path, checkpoint: Optional[Path] = None
) -> PruneReport:
    data = prepare_data(config)
    report = PruneReport()
    for run in find_runs(config, out, checkpoint):
        report.extend(prune_run(run, config, data))
    _write_report(report, out)
    return report


def compact_cell(
    run: TrainedRun,
    config: ExperimentConfig,
    data: ExperimentData,
    criterion: str,
    target: float,
    ps: Optional[PosteriorState] = None,
) -> Optional[ReportRow]:
    """Run the structured pipeline for one cell and write the compact network.

    Returns None when the target would empty a layer.
    """
    train_cfg = config.train_config(run.mode or config.train.mode, run.seed)
    rng = cell_rng(run.seed, criterion, target)
    try:
        result = structured_pipeline(
            run.net,
            data.lik,
            data.train,
            data.test,
            criterion,
            target,
            train_cfg,
            config.prune,
            ps=ps,
            prior=run.prior,
            batch=scoring_batch(data.train, rng, config.prune.scoring_batch),
            rng=rng,
            mode=run.mode,
        )
    except LayerCollapseError as err:
        _LOGGER.warning("Skipping %s at %g: %s", criterion, target, err)
        return None
    stem = f"{criterion}_{target:g}"
    directory = run.directory / COMPACT_DIR
    ckpt = save_checkpoint(
        directory / f"{stem}.ckpt",
        result.network,
        extra={"mode": run.mode, "seed": run.seed, "source": CHECKPOINT_FILE},
    )
    provenance = {
        **result.plan.to_dict(),
        "provenance": [
            {str(new): old for new, old in layer.items()}
            for layer in result.plan.provenance()
        ],
        "cost": result.cost.model_dump(),
        "source_cost": cost(run.net).model_dump(),
    }
    sidecar = write_json(directory / f"{stem}.{PROVENANCE_FILE}", provenance)
    write_manifest(directory / f"{stem}.{MANIFEST_FILE}", [ckpt, sidecar])
    return result.row


def cmd_compact(
    config: ExperimentConfig, out: Path, checkpoint: Optional[Path] = None
) -> PruneReport:
    """Structured prune, fine-tune and compact every run at every configured target."""
    data = prepare_data(config)
    report = PruneReport()
    for run in find_runs(config, out, checkpoint):
        ps = posterior_for(run, config, data) if _needs_posterior(config) else None
        for criterion in config.prune.criteria:
            for target in config.prune.sparsities:
                row = compact_cell(run, config, data, criterion, target, ps)
                if row is not None:
                    report.append(row)
    _write_report(report, out / COMPACT_DIR)
    return report


def cmd_eval(
    config: ExperimentConfig, out: Path, checkpoint: Optional[Path] = None
) -> Dict[str, dict]:
    data = prepare_data(config)
    results = {}
    for run in find_runs(config, out, checkpoint):
        result = evaluate(run.net, data.lik, data.test)
        payload = {**result.model_dump(), **cost(run.net).model_dump()}
        write_json(run.directory / EVAL_FILE, payload)
        _LOGGER.info("%s: %s", run.directory, json.dumps(result.model_dump()))
        results[str(run.directory)] = payload
    return results


async def async_run_sweep(
    config: ExperimentConfig, data: ExperimentData, out: Path, threads: int = 1
) -> PruneReport:
    """
    Train every (mode, seed) run and prune it on the full grid.

    Runs and cells execute in worker threads, at most ``threads`` at a time.
    Rows are appended on the event loop only.
    """
    semaphore = asyncio.Semaphore(max(1, threads))
    report = PruneReport()

    async def run_cell(run, criterion, sparsity, ps) -> None:
        async with semaphore:
            row = await asyncio.to_thread(prune_cell, run, config, data, criterion, sparsity, ps)
        report.append(row)

    async def run_seed(mode: str, seed: int) -> None:
        async with semaphore:
            run = await asyncio.to_thread(train_run, config, data, mode, seed, out)
            ps = None
            if _needs_posterior(config):
                ps = await asyncio.to_thread(posterior_for, run, config, data)
        await asyncio.gather(
            *(
                run_cell(run, criterion, sparsity, ps)
                for criterion in config.prune.criteria
                for sparsity in config.prune.sparsities
            )
        )

    await asyncio.gather(*(run_seed(m, s) for m in config.modes for s in config.seeds))
    return report


def cmd_sweep(config: ExperimentConfig, out: Path, threads: int = 1):
    data = prepare_data(config)
    report = asyncio.run(async_run_sweep(config, data, out, threads))
    _write_report(report, out)
    summary = aggregate(
        report.rows, config.modes, config.prune.criteria, config.prune.sparsities
    )
    write_sweep_csv(out / SWEEP_CSV_FILE, summary)
    return report, summary


# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spam-prune",
        description="Train networks with learned priors, prune and compact them.",
    )
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", required=True, type=Path, help="JSON experiment file")
    parser.add_argument("--out", type=Path, help="Output directory (overrides output_dir)")
    parser.add_argument("--seed-override", type=int, help="Run only this seed")
    parser.add_argument("--threads", type=int, default=1, help="Concurrent sweep cells")
    parser.add_argument(
        "--checkpoint", type=Path, help="Single checkpoint to prune, compact or evaluate"
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def _dispatch(args: argparse.Namespace, config: ExperimentConfig, out: Path) -> None:
    if args.verb == "train":
        cmd_train(config, out)
    elif args.verb == "prune":
        cmd_prune(config, out, args.checkpoint)
    elif args.verb == "compact":
        cmd_compact(config, out, args.checkpoint)
    elif args.verb == "sweep":
        cmd_sweep(config, out, args.threads)
    else:
        cmd_eval(config, out, args.checkpoint)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one verb and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    out = Path(".")
    raw: Optional[dict] = None
    try:
        config = load_config(args.config)
        raw = config.model_dump()
        if args.seed_override is not None:
            config = config.model_copy(update={"seeds": [args.seed_override]})
        out = args.out or Path(config.output_dir)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        _dispatch(args, config, out)
    except ConfigError as err:
        _LOGGER.error("%s", err)
        return EXIT_CONFIG
    except NumericalError as err:
        report = numerical_diagnostics(err, raw)
        path = write_json(out / DIAGNOSTICS_FILE, report)
        _LOGGER.error("%s (diagnostics written to %s)", err, path)
        return EXIT_NUMERICAL
    except (SpamPruneError, OSError) as err:
        _LOGGER.error("%s", err)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
