"""Pytest configuration and shared fixtures.

Test Organization:
- Core: test_const.py, test_tensor_core.py, test_network.py, test_likelihood.py
- Bayesian: test_prior.py, test_curvature.py, test_laplace.py, test_training.py
- Sparsity: test_pruning.py, test_compaction.py, test_metrics.py
- I/O: test_data.py, test_config.py, test_storage.py, test_reporting.py,
       test_diagnostics.py, test_cli.py
- System: test_acceptance.py (exact oracles; trend checks are marked slow)

This module provides shared fixtures used across all test files.
"""
import json

import numpy as np
import pytest

from spam_prune.config import MargLikConfig, PruneConfig, TrainConfig
from spam_prune.data import split, standardize, synth_blobs
from spam_prune.likelihood import Categorical
from spam_prune.network import Network
from spam_prune.tensor_core import make_rng


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return make_rng(1234)


@pytest.fixture
def small_net():
    """A 2-4-3 tanh network."""
    return Network.from_dims([2, 4, 3], "tanh", seed=0)


@pytest.fixture
def small_batch(rng):
    """Ten inputs and labels for the 2-4-3 network."""
    x = rng.standard_normal((10, 2))
    y = rng.integers(0, 3, size=10)
    return x, y


@pytest.fixture
def categorical():
    return Categorical()


@pytest.fixture
def blobs():
    """Standardized three-class blob data split into train and test."""
    full = synth_blobs(make_rng(0), 150, 3, 3, noise=0.5)
    train, test = split(full, make_rng(1), 0.8)
    return standardize(train, test)


@pytest.fixture
def fast_train_config():
    """Short training run with few hyperparameter steps."""
    return TrainConfig(
        epochs=3,
        batch_size=16,
        lr=0.01,
        marglik=MargLikConfig(hyper_steps=5, prior="parameterwise"),
    )


@pytest.fixture
def prune_config():
    return PruneConfig(criteria=["magnitude"], sparsities=[0.5])


@pytest.fixture
def tiny_experiment():
    """Raw configuration of a small blob experiment."""
    return {
        "dataset": {"kind": "blobs", "n": 120, "d": 3, "classes": 3, "noise": 0.5},
        "architecture": {"hidden": [8], "activation": "relu"},
        "train": {
            "epochs": 3,
            "batch_size": 32,
            "lr": 0.01,
            "marglik": {"hyper_steps": 5},
        },
        "prune": {
            "criteria": ["opd", "magnitude", "random"],
            "sparsities": [0.0, 0.5],
        },
        "seeds": [0],
        "modes": ["map", "spam"],
    }


@pytest.fixture
def config_file(tmp_path, tiny_experiment):
    """Write the tiny experiment to disk and return its path."""
    path = tmp_path / "experiment.json"
    tiny_experiment["output_dir"] = str(tmp_path / "runs")
    path.write_text(json.dumps(tiny_experiment))
    return path
