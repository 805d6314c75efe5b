"""Unit tests for binary artifacts and manifests."""
import hashlib
import json

import numpy as np
import pytest

from spam_prune.curvature import ggn_diag, kfac
from spam_prune.errors import FormatError
from spam_prune.laplace import build_posterior, log_det, posterior_diag
from spam_prune.prior import PriorSpec
from spam_prune.pruning import ScoreVector, make_mask
from spam_prune.storage import (
    CHECKPOINT_MAGIC,
    file_digest,
    load_checkpoint,
    load_mask,
    load_posterior,
    save_checkpoint,
    save_mask,
    save_posterior,
    verify_manifest,
    write_json,
    write_manifest,
)


class TestCheckpoint:
    """Test network checkpoints."""

    def test_restores_network(self, tmp_path, small_net):
        """Test parameters, mask, prior and extras survive a save."""
        mask = np.ones(small_net.num_params)
        mask[[3, 9]] = 0.0
        small_net.set_mask(mask)
        prior = PriorSpec.initial("unitwise", small_net, 2.0)
        path = save_checkpoint(tmp_path / "net.ckpt", small_net, prior, {"mode": "spam"})
        net, loaded_prior, header = load_checkpoint(path)
        np.testing.assert_array_equal(net.params, small_net.params)
        np.testing.assert_array_equal(net.masks, mask)
        assert net.layers == small_net.layers
        assert net.fingerprint() == small_net.fingerprint()
        np.testing.assert_array_equal(loaded_prior.log_delta, prior.log_delta)
        assert header["extra"] == {"mode": "spam"}

    def test_starts_with_magic(self, tmp_path, small_net):
        """Test the file begins with its magic."""
        path = save_checkpoint(tmp_path / "net.ckpt", small_net)
        assert path.read_bytes()[:8] == CHECKPOINT_MAGIC

    def test_bad_magic(self, tmp_path, small_net):
        """Test a foreign file reports offset zero."""
        path = save_checkpoint(tmp_path / "net.ckpt", small_net)
        raw = bytearray(path.read_bytes())
        raw[0:8] = b"NOTSPAM!"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert err.value.offset == 0

    def test_truncated(self, tmp_path, small_net):
        """Test missing parameter bytes are reported."""
        path = save_checkpoint(tmp_path / "net.ckpt", small_net)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, small_net):
        """Test extra bytes after the last block are reported."""
        path = save_checkpoint(tmp_path / "net.ckpt", small_net)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_same_network_same_bytes(self, tmp_path, small_net):
        """Test saving twice produces identical digests."""
        first = save_checkpoint(tmp_path / "a.ckpt", small_net)
        again = save_checkpoint(tmp_path / "b.ckpt", small_net.copy())
        assert file_digest(first) == file_digest(again)


class TestPosteriorSnapshot:
    """Test posterior snapshots."""

    def test_diag(self, tmp_path, small_net, small_batch, categorical):
        """Test a diagonal posterior restores its precision."""
        ps = build_posterior(small_net, ggn_diag(small_net, categorical, small_batch), np.full(small_net.num_params, 1.5), 2.0)
        loaded = load_posterior(save_posterior(tmp_path / "ps.snap", ps))
        assert loaded.snapshot_id == ps.snapshot_id
        assert loaded.temperature == 2.0
        np.testing.assert_array_equal(posterior_diag(loaded), posterior_diag(ps))

    def test_kfac(self, tmp_path, small_net, small_batch, categorical):
        """Test a KFAC posterior restores factors and corrected eigenvalues."""
        est = kfac(small_net, categorical, small_batch, mode="ggn_exact")
        ps = build_posterior(small_net, est, np.ones(small_net.num_params))
        loaded = load_posterior(save_posterior(tmp_path / "ps.snap", ps))
        assert loaded.kind == "kfac_ggn_exact"
        assert loaded.is_kfac
        for got, want in zip(loaded.lambda_hat, ps.lambda_hat):
            np.testing.assert_array_equal(got, want)
        assert log_det(loaded, small_net) == log_det(ps, small_net)
        np.testing.assert_array_equal(loaded.curvature.layers[0].a, est.layers[0].a)


class TestMaskFile:
    """Test mask files."""

    def test_structured_mask(self, tmp_path, small_net, rng):
        """Test bits and removed units survive a save."""
        scores = ScoreVector(values=rng.random(small_net.num_params), criterion="magnitude")
        mask = make_mask(small_net, scores, 0.5, scope="uniform", structured=True)
        loaded = load_mask(save_mask(tmp_path / "mask.bin", mask, seed=3))
        np.testing.assert_array_equal(loaded.bits, mask.bits)
        assert loaded.removed_units == mask.removed_units
        assert loaded.structured
        assert loaded.metadata["seed"] == 3
        assert loaded.criterion == "magnitude"


class TestManifest:
    """Test JSON sidecars and manifests."""

    def test_digest_matches_hashlib(self, tmp_path):
        """Test the manifest digest is the file's SHA-256."""
        artifact = tmp_path / "a.bin"
        artifact.write_bytes(b"abc")
        path = write_manifest(tmp_path / "manifest.json", [artifact])
        entry = json.loads(path.read_text())["files"]["a.bin"]
        assert entry["sha256"] == hashlib.sha256(b"abc").hexdigest()
        assert entry["bytes"] == 3

    def test_detects_changes(self, tmp_path):
        """Test modified or missing artifacts are reported."""
        first = tmp_path / "a.bin"
        second = tmp_path / "b.bin"
        first.write_bytes(b"abc")
        second.write_bytes(b"def")
        path = write_manifest(tmp_path / "manifest.json", [first, second])
        assert verify_manifest(path) == []
        first.write_bytes(b"abd")
        second.unlink()
        assert sorted(verify_manifest(path)) == ["a.bin", "b.bin"]

    def test_write_json_handles_numpy(self, tmp_path):
        """Test numpy values serialize."""
        path = write_json(tmp_path / "x.json", {"v": np.arange(3), "s": np.float64(1.5)})
        assert json.loads(path.read_text()) == {"s": 1.5, "v": [0, 1, 2]}
