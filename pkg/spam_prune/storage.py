"""
Binary artifacts and run manifests.

Every binary file starts with an 8-byte magic, a little-endian uint64 header
length and a UTF-8 JSON header, followed by little-endian float64 blocks and,
for masks, ``numpy.packbits`` bit strings.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .curvature import DiagCurvature, KfacCurvature, KfacLayer
from .errors import FormatError
from .laplace import PosteriorState
from .network import LayerSpec, Network
from .prior import PriorSpec
from .pruning import PruneMask
from .tensor_core import SymEig

_LOGGER = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPAMNET1"
POSTERIOR_MAGIC = b"SPAMPOS1"
MASK_MAGIC = b"SPAMMSK1"

_LENGTH = struct.Struct("<Q")
_F8 = np.dtype("<f8")


def _pack(magic: bytes, header: Dict[str, Any], blocks: Iterable[bytes]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + _LENGTH.pack(len(head)) + head + b"".join(blocks)


class _Reader:
    """Sequential reader that reports byte offsets on malformed input."""

    def __init__(self, raw: bytes, name: str):
        self.raw = raw
        self.name = name
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.name}: truncated {what}, need {n} bytes", offset=self.pos
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype=_F8).astype(np.float64)

    def matrix(self, rows: int, cols: int, what: str) -> np.ndarray:
        return self.floats(rows * cols, what).reshape(rows, cols)

    def bits(self, count: int, what: str) -> np.ndarray:
        packed = np.frombuffer(self.take((count + 7) // 8, what), dtype=np.uint8)
        return np.unpackbits(packed, count=count).astype(np.float64)

    def header(self, magic: bytes) -> Dict[str, Any]:
        found = self.take(len(magic), "magic")
        if found != magic:
            raise FormatError(f"{self.name}: bad magic {found!r}, expected {magic!r}", offset=0)
        (length,) = _LENGTH.unpack(self.take(_LENGTH.size, "header length"))
        start = self.pos
        try:
            return json.loads(self.take(length, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise FormatError(f"{self.name}: header is not valid JSON", offset=start) from err

    def finish(self) -> None:
        if self.pos != len(self.raw):
            raise FormatError(
                f"{self.name}: {len(self.raw) - self.pos} trailing bytes", offset=self.pos
            )


def _floats(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_F8).tobytes()


def _bits(arr: np.ndarray) -> bytes:
    return np.packbits(np.asarray(arr) != 0).tobytes()


# Network checkpoints


def save_checkpoint(
    path: Path | str,
    net: Network,
    prior: Optional[PriorSpec] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write parameters, layer specs, optional mask and prior."""
    path = Path(path)
    header = {
        "layers": [s.model_dump(mode="json") for s in net.layers],
        "seed": net.seed,
        "num_params": net.num_params,
        "has_mask": net.masks is not None,
        "prior": prior.to_dict() if prior is not None else None,
        "extra": extra or {},
    }
    blocks = [_floats(net.params)]
    if net.masks is not None:
        blocks.append(_bits(net.masks))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_pack(CHECKPOINT_MAGIC, header, blocks))
    _LOGGER.info("Saved checkpoint with %d parameters to %s", net.num_params, path)
    return path


def load_checkpoint(path: Path | str) -> Tuple[Network, Optional[PriorSpec], Dict[str, Any]]:
    """Read a checkpoint; returns the network, its prior (or None) and the header."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path.name)
    header = reader.header(CHECKPOINT_MAGIC)
    try:
        layers = [LayerSpec(**spec) for spec in header["layers"]]
        num_params = int(header["num_params"])
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"{path.name}: malformed checkpoint header ({err})") from err
    params = reader.floats(num_params, "parameters")
    masks = reader.bits(num_params, "mask") if header.get("has_mask") else None
    reader.finish()
    net = Network(layers, params, masks, seed=int(header.get("seed", 0)))
    prior = PriorSpec.from_dict(header["prior"]) if header.get("prior") else None
    return net, prior, header


# Posterior snapshots


def save_posterior(path: Path | str, ps: PosteriorState) -> Path:
    path = Path(path)
    curvature = ps.curvature
    header: Dict[str, Any] = {
        "kind": curvature.kind,
        "temperature": ps.temperature,
        "snapshot_id": ps.snapshot_id,
        "num_params": ps.num_params,
        "num_samples": curvature.num_samples,
    }
    if isinstance(curvature, KfacCurvature):
        header["layers"] = [list(block.shape) for block in curvature.layers]
        blocks = [_floats(ps.delta), _floats(ps.theta)]
        for block, lam in zip(curvature.layers, ps.lambda_hat):
            blocks.extend(
                _floats(m)
                for m in (
                    block.a,
                    block.g,
                    block.eig_a.eigenvalues,
                    block.eig_a.eigenvectors,
                    block.eig_g.eigenvalues,
                    block.eig_g.eigenvectors,
                    lam,
                )
            )
    else:
        blocks = [_floats(curvature.h), _floats(ps.delta), _floats(ps.theta)]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_pack(POSTERIOR_MAGIC, header, blocks))
    _LOGGER.info("Saved %s posterior snapshot %s to %s", curvature.kind, ps.snapshot_id, path)
    return path


def load_posterior(path: Path | str) -> PosteriorState:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path.name)
    header = reader.header(POSTERIOR_MAGIC)
    p = int(header["num_params"])
    if "layers" in header:
        delta = reader.floats(p, "delta")
        theta = reader.floats(p, "theta")
        layers, lambda_hat = [], []
        for n_in, n_out in header["layers"]:
            a = reader.matrix(n_in, n_in, "A factor")
            g = reader.matrix(n_out, n_out, "G factor")
            eig_a = SymEig(reader.floats(n_in, "A eigenvalues"), reader.matrix(n_in, n_in, "A eigenvectors"))
            eig_g = SymEig(reader.floats(n_out, "G eigenvalues"), reader.matrix(n_out, n_out, "G eigenvectors"))
            layers.append(KfacLayer(a=a, g=g, eig_a=eig_a, eig_g=eig_g))
            lambda_hat.append(reader.floats(n_in * n_out, "corrected eigenvalues"))
        curvature = KfacCurvature(
            layers=layers, kind=header["kind"], num_samples=int(header.get("num_samples", 0))
        )
    else:
        h = reader.floats(p, "curvature")
        delta = reader.floats(p, "delta")
        theta = reader.floats(p, "theta")
        curvature = DiagCurvature(h=h, kind=header["kind"], num_samples=int(header.get("num_samples", 0)))
        lambda_hat = None
    reader.finish()
    return PosteriorState(
        curvature=curvature,
        delta=delta,
        theta=theta,
        temperature=float(header["temperature"]),
        snapshot_id=header["snapshot_id"],
        lambda_hat=lambda_hat,
    )


# Masks


def save_mask(path: Path | str, mask: PruneMask, seed: Optional[int] = None) -> Path:
    path = Path(path)
    header = {
        "criterion": mask.criterion,
        "sparsity": mask.sparsity,
        "target": mask.target,
        "seed": seed,
        "snapshot_id": mask.metadata.get("snapshot_id"),
        "scope": mask.scope,
        "structured": mask.structured,
        "exempt_last": mask.exempt_last,
        "removed_units": [list(u) for u in mask.removed_units],
        "param_sparsity": mask.param_sparsity,
        "num_params": int(mask.bits.size),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_pack(MASK_MAGIC, header, [_bits(mask.bits)]))
    return path


def load_mask(path: Path | str) -> PruneMask:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path.name)
    header = reader.header(MASK_MAGIC)
    bits = reader.bits(int(header["num_params"]), "mask bits")
    reader.finish()
    metadata = {"seed": header.get("seed")}
    if header.get("snapshot_id"):
        metadata["snapshot_id"] = header["snapshot_id"]
    return PruneMask(
        bits=bits,
        sparsity=float(header["sparsity"]),
        target=float(header.get("target", header["sparsity"])),
        scope=header["scope"],
        structured=bool(header["structured"]),
        exempt_last=bool(header.get("exempt_last", False)),
        criterion=header["criterion"],
        removed_units=[tuple(u) for u in header.get("removed_units", [])],
        param_sparsity=float(header.get("param_sparsity", 0.0)),
        metadata=metadata,
    )


# JSON sidecars and manifests


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path: Path | str, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    path.write_text(text, encoding="utf-8")
    return path


def file_digest(path: Path | str) -> str:
    """SHA-256 hex digest of a file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Path | str, files: List[Path]) -> Path:
    """Record size and SHA-256 digest of every artifact next to them."""
    path = Path(path)
    entries = {}
    for f in sorted(files, key=lambda p: p.name):
        entries[f.name] = {"sha256": file_digest(f), "bytes": f.stat().st_size}
    return write_json(path, {"files": entries})


def verify_manifest(path: Path | str) -> List[str]:
    """Names of artifacts whose digest no longer matches the manifest."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    stale = []
    for name, entry in manifest.get("files", {}).items():
        target = path.parent / name
        if not target.exists() or file_digest(target) != entry["sha256"]:
            stale.append(name)
    return stale
