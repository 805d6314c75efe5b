"""
Fully-connected feed-forward networks with explicit forward/backward passes.

All parameters live in one flat float64 vector. Layer l occupies a contiguous
block: its weights first, stacked column by column (see tensor_core), then
its bias. Structural metadata (layers, units, coordinates) is exposed for the
prior, curvature and pruning modules.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .const import JACOBIAN_MAX_PARAMS
from .errors import ResourceError, StructuralError
from .tensor_core import make_rng

_LOGGER = logging.getLogger(__name__)


class Activation(str, Enum):
    """Element-wise nonlinearity applied after a layer."""

    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        if self is Activation.TANH:
            return np.tanh(z)
        return z

    def derivative(self, z: np.ndarray, out: np.ndarray) -> np.ndarray:
        """Derivative at pre-activation ``z`` given the output ``out``."""
        if self is Activation.RELU:
            # derivative at the kink is 0
            return (z > 0.0).astype(np.float64)
        if self is Activation.TANH:
            return 1.0 - out**2
        return np.ones_like(z)


class LayerSpec(BaseModel):
    """Shape and activation of one dense layer."""

    model_config = ConfigDict(frozen=True)

    in_dim: int = Field(ge=1)
    out_dim: int = Field(ge=1)
    activation: Activation = Activation.RELU
    has_bias: bool = True

    @property
    def num_weights(self) -> int:
        return self.in_dim * self.out_dim

    @property
    def num_params(self) -> int:
        return self.num_weights + (self.out_dim if self.has_bias else 0)


class LayerSlice(NamedTuple):
    """Flat-vector ranges of one layer."""

    weight: slice
    bias: Optional[slice]

    @property
    def full(self) -> slice:
        stop = self.bias.stop if self.bias is not None else self.weight.stop
        return slice(self.weight.start, stop)


@dataclass
class BatchActivations:
    """Per-layer quantities captured during one forward/backward pass.

    Attributes:
        inputs: ``inputs[l]`` is the (N, in_dim) input of layer l.
        output_grads: ``output_grads[l]`` is the (N, out_dim) gradient with
            respect to the linear output (pre-activation) of layer l.
    """

    inputs: List[np.ndarray]
    output_grads: List[np.ndarray]


@dataclass
class ForwardCache:
    """Intermediate values of a forward pass, reused by backward passes."""

    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    output: np.ndarray


class Network:
    """
    Stack of fully-connected layers over a flat parameter vector.

    Attributes:
        layers: Layer specs in forward order.
        params: Flat parameter vector θ.
        masks: Optional flat 0/1 vector aligned with ``params``.
        seed: Seed used for initialization.
        index: Per-layer weight and bias ranges in ``params``.
    """

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        params: Optional[np.ndarray] = None,
        masks: Optional[np.ndarray] = None,
        seed: int = 0,
    ):
        if not layers:
            raise StructuralError("A network needs at least one layer")
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise StructuralError(
                    f"Layer dims do not chain: out_dim {prev.out_dim} "
                    f"followed by in_dim {nxt.in_dim}"
                )
        self.layers: List[LayerSpec] = list(layers)
        self.seed = int(seed)
        self.index: List[LayerSlice] = []
        offset = 0
        for spec in self.layers:
            weight = slice(offset, offset + spec.num_weights)
            offset = weight.stop
            bias = None
            if spec.has_bias:
                bias = slice(offset, offset + spec.out_dim)
                offset = bias.stop
            self.index.append(LayerSlice(weight, bias))
        self.num_params = offset

        if params is None:
            params = self._initial_params(make_rng(self.seed))
        params = np.array(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise StructuralError(
                f"Expected {self.num_params} parameters, got shape {params.shape}"
            )
        self.params = params
        self.masks: Optional[np.ndarray] = None
        if masks is not None:
            self.set_mask(masks)

    @classmethod
    def from_dims(
        cls,
        dims: Sequence[int],
        activation: Activation | str = Activation.RELU,
        seed: int = 0,
        has_bias: bool = True,
        output_activation: Activation | str = Activation.IDENTITY,
    ) -> "Network":
        """Build a network such as (784, 256, 10) with one hidden activation."""
        if len(dims) < 2:
            raise StructuralError("Need at least input and output dimensions")
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            layers.append(
                LayerSpec(
                    in_dim=d_in,
                    out_dim=d_out,
                    activation=Activation(output_activation if last else activation),
                    has_bias=has_bias,
                )
            )
        return cls(layers, seed=seed)

    def _initial_params(self, rng: np.random.Generator) -> np.ndarray:
        """Kaiming-uniform weights scaled by fan-in, zero biases."""
        params = np.zeros(self.num_params)
        for spec, sl in zip(self.layers, self.index):
            bound = np.sqrt(6.0 / spec.in_dim)
            w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
            params[sl.weight] = w.ravel(order="F")
        return params

    # Structure

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> List[int]:
        return [self.layers[0].in_dim] + [spec.out_dim for spec in self.layers]

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.num_layers:
            raise StructuralError(
                f"Layer {layer} out of range for a {self.num_layers}-layer network"
            )

    def weight(self, layer: int, params: Optional[np.ndarray] = None) -> np.ndarray:
        """Writable (out_dim, in_dim) view of a layer's weights."""
        self._check_layer(layer)
        spec = self.layers[layer]
        flat = self.params if params is None else params
        return flat[self.index[layer].weight].reshape(spec.in_dim, spec.out_dim).T

    def bias(self, layer: int, params: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
        """Writable view of a layer's bias, or None."""
        self._check_layer(layer)
        sl = self.index[layer].bias
        if sl is None:
            return None
        flat = self.params if params is None else params
        return flat[sl]

    def layer_params(self, layer: int) -> np.ndarray:
        """Flat indices of every parameter of ``layer``."""
        self._check_layer(layer)
        sl = self.index[layer].full
        return np.arange(sl.start, sl.stop)

    def layer_of_params(self) -> np.ndarray:
        """Layer id of every flat parameter."""
        out = np.empty(self.num_params, dtype=np.int64)
        for l, sl in enumerate(self.index):
            out[sl.full] = l
        return out

    def unit_count(self, layer: int) -> int:
        """Number of units (outputs) of ``layer``."""
        self._check_layer(layer)
        return self.layers[layer].out_dim

    def structure_params(self, layer: int, unit: int) -> np.ndarray:
        """Flat indices of a unit's incoming weight row and its bias entry."""
        self._check_layer(layer)
        spec = self.layers[layer]
        if not 0 <= unit < spec.out_dim:
            raise StructuralError(f"Unit {unit} out of range for layer {layer}")
        sl = self.index[layer]
        idx = sl.weight.start + np.arange(spec.in_dim) * spec.out_dim + unit
        if sl.bias is not None:
            idx = np.append(idx, sl.bias.start + unit)
        return idx

    def outgoing_params(self, layer: int, unit: int) -> np.ndarray:
        """Flat indices of the weights leaving ``unit`` of ``layer``."""
        self._check_layer(layer)
        if layer + 1 >= self.num_layers:
            return np.empty(0, dtype=np.int64)
        nxt = self.layers[layer + 1]
        start = self.index[layer + 1].weight.start + unit * nxt.out_dim
        return np.arange(start, start + nxt.out_dim)

    def coordinate(self, p: int) -> Tuple[int, str, int, int]:
        """Map a flat index to (layer, "weight"|"bias", row, col)."""
        if not 0 <= p < self.num_params:
            raise StructuralError(f"Parameter index {p} out of range")
        for l, (spec, sl) in enumerate(zip(self.layers, self.index)):
            if sl.weight.start <= p < sl.weight.stop:
                col, row = divmod(p - sl.weight.start, spec.out_dim)
                return l, "weight", row, col
            if sl.bias is not None and sl.bias.start <= p < sl.bias.stop:
                return l, "bias", p - sl.bias.start, 0
        raise StructuralError(f"Parameter index {p} is not covered")  # pragma: no cover

    def flat_index(self, layer: int, kind: str, row: int, col: int = 0) -> int:
        """Inverse of :meth:`coordinate`."""
        self._check_layer(layer)
        spec = self.layers[layer]
        sl = self.index[layer]
        if kind == "weight":
            if not (0 <= row < spec.out_dim and 0 <= col < spec.in_dim):
                raise StructuralError(f"Weight ({row}, {col}) out of range in layer {layer}")
            return sl.weight.start + col * spec.out_dim + row
        if kind == "bias" and sl.bias is not None:
            if not 0 <= row < spec.out_dim:
                raise StructuralError(f"Bias {row} out of range in layer {layer}")
            return sl.bias.start + row
        raise StructuralError(f"Layer {layer} has no {kind} parameters")

    # Masks

    def set_mask(self, masks: np.ndarray) -> None:
        """Attach a 0/1 mask and zero the masked parameters."""
        masks = np.asarray(masks, dtype=np.float64)
        if masks.shape != (self.num_params,):
            raise StructuralError(
                f"Mask length {masks.size} does not match {self.num_params} parameters"
            )
        if not np.all((masks == 0.0) | (masks == 1.0)):
            raise StructuralError("Mask entries must be 0 or 1")
        self.masks = masks.copy()
        self.params *= self.masks

    def clear_mask(self) -> None:
        self.masks = None

    def effective_params(self) -> np.ndarray:
        """Parameters with masked entries forced to zero."""
        if self.masks is None:
            return self.params
        return self.params * self.masks

    # Copies

    def copy(self) -> "Network":
        return Network(self.layers, self.params.copy(), self.masks, self.seed)

    def with_params(self, params: np.ndarray) -> "Network":
        """Same architecture and mask, different parameters."""
        return Network(self.layers, params, self.masks, self.seed)

    def fingerprint(self) -> str:
        """Content hash of the effective parameters, used as snapshot id."""
        data = np.ascontiguousarray(self.effective_params(), dtype="<f8").tobytes()
        return hashlib.sha256(data).hexdigest()[:16]

    # Passes

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise StructuralError(
                f"Input feature dimension {x.shape[-1]} does not match {self.input_dim}"
            )
        return x

    def forward_cache(self, x: np.ndarray) -> ForwardCache:
        """Forward pass keeping layer inputs and pre-activations."""
        a = self._check_input(x)
        theta = self.effective_params()
        inputs, preacts = [], []
        for l, spec in enumerate(self.layers):
            inputs.append(a)
            z = a @ self.weight(l, theta).T
            b = self.bias(l, theta)
            if b is not None:
                z = z + b
            preacts.append(z)
            a = spec.activation.apply(z)
        return ForwardCache(inputs=inputs, preacts=preacts, output=a)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Network outputs f_θ(x) for a batch (N, in_dim)."""
        return self.forward_cache(x).output

    def backward_cache(
        self, cache: ForwardCache, upstream: np.ndarray
    ) -> Tuple[np.ndarray, BatchActivations]:
        """Backpropagate ``upstream`` through a cached forward pass.

        Returns:
            Gradient of Σ_n ⟨upstream_n, f(x_n)⟩ over the flat parameters
            (masked entries zero) and the captured activations.
        """
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.ndim == 1:
            upstream = upstream[None, :]
        if upstream.shape != cache.output.shape:
            raise StructuralError(
                f"Upstream shape {upstream.shape} does not match output {cache.output.shape}"
            )
        theta = self.effective_params()
        grad = np.zeros(self.num_params)
        output_grads: List[np.ndarray] = [None] * self.num_layers  # type: ignore[list-item]
        out = cache.output
        delta = upstream
        for l in reversed(range(self.num_layers)):
            spec = self.layers[l]
            z = cache.preacts[l]
            layer_out = out if l == self.num_layers - 1 else cache.inputs[l + 1]
            g = delta * spec.activation.derivative(z, layer_out)
            output_grads[l] = g
            sl = self.index[l]
            grad[sl.weight] = (g.T @ cache.inputs[l]).ravel(order="F")
            if sl.bias is not None:
                grad[sl.bias] = g.sum(axis=0)
            if l > 0:
                delta = g @ self.weight(l, theta)
        if self.masks is not None:
            grad *= self.masks
        return grad, BatchActivations(inputs=list(cache.inputs), output_grads=output_grads)

    def backward(
        self, x: np.ndarray, upstream: np.ndarray
    ) -> Tuple[np.ndarray, BatchActivations]:
        """Gradient of Σ_n ⟨upstream_n, f_θ(x_n)⟩ with respect to θ."""
        return self.backward_cache(self.forward_cache(x), upstream)

    def per_sample_grads(self, acts: BatchActivations) -> np.ndarray:
        """(N, P) matrix of per-sample gradients from captured activations."""
        n = acts.inputs[0].shape[0]
        out = np.zeros((n, self.num_params))
        for l, sl in enumerate(self.index):
            a = acts.inputs[l]
            g = acts.output_grads[l]
            out[:, sl.weight] = np.einsum("ni,nj->nij", a, g).reshape(n, -1)
            if sl.bias is not None:
                out[:, sl.bias] = g
        if self.masks is not None:
            out *= self.masks
        return out

    def jacobian(self, x: np.ndarray, cap: int = JACOBIAN_MAX_PARAMS) -> np.ndarray:
        """(C, P) Jacobian of the outputs at a single input."""
        if self.num_params > cap:
            raise ResourceError(
                f"Jacobian of {self.num_params} parameters exceeds the cap of {cap}"
            )
        x = self._check_input(x)
        if x.shape[0] != 1:
            raise StructuralError("jacobian takes a single input")
        c = self.output_dim
        cache = self.forward_cache(np.repeat(x, c, axis=0))
        _, acts = self.backward_cache(cache, np.eye(c))
        return self.per_sample_grads(acts)
