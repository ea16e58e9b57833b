"""Minimal dense feed-forward networks with explicit forward and backward passes.

All decoder heads share this implementation. Hidden layers use ReLU; the
final layer is affine, and callers apply their own output activation so the
corresponding derivative lives next to the caller's cached values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError


@dataclass
class MlpParams:
    """Ordered affine layers, each weight shaped (out_dim, in_dim)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must pair up")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[1]} != previous output "
                    f"{self.weights[i - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
        )

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations retained from one forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)


def mlp_init(dims: list[int], seed_or_rng, dtype=np.float32) -> MlpParams:
    """Kaiming-uniform weights (bound sqrt(6 / in_dim)), zero biases.

    Deterministic for a given seed or generator state.
    """
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ShapeError(f"need at least input and output dims, got {dims}")
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype))
        biases.append(np.zeros(d_out, dtype=dtype))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a batch of row vectors.

    Returns the raw affine output of the last layer (no output activation)
    together with the cache needed by mlp_backward.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with first layer ({params.in_dim})")
    cache = ForwardCache()
    h = x.astype(params.dtype, copy=False)
    n = params.n_layers
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        pre = h @ w.T + b
        cache.pre_activations.append(pre)
        h = np.maximum(pre, 0.0) if i < n - 1 else pre
    return (h[0] if squeeze else h), cache


def mlp_backward(
    params: MlpParams, cache: ForwardCache, upstream: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients for one cached forward pass.

    Returns (weight_grads, bias_grads, input_grad). The ReLU derivative uses
    the subgradient 0 at 0.
    """
    if len(cache.inputs) != params.n_layers or len(cache.pre_activations) != params.n_layers:
        raise StateError("cache does not match network depth")
    for i, (inp, pre) in enumerate(zip(cache.inputs, cache.pre_activations)):
        if inp.shape[1] != params.weights[i].shape[1] or pre.shape[1] != params.weights[i].shape[0]:
            raise StateError(f"cache shapes at layer {i} do not match params")
    upstream = np.asarray(upstream)
    squeeze = upstream.ndim == 1
    if squeeze:
        upstream = upstream[None, :]
    if upstream.shape != cache.pre_activations[-1].shape:
        raise StateError(
            f"upstream shape {upstream.shape} != forward output {cache.pre_activations[-1].shape}"
        )

    weight_grads: list[np.ndarray] = [None] * params.n_layers
    bias_grads: list[np.ndarray] = [None] * params.n_layers
    delta = upstream.astype(params.dtype, copy=False)
    for i in range(params.n_layers - 1, -1, -1):
        if i < params.n_layers - 1:
            delta = delta * (cache.pre_activations[i] > 0)
        weight_grads[i] = delta.T @ cache.inputs[i]
        bias_grads[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
    input_grad = delta[0] if squeeze else delta
    return weight_grads, bias_grads, input_grad
