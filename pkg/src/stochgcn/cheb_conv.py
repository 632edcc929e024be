"""Chebyshev spectral graph convolution, ReLU and graph max-pooling.

Signals are laid out vertex-major: ``(n, channels)`` for one sample or
``(n, batch, channels)`` for a batch.  The Chebyshev basis
``T_k(L) X`` is built with the three-term recurrence and never forms
``T_k(L)`` as a matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolationError, InvalidConfigError, InvalidInputError
from .grid_graph import ScaledLaplacian


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass(eq=False)
class ChebLayer:
    weights: np.ndarray  # (K, F_in, F_out)
    bias: np.ndarray  # (F_out,)
    use_bias: bool = True

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[0] < 1:
            raise InvalidInputError(f"weights must be (K, F_in, F_out), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[2],):
            raise InvalidInputError("bias length must equal F_out")
        if not np.all(np.isfinite(self.weights)):
            raise InvalidInputError("non-finite Chebyshev weights")

    @classmethod
    def init(cls, order: int, in_channels: int, out_channels: int,
             rng: np.random.Generator, use_bias: bool = True) -> "ChebLayer":
        if order < 1 or in_channels < 1 or out_channels < 1:
            raise InvalidConfigError("order and channel counts must be >= 1")
        lim = glorot_limit(order * in_channels, out_channels)
        w = rng.uniform(-lim, lim, size=(order, in_channels, out_channels))
        return cls(weights=w, bias=np.zeros(out_channels), use_bias=use_bias)

    @property
    def order(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


@dataclass(eq=False)
class LayerActivations:
    """Backward cache of one ``cheb_forward`` call."""

    lap: sp.csr_matrix
    basis: np.ndarray  # (K, n, batch * F_in)
    layer: ChebLayer
    weights_snapshot: np.ndarray
    in_shape: tuple
    out_shape: tuple


def _lap_matrix(lap) -> sp.csr_matrix:
    if isinstance(lap, ScaledLaplacian):
        return lap.matrix
    return sp.csr_matrix(lap)


def chebyshev_basis(lap, x2d: np.ndarray, order: int) -> np.ndarray:
    """Stack ``T_k(L) x`` for ``k < order``; ``x2d`` is ``(n, cols)``."""
    m = _lap_matrix(lap)
    z = np.empty((order,) + x2d.shape)
    z[0] = x2d
    if order > 1:
        z[1] = m @ x2d
    for k in range(2, order):
        z[k] = 2.0 * (m @ z[k - 1]) - z[k - 2]
    return z


def cheb_forward(lap, x: np.ndarray, layer: ChebLayer):
    """``Y = sum_k T_k(L) X W_k + b``.  Returns ``(Y, cache)``."""
    m = _lap_matrix(lap)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise InvalidInputError(f"signal must be (n, F) or (n, B, F), got {x.shape}")
    n = x.shape[0]
    if m.shape != (n, n):
        raise InvalidInputError(f"Laplacian {m.shape} does not match {n} vertices")
    f_in = x.shape[-1]
    if f_in != layer.in_channels:
        raise InvalidInputError(f"signal has {f_in} channels, layer expects {layer.in_channels}")
    batch = 1 if x.ndim == 2 else x.shape[1]
    z = chebyshev_basis(m, x.reshape(n, batch * f_in), layer.order)
    rows = n * batch
    y = np.zeros((rows, layer.out_channels))
    for k in range(layer.order):
        y += z[k].reshape(rows, f_in) @ layer.weights[k]
    if layer.use_bias:
        y += layer.bias
    out_shape = x.shape[:-1] + (layer.out_channels,)
    cache = LayerActivations(lap=m, basis=z, layer=layer, weights_snapshot=layer.weights.copy(),
                             in_shape=x.shape, out_shape=out_shape)
    return y.reshape(out_shape), cache


def cheb_backward(cache: LayerActivations, grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients ``(grad_X, grad_W, grad_b)`` for a cached forward call.

    ``L`` is symmetric, so the input gradient is ``sum_k T_k(L) G W_k^T``,
    accumulated by running the recurrence in reverse.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    layer = cache.layer
    if grad_out.shape != cache.out_shape:
        raise ContractViolationError(
            f"grad_out shape {grad_out.shape} does not match cached output {cache.out_shape}")
    if layer.weights.shape != cache.weights_snapshot.shape or not np.array_equal(
            layer.weights, cache.weights_snapshot):
        raise ContractViolationError("layer weights changed since the cached forward call")
    order, f_in, f_out = layer.weights.shape
    n = cache.in_shape[0]
    rows = cache.basis.shape[1] * cache.basis.shape[2] // f_in
    g = grad_out.reshape(rows, f_out)
    grad_w = np.empty_like(layer.weights)
    for k in range(order):
        grad_w[k] = cache.basis[k].reshape(rows, f_in).T @ g
    grad_b = g.sum(axis=0) if layer.use_bias else np.zeros(f_out)
    if not need_input_grad:
        return None, grad_w, grad_b
    adj = np.stack([(g @ layer.weights[k].T).reshape(n, -1) for k in range(order)])
    m = cache.lap
    for k in range(order - 1, 1, -1):
        adj[k - 1] += 2.0 * (m @ adj[k])
        adj[k - 2] -= adj[k]
    if order > 1:
        adj[0] += m @ adj[1]
    return adj[0].reshape(cache.in_shape), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad * (x > 0)


def _pool_stride(stride: int) -> int:
    stride = int(stride)
    if stride < 1 or stride & (stride - 1):
        raise InvalidConfigError(f"pooling stride must be a power of two, got {stride}")
    return stride


def graph_max_pool(x: np.ndarray, stride: int, real_mask: np.ndarray | None = None):
    """Max over consecutive blocks of ``stride`` vertices.

    Padding vertices (``real_mask`` False) never win; a block with no real
    vertex yields 0 and argmax -1.  Ties go to the lowest child index.
    Returns ``(pooled, argmax)`` where argmax holds absolute input indices.
    """
    stride = _pool_stride(stride)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n % stride:
        raise InvalidInputError(f"{n} vertices not divisible by stride {stride}")
    tail = x.shape[1:]
    if stride == 1 and real_mask is None:
        return x.copy(), np.broadcast_to(
            np.arange(n).reshape((n,) + (1,) * len(tail)), x.shape).copy()
    blocks = x.reshape((n // stride, stride) + tail)
    if real_mask is not None:
        fake = ~np.asarray(real_mask, dtype=bool).reshape((n // stride, stride) + (1,) * len(tail))
        blocks = np.where(fake, -np.inf, blocks)
    local = np.argmax(blocks, axis=1)
    pooled = np.take_along_axis(blocks, local[:, None], axis=1)[:, 0]
    empty = np.isneginf(pooled)
    pooled[empty] = 0.0
    base = (np.arange(n // stride) * stride).reshape((n // stride,) + (1,) * len(tail))
    argmax = local + base
    argmax[empty] = -1
    return pooled, argmax


def graph_max_pool_backward(grad_out: np.ndarray, argmax: np.ndarray, n_in: int) -> np.ndarray:
    """Route each pooled gradient to the child that won the max."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n_out = grad_out.shape[0]
    stride = n_in // n_out
    tail = grad_out.shape[1:]
    base = (np.arange(n_out) * stride).reshape((n_out,) + (1,) * len(tail))
    valid = argmax >= 0
    local = np.where(valid, argmax - base, 0)
    blocks = np.zeros((n_out, stride) + tail)
    np.put_along_axis(blocks, local[:, None], np.where(valid, grad_out, 0.0)[:, None], axis=1)
    return blocks.reshape((n_in,) + tail)
