"""Dense matrix kernel for the attention module.

Embeddings are ``(D, L)`` arrays: rows index the embedding dimension, columns
index token positions. Every function also accepts a leading batch axis, so a
stack of ``N`` embeddings is ``(N, D, L)``. Reductions run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

# keeps sigmoid strictly inside (0, 1) and its products out of the subnormal range
_SIG_HI = 1.0 - 2.0**-53
_SIG_LO = 2.0**-53


def _check_pool_input(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise DimensionError(f"cannot pool array of shape {arr.shape}")
    return arr


def pool_over_embedding(m) -> np.ndarray:
    """Average over the D axis; one value per token position (length L)."""
    return _check_pool_input(m).mean(axis=-2)


def pool_over_tokens(m) -> np.ndarray:
    """Average over the L axis; one value per embedding feature (length D)."""
    return _check_pool_input(m).mean(axis=-1)


def pooling_backward(upstream, shape: tuple[int, ...], axis: int) -> np.ndarray:
    """Gradient of a mean over ``axis`` (-2 for embedding pooling, -1 for token pooling).

    ``shape`` is the shape of the pooled input. Pooling has no parameters, so
    only the input gradient is returned.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    expected = tuple(s for i, s in enumerate(shape) if i != axis % len(shape))
    if upstream.shape != expected:
        raise DimensionError(f"pooling upstream {upstream.shape} does not match {expected}")
    size = shape[axis]
    return np.broadcast_to(np.expand_dims(upstream, axis) / size, shape).copy()


@dataclass(frozen=True)
class AffineLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = np.asarray(self.weight)
        b = np.asarray(self.bias)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise DimensionError(f"inconsistent affine shapes: weight {w.shape}, bias {b.shape}")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def affine_forward(layer: AffineLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_features:
        raise DimensionError(f"affine input length {x.shape[-1]} != {layer.in_features}")
    return x @ np.asarray(layer.weight, dtype=np.float64).T + layer.bias


def affine_backward(layer: AffineLayer, x, upstream):
    """Return ``(dx, (dweight, dbias))``. Batch axes are summed into the parameter grads."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != layer.in_features or upstream.shape[-1] != layer.out_features:
        raise DimensionError("affine backward: shape mismatch")
    if x.shape[:-1] != upstream.shape[:-1]:
        raise DimensionError("affine backward: batch shapes differ")
    dx = upstream @ np.asarray(layer.weight, dtype=np.float64)
    x2 = x.reshape(-1, layer.in_features)
    up2 = upstream.reshape(-1, layer.out_features)
    return dx, (up2.T @ x2, up2.sum(axis=0))


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise DimensionError("relu backward: shape mismatch")
    return np.where(x > 0.0, upstream, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _SIG_LO, _SIG_HI)


def sigmoid_backward(x, upstream) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise DimensionError("sigmoid backward: shape mismatch")
    s = sigmoid(x)
    return upstream * s * (1.0 - s)
