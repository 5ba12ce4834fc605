"""Input-conditioned attention over a fixed bias direction.

Each branch pools the user embedding along one axis, runs the summary through
a bottleneck MLP (affine, ReLU, affine, sigmoid) and produces gates for the
other axis:

* token branch: pool over D -> L gates
* embedding branch: pool over L -> D gates

In ``both`` mode the adapted direction is ``a_emb[d] * a_tok[l] * v_diff[d, l]``.
Both gates depend only on the user embedding, so applying them one after the
other gives the same result as applying the outer product at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import (
    AffineLayer,
    affine_backward,
    affine_forward,
    pool_over_embedding,
    pool_over_tokens,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)

MODES = ("token", "embedding", "both")
MODE_CODES = {"token": 0, "embedding": 1, "both": 2}
BRANCHES = ("token", "embedding")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """The first ``count`` outputs of a splitmix64 stream started at ``seed``."""
    with np.errstate(over="ignore"):
        k = np.arange(1, count + 1, dtype=np.uint64)
        z = np.uint64(seed % 2**64) + k * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def uniform_stream(seed: int, count: int) -> np.ndarray:
    """Uniform doubles in [0, 1) from the top 53 bits of splitmix64."""
    return (splitmix64(seed, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def hidden_width(n: int, r: int) -> int:
    return -(-n // r)


def branches_for(mode: str) -> tuple[str, ...]:
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    return BRANCHES if mode == "both" else (mode,)


@dataclass(frozen=True)
class AttentionMaps:
    a_tok: np.ndarray | None = None  # (..., L)
    a_emb: np.ndarray | None = None  # (..., D)


@dataclass
class AdaptiveModule:
    d: int
    l: int
    mode: str
    r: int
    # branch name -> (first layer, second layer)
    layers: dict[str, tuple[AffineLayer, AffineLayer]] = field(default_factory=dict)

    def __post_init__(self):
        names = branches_for(self.mode)
        if set(self.layers) != set(names):
            raise DimensionError(f"mode {self.mode!r} needs branches {names}, got {sorted(self.layers)}")
        for name in names:
            n = self.branch_length(name)
            h = hidden_width(n, self.r)
            first, second = self.layers[name]
            if first.weight.shape != (h, n) or second.weight.shape != (n, h):
                raise DimensionError(
                    f"{name} branch shapes {first.weight.shape}, {second.weight.shape} "
                    f"do not fit n={n}, r={self.r}"
                )

    @property
    def branches(self) -> tuple[str, ...]:
        return branches_for(self.mode)

    def branch_length(self, name: str) -> int:
        return self.l if name == "token" else self.d

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array view, in canonical checkpoint order."""
        out = {}
        for name in self.branches:
            first, second = self.layers[name]
            out[f"{name}.W1"] = first.weight
            out[f"{name}.b1"] = first.bias
            out[f"{name}.W2"] = second.weight
            out[f"{name}.b2"] = second.bias
        return out

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return parameter_shapes(self.d, self.l, self.mode, self.r)

    @property
    def num_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())

    def with_parameters(self, params: dict[str, np.ndarray]) -> "AdaptiveModule":
        layers = {}
        for name in self.branches:
            layers[name] = (
                AffineLayer(np.asarray(params[f"{name}.W1"]), np.asarray(params[f"{name}.b1"])),
                AffineLayer(np.asarray(params[f"{name}.W2"]), np.asarray(params[f"{name}.b2"])),
            )
        return AdaptiveModule(self.d, self.l, self.mode, self.r, layers)


def parameter_shapes(d: int, l: int, mode: str, r: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name in branches_for(mode):
        n = l if name == "token" else d
        h = hidden_width(n, r)
        shapes[f"{name}.W1"] = (h, n)
        shapes[f"{name}.b1"] = (h,)
        shapes[f"{name}.W2"] = (n, h)
        shapes[f"{name}.b2"] = (n,)
    return shapes


def init_module(d: int, l: int, mode: str = "both", r: int = 4, seed: int = 0) -> AdaptiveModule:
    """Seeded initialization.

    First-layer weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    using one splitmix64 stream, in the order token W1 (row-major), token b1,
    embedding W1, embedding b1 (absent branches skipped). Second layers start at
    zero, so every gate is exactly 0.5 before training.
    """
    names = branches_for(mode)
    if d < 1 or l < 1:
        raise UsageError("d and l must be positive")
    if r < 1 or r > min(d, l):
        raise UsageError(f"reduction ratio r={r} must satisfy 1 <= r <= min(d, l)={min(d, l)}")
    shapes = parameter_shapes(d, l, mode, r)
    total = sum(int(np.prod(shapes[f"{n}.W1"])) + shapes[f"{n}.b1"][0] for n in names)
    draws = uniform_stream(seed, total)
    pos = 0
    layers = {}
    for name in names:
        h, n = shapes[f"{name}.W1"]
        bound = 1.0 / math.sqrt(n)
        w1 = (2.0 * draws[pos : pos + h * n] - 1.0).reshape(h, n) * bound
        pos += h * n
        b1 = (2.0 * draws[pos : pos + h] - 1.0) * bound
        pos += h
        layers[name] = (AffineLayer(w1, b1), AffineLayer(np.zeros((n, h)), np.zeros(n)))
    return AdaptiveModule(d, l, mode, r, layers)


def _check_embedding(module: AdaptiveModule, v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim < 2 or v.shape[-2:] != (module.d, module.l):
        raise DimensionError(f"{name} shape {v.shape} does not match module ({module.d}, {module.l})")
    return v


def _branch_forward(layers: tuple[AffineLayer, AffineLayer], pooled: np.ndarray):
    z1 = affine_forward(layers[0], pooled)
    h = relu(z1)
    z2 = affine_forward(layers[1], h)
    return z1, h, z2, sigmoid(z2)


def _pool(name: str, v: np.ndarray) -> np.ndarray:
    return pool_over_embedding(v) if name == "token" else pool_over_tokens(v)


def attention(module: AdaptiveModule, v_user) -> AttentionMaps:
    """Gates for one ``(D, L)`` embedding or a ``(N, D, L)`` stack."""
    v = _check_embedding(module, v_user, "v_user")
    maps = {}
    for name in module.branches:
        maps[name] = _branch_forward(module.layers[name], _pool(name, v))[3]
    return AttentionMaps(a_tok=maps.get("token"), a_emb=maps.get("embedding"))


def scale_direction(maps: AttentionMaps, v_diff: np.ndarray) -> np.ndarray:
    out = np.asarray(v_diff, dtype=np.float64)
    if maps.a_tok is not None:
        out = out * maps.a_tok[..., None, :]
    if maps.a_emb is not None:
        out = out * maps.a_emb[..., :, None]
    return out


def adapt_direction(module: AdaptiveModule, v_user, v_diff) -> np.ndarray:
    v = _check_embedding(module, v_user, "v_user")
    vd = np.asarray(v_diff, dtype=np.float64)
    if vd.shape != (module.d, module.l):
        raise DimensionError(f"v_diff shape {vd.shape} does not match module ({module.d}, {module.l})")
    return scale_direction(attention(module, v), vd)


def module_backward(module: AdaptiveModule, v_user, v_diff, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * adapt_direction(module, v_user, v_diff))`` w.r.t. the parameters.

    ``v_user`` may be a stack ``(N, D, L)`` with ``upstream`` of the same
    shape; parameter gradients are then summed over the stack. The user
    embedding and the direction are treated as constants.
    """
    v = _check_embedding(module, v_user, "v_user")
    vd = np.asarray(v_diff, dtype=np.float64)
    if vd.shape != (module.d, module.l):
        raise DimensionError(f"v_diff shape {vd.shape} does not match module ({module.d}, {module.l})")
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != v.shape:
        raise DimensionError(f"upstream shape {up.shape} != embedding shape {v.shape}")

    caches = {}
    for name in module.branches:
        pooled = _pool(name, v)
        caches[name] = (pooled, *_branch_forward(module.layers[name], pooled))
    a_tok = caches["token"][4] if "token" in caches else None
    a_emb = caches["embedding"][4] if "embedding" in caches else None

    # d/d(gates) of sum(up * a_emb[d] * a_tok[l] * vd[d, l])
    g = up * vd
    gate_grads = {}
    if a_tok is not None:
        gt = g if a_emb is None else g * a_emb[..., :, None]
        gate_grads["token"] = gt.sum(axis=-2)
    if a_emb is not None:
        ge = g if a_tok is None else g * a_tok[..., None, :]
        gate_grads["embedding"] = ge.sum(axis=-1)

    grads = {}
    for name in module.branches:
        first, second = module.layers[name]
        pooled, z1, h, z2, _ = caches[name]
        dz2 = sigmoid_backward(z2, gate_grads[name])
        dh, (dw2, db2) = affine_backward(second, h, dz2)
        dz1 = relu_backward(z1, dh)
        _, (dw1, db1) = affine_backward(first, pooled, dz1)
        grads[f"{name}.W1"] = dw1
        grads[f"{name}.b1"] = db1
        grads[f"{name}.W2"] = dw2
        grads[f"{name}.b2"] = db2
    return grads

