"""Fitting the attention module to the pair offsets.

The objective is the mean over pairs of
``|| (biased_i - neutral_i) - adapt_direction(module, neutral_i, direction) ||_F^2``,
minimized with full-batch Adam. The direction stays fixed throughout.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adaptive import AdaptiveModule, adapt_direction, branches_for, init_module, module_backward
from .errors import DimensionError, DivergenceError, UsageError
from .formats import PairDataset, fnv1a64

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "both"
    r: int = 4
    full_batch: bool = True

    def __post_init__(self):
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 1:
            raise UsageError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise UsageError(f"learning rate must be positive, got {self.lr!r}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise UsageError(f"{name} must lie in (0, 1), got {b!r}")
        if not self.eps > 0:
            raise UsageError(f"eps must be positive, got {self.eps!r}")
        if self.r < 1:
            raise UsageError(f"reduction ratio must be >= 1, got {self.r!r}")
        if not self.full_batch:
            raise UsageError("only full-batch training is supported")
        branches_for(self.mode)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        )


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              config: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise DimensionError("parameter, gradient and moment names differ")
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise DimensionError(f"gradient {k} has shape {np.shape(g)}, parameter {np.shape(params[k])}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise DivergenceError(f"non-finite gradient in {k} ({bad} entries) at step {state.t + 1}")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        step = config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        new_params[k] = np.asarray(p, dtype=np.float64) - step
        new_m[k], new_v[k] = m, v
        if not np.all(np.isfinite(new_params[k])):
            raise DivergenceError(f"parameter {k} became non-finite at step {t}")
    return new_params, AdamState(new_m, new_v, t)


def _check(module: AdaptiveModule, ds: PairDataset, direction) -> np.ndarray:
    vd = np.asarray(direction, dtype=np.float64)
    if ds.n < 1:
        raise DimensionError("empty dataset")
    if vd.shape != (ds.d, ds.l):
        raise DimensionError(f"direction {vd.shape} does not match dataset ({ds.d}, {ds.l})")
    if (module.d, module.l) != (ds.d, ds.l):
        raise DimensionError(f"module ({module.d}, {module.l}) does not match dataset ({ds.d}, {ds.l})")
    return vd


def residuals(module: AdaptiveModule, ds: PairDataset, direction) -> np.ndarray:
    """Per-pair ``v_diff_i - adapt_direction(module, neutral_i, direction)``, shape (N, D, L)."""
    vd = _check(module, ds, direction)
    return ds.diffs() - adapt_direction(module, ds.neutral, vd)


def loss(module: AdaptiveModule, ds: PairDataset, direction) -> float:
    res = residuals(module, ds, direction)
    return float((res**2).sum(axis=(1, 2)).mean())


def loss_and_grads(module: AdaptiveModule, ds: PairDataset, direction) -> tuple[float, dict[str, np.ndarray]]:
    vd = _check(module, ds, direction)
    res = ds.diffs() - adapt_direction(module, ds.neutral, vd)
    value = float((res**2).sum(axis=(1, 2)).mean())
    # d/d(adapted) of mean_i ||diff_i - adapted_i||^2
    upstream = (-2.0 / ds.n) * res
    return value, module_backward(module, ds.neutral, vd, upstream)


def fixed_direction_loss(ds: PairDataset, direction) -> float:
    """Objective value of adding the unscaled direction to every pair."""
    vd = np.asarray(direction, dtype=np.float64)
    return float(((ds.diffs() - vd) ** 2).sum(axis=(1, 2)).mean())


@dataclass
class TrainReport:
    losses: list[float]
    initial_loss: float
    final_loss: float
    config: dict
    config_fingerprint: str
    seed: int
    dataset_digest: str
    direction_digest: str
    num_parameters: int
    wall_time: float = 0.0
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def train(ds: PairDataset, direction, config: TrainConfig | None = None,
          module: AdaptiveModule | None = None, on_epoch=None) -> tuple[AdaptiveModule, TrainReport]:
    """Full-batch Adam for ``config.epochs`` steps.

    ``losses[0]`` is the objective before any update; ``losses[k]`` after
    epoch ``k``. ``on_epoch(epoch, loss)`` is called after each entry.
    """
    config = config or TrainConfig()
    vd32 = np.asarray(direction, dtype=np.float32)
    if module is None:
        if vd32.shape != (ds.d, ds.l):
            raise DimensionError(f"direction {vd32.shape} does not match dataset ({ds.d}, {ds.l})")
        module = init_module(ds.d, ds.l, config.mode, config.r, config.seed)
    vd = _check(module, ds, direction)

    report = TrainReport(
        losses=[], initial_loss=math.nan, final_loss=math.nan, config=config.to_dict(),
        config_fingerprint=config.fingerprint(), seed=config.seed, dataset_digest=ds.digest(),
        direction_digest=fnv1a64(np.ascontiguousarray(vd32).tobytes()),
        num_parameters=module.num_parameters,
    )
    start = time.perf_counter()
    params = {k: np.asarray(p, dtype=np.float64) for k, p in module.parameters().items()}
    state = AdamState.zeros_like(params)

    value, grads = loss_and_grads(module, ds, vd)
    report.losses.append(value)
    report.initial_loss = value
    if on_epoch:
        on_epoch(0, value)
    for epoch in range(1, config.epochs + 1):
        try:
            params, state = adam_step(state, params, grads, config)
        except DivergenceError as exc:
            report.status = "diverged"
            report.wall_time = time.perf_counter() - start
            exc.report = report
            raise
        module = module.with_parameters(params)
        value, grads = loss_and_grads(module, ds, vd)
        report.losses.append(value)
        if on_epoch:
            on_epoch(epoch, value)
        if not math.isfinite(value) or value > DIVERGENCE_FACTOR * max(report.initial_loss, 1e-300):
            report.status = "diverged"
            report.final_loss = value
            report.wall_time = time.perf_counter() - start
            raise DivergenceError(
                f"loss {value:.6g} at epoch {epoch} exceeds {DIVERGENCE_FACTOR:g}x initial {report.initial_loss:.6g}",
                report,
            )
        log.debug("epoch %d loss %.6g", epoch, value)
    report.final_loss = report.losses[-1]
    report.wall_time = time.perf_counter() - start
    return module, report
