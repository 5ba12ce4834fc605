"""Mean-difference bias direction and per-pair diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError
from .formats import PairDataset


def compute_direction(ds: PairDataset, dtype=np.float32) -> np.ndarray:
    """Mean of ``biased_i - neutral_i`` over all pairs.

    Accumulates in float64 in ascending pair order with one accumulator per
    element, then casts to ``dtype`` (float32 for storage, float64 to keep full
    precision).
    """
    if ds.n < 1:
        raise DimensionError("cannot compute a direction from an empty dataset")
    acc = np.zeros((ds.d, ds.l), dtype=np.float64)
    for i in range(ds.n):
        acc += ds.biased[i].astype(np.float64) - ds.neutral[i].astype(np.float64)
    return (acc / ds.n).astype(dtype)


@dataclass
class DirectionStats:
    residual_norms: list[float]
    mean_residual: float
    max_residual: float
    direction_norm: float
    token_norms: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def direction_stats(ds: PairDataset, direction) -> DirectionStats:
    """How far each pair's offset sits from the shared direction (Frobenius norms)."""
    vd = np.asarray(direction, dtype=np.float64)
    if vd.shape != (ds.d, ds.l):
        raise DimensionError(f"direction {vd.shape} does not match dataset ({ds.d}, {ds.l})")
    diffs = ds.diffs()
    res = np.sqrt(((diffs - vd) ** 2).sum(axis=(1, 2)))
    return DirectionStats(
        residual_norms=[float(x) for x in res],
        mean_residual=float(res.mean()),
        max_residual=float(res.max()),
        direction_norm=float(np.sqrt((vd**2).sum())),
        token_norms=[float(x) for x in np.sqrt((vd**2).sum(axis=0))],
    )
