"""Adding the (adapted) bias direction to user embeddings."""

from __future__ import annotations

import numpy as np

from .adaptive import AdaptiveModule, adapt_direction
from .errors import DimensionError


def _check_pair(direction, v_user) -> tuple[np.ndarray, np.ndarray]:
    vd = np.asarray(direction, dtype=np.float64)
    v = np.asarray(v_user, dtype=np.float64)
    if v.ndim != 2 or v.shape != vd.shape:
        raise DimensionError(f"user embedding {v.shape} does not match direction {vd.shape}")
    return vd, v


def inject(module: AdaptiveModule, direction, v_user) -> np.ndarray:
    """``v_user + adapt_direction(module, v_user, direction)`` in float64. No renormalization."""
    vd, v = _check_pair(direction, v_user)
    return v + adapt_direction(module, v, vd)


def inject_fixed(direction, v_user, gain: float = 1.0) -> np.ndarray:
    """Non-adaptive variant: ``v_user + gain * direction``."""
    vd, v = _check_pair(direction, v_user)
    return v + gain * vd


def inject_batch(module: AdaptiveModule | None, direction, batch, gain: float = 1.0,
                 out_dtype=np.float32) -> np.ndarray:
    """Apply ``inject`` (or ``inject_fixed`` when ``module`` is None) to each embedding.

    Items are processed one at a time so large batches never hold a float64
    copy of the whole stack. Output order follows input order.
    """
    vd = np.asarray(direction, dtype=np.float64)
    batch = np.asarray(batch)
    if batch.ndim != 3:
        raise DimensionError(f"batch must be (N, D, L), got {batch.shape}")
    out = np.empty(batch.shape, dtype=out_dtype)
    for i in range(batch.shape[0]):
        try:
            if module is None:
                out[i] = inject_fixed(vd, batch[i], gain)
            else:
                out[i] = inject(module, vd, batch[i])
        except DimensionError as exc:
            raise DimensionError(f"batch item {i}: {exc}") from exc
    return out
