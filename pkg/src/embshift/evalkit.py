"""Embedding-space diagnostics for a trained module.

No thresholds live here; callers decide what counts as good enough.

Report JSON fields (stable):

    n, d, l, mode
    adaptive_residual        per-pair ||v_diff_i - adapted_i||^2
    fixed_residual           per-pair ||v_diff_i - direction||^2
    mean_adaptive_residual, mean_fixed_residual
    cosine                   per-pair cosine(neutral_i, injected_i), flattened
    mean_cosine
    token_cosine             per-token cosine averaged over pairs (length L)
    attention                {"token"|"embedding": {"mean","std","min","max"}}
    dataset_digest, direction_digest, module_digest

Floats are written with 9 significant digits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .adaptive import AdaptiveModule, attention, scale_direction
from .errors import DimensionError
from .formats import PairDataset, fnv1a64, module_digest

FLOAT_DIGITS = 9


def _round(x):
    if isinstance(x, float):
        return float(f"{x:.{FLOAT_DIGITS}g}")
    if isinstance(x, list):
        return [_round(v) for v in x]
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    return x


@dataclass
class EvalReport:
    n: int
    d: int
    l: int
    mode: str
    adaptive_residual: list[float]
    fixed_residual: list[float]
    mean_adaptive_residual: float
    mean_fixed_residual: float
    cosine: list[float]
    mean_cosine: float
    token_cosine: list[float]
    attention: dict[str, dict[str, float]]
    dataset_digest: str
    direction_digest: str
    module_digest: str
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _round(asdict(self))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _cosine(a: np.ndarray, b: np.ndarray, axis) -> np.ndarray:
    num = (a * b).sum(axis=axis)
    den = np.sqrt((a * a).sum(axis=axis) * (b * b).sum(axis=axis))
    # a zero vector is treated as aligned with itself
    cos = np.divide(num, den, out=np.ones_like(num), where=den > 0)
    return np.clip(cos, -1.0, 1.0)


def _stats(values: np.ndarray) -> dict[str, float]:
    return {
        "mean": float(values.mean()),
        "std": float(values.std()),
        "min": float(values.min()),
        "max": float(values.max()),
    }


def evaluate(module: AdaptiveModule, direction, ds: PairDataset) -> EvalReport:
    """Compare the adapted direction with the fixed one on every pair of ``ds``."""
    vd = np.asarray(direction, dtype=np.float64)
    if vd.shape != (ds.d, ds.l) or (module.d, module.l) != (ds.d, ds.l):
        raise DimensionError(
            f"module ({module.d}, {module.l}), direction {vd.shape} and dataset ({ds.d}, {ds.l}) disagree"
        )
    diffs = ds.diffs()
    user = ds.neutral.astype(np.float64)
    maps = attention(module, user)
    adapted = scale_direction(maps, vd)
    injected = user + adapted

    adaptive_res = ((diffs - adapted) ** 2).sum(axis=(1, 2))
    fixed_res = ((diffs - vd) ** 2).sum(axis=(1, 2))
    cos = _cosine(user.reshape(ds.n, -1), injected.reshape(ds.n, -1), axis=1)
    token_cos = _cosine(user, injected, axis=1).mean(axis=0)

    att = {}
    if maps.a_tok is not None:
        att["token"] = _stats(maps.a_tok)
    if maps.a_emb is not None:
        att["embedding"] = _stats(maps.a_emb)

    return EvalReport(
        n=ds.n, d=ds.d, l=ds.l, mode=module.mode,
        adaptive_residual=[float(x) for x in adaptive_res],
        fixed_residual=[float(x) for x in fixed_res],
        mean_adaptive_residual=float(adaptive_res.mean()),
        mean_fixed_residual=float(fixed_res.mean()),
        cosine=[float(x) for x in cos],
        mean_cosine=float(cos.mean()),
        token_cosine=[float(x) for x in token_cos],
        attention=att,
        dataset_digest=ds.digest(),
        direction_digest=fnv1a64(np.ascontiguousarray(vd, dtype=np.float32).tobytes()),
        module_digest=module_digest(module),
    )


def transfer_report(module: AdaptiveModule, direction, source: PairDataset,
                    target: PairDataset) -> tuple[EvalReport, EvalReport]:
    """Evaluate on the training domain and on an unseen one with the same module and direction."""
    for name, ds in (("source", source), ("target", target)):
        if (ds.d, ds.l) != (module.d, module.l):
            raise DimensionError(f"{name} dataset ({ds.d}, {ds.l}) does not match module ({module.d}, {module.l})")
    return evaluate(module, direction, source), evaluate(module, direction, target)
