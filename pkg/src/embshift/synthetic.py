"""Synthetic pair datasets with a known, learnable scaling law.

``make_recoverable`` builds ``biased_i = neutral_i + teacher(neutral_i) * V``
where ``teacher`` is an :class:`AdaptiveModule`. Its first layers equal the
student's seeded initialization and its second layers are drawn from
``U(-reach, reach)``. Adam moves each parameter by about ``lr`` per step, so
with ``reach = lr * epochs`` the teacher lies inside the region a student can
reach in the configured budget. Training with ``direction=V`` therefore has
an exact zero-loss solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptive import AdaptiveModule, adapt_direction, init_module
from .formats import PairDataset


@dataclass
class SyntheticProblem:
    dataset: PairDataset
    direction: np.ndarray  # the generating V, float64
    teacher: AdaptiveModule


def make_neutral(n: int, d: int, l: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Random embeddings with per-sample row and column offsets, so both poolings vary across samples."""
    base = rng.standard_normal((n, d, l))
    rows = rng.standard_normal((n, d, 1))
    cols = rng.standard_normal((n, 1, l))
    return scale * (base + rows + cols)


def make_teacher(d: int, l: int, mode: str, r: int, init_seed: int, reach: float,
                 rng: np.random.Generator) -> AdaptiveModule:
    teacher = init_module(d, l, mode, r, init_seed)
    params = dict(teacher.parameters())
    for key, value in params.items():
        if key.endswith(".W2") or key.endswith(".b2"):
            params[key] = rng.uniform(-reach, reach, value.shape)
    return teacher.with_parameters(params)


def make_recoverable(n: int, d: int, l: int, mode: str = "both", r: int = 4, seed: int = 0,
                     init_seed: int = 0, reach: float = 0.05, scale: float = 1.0,
                     teacher: AdaptiveModule | None = None,
                     direction: np.ndarray | None = None) -> SyntheticProblem:
    """Dataset whose offsets are exactly ``teacher(neutral_i) * V``.

    Pass ``teacher`` and ``direction`` to reuse one scaling law across several
    datasets (for example two disjoint domains in a transfer check).
    """
    rng = np.random.default_rng(seed)
    if teacher is None:
        teacher = make_teacher(d, l, mode, r, init_seed, reach, rng)
    if direction is None:
        direction = rng.standard_normal((d, l))
    neutral = make_neutral(n, d, l, rng, scale).astype(np.float32)
    biased = neutral + adapt_direction(teacher, neutral, direction)
    meta = {"generator": "recoverable", "seed": seed, "mode": teacher.mode, "reach": reach}
    return SyntheticProblem(PairDataset(neutral, biased, meta), direction, teacher)


TOY_NEUTRAL = [
    "A woman waters a plant.",
    "A man reads a newspaper.",
    "A child holds a balloon.",
    "A chef slices a tomato.",
]
TOY_BIASED = [
    "A weary woman waters a wilted plant.",
    "A gloomy man reads a crumpled newspaper.",
    "A lonely child holds a deflated balloon.",
    "A miserable chef slices a rotten tomato.",
]
TOY_USERS = [
    "A boy kicks a ball.",
    "A girl paints a picture.",
    "An old man feeds a pigeon.",
]
# offset scale per pair; mean is exactly 1, so the pair mean equals the known direction
TOY_SCALES = (0.25, 0.5, 0.75, 2.5)


def toy_arrays(d: int = 8, l: int = 6):
    """Dyadic-valued toy data, exact in float32: (neutral, biased, users, direction)."""
    rows, cols = np.meshgrid(np.arange(d), np.arange(l), indexing="ij")
    direction = 0.5 * (((rows + cols) % 3) - 1)
    neutral = np.stack([0.125 * (((3 * rows + 5 * cols + 7 * i) % 9) - 4) + 0.25 * i for i in range(4)])
    biased = neutral + np.stack([c * direction for c in TOY_SCALES])
    users = np.stack([0.125 * (((2 * rows + 3 * cols + 5 * j) % 7) - 3) + 0.125 * j for j in range(3)])
    return neutral, biased, users, direction


def write_toy_fixture(directory) -> None:
    """Prompt lists, manifest and embedding files for the 4-pair, 8x6 toy set."""
    import json
    from pathlib import Path

    from .formats import EmbeddingBatch, write_batch

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    neutral, biased, users, direction = toy_arrays()
    d, l = direction.shape
    write_batch(out / "embeddings.ebin", EmbeddingBatch(np.concatenate([neutral, biased]), {"encoder": "toy"}))
    write_batch(out / "users.ebin", EmbeddingBatch(users, {"encoder": "toy", "prompts": TOY_USERS}))
    entries = {p: {"file": "embeddings.ebin", "index": i} for i, p in enumerate(TOY_NEUTRAL)}
    entries.update({p: {"file": "embeddings.ebin", "index": 4 + i} for i, p in enumerate(TOY_BIASED)})
    entries.update({p: {"file": "users.ebin", "index": i} for i, p in enumerate(TOY_USERS)})
    manifest = {"encoder": "toy", "d": d, "l": l, "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (out / "neutral.txt").write_text("\n".join(TOY_NEUTRAL) + "\n", encoding="utf-8")
    (out / "biased.txt").write_text("\n".join(TOY_BIASED) + "\n", encoding="utf-8")
    (out / "direction.json").write_text(json.dumps(direction.tolist()) + "\n", encoding="utf-8")


def toy_fixture_dir():
    """Path of the bundled toy fixture."""
    from importlib.resources import files

    return files("embshift") / "data" / "toy"
