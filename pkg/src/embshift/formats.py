"""Binary containers for pair datasets, directions, checkpoints and embedding batches.

Every file is little-endian::

    magic       4 bytes   b"EBPD" | b"BDIR" | b"ABCM" | b"EBIN"
    version     u16       currently 1
    n           u32       pairs (EBPD), 1 (BDIR), tensors (ABCM), embeddings (EBIN)
    d           u32
    l           u32
    dtype       u8        0 = float32
    [ABCM only] u8 mode (0 token, 1 embedding, 2 both), u32 reduction ratio
    meta_len    u32
    meta        meta_len bytes of UTF-8 JSON (sorted keys, compact separators)
    payload     float32 row-major

The pair payload interleaves neutral_i then biased_i. The checkpoint payload
holds the tensors in canonical order (token W1, b1, W2, b2, then the embedding
branch), with shapes fully determined by the header. The meta of every file
carries ``payload_fnv1a64``, checked on load.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .adaptive import MODE_CODES, MODES, AdaptiveModule, parameter_shapes
from .errors import (
    BadMagicError,
    DigestMismatchError,
    DimensionError,
    FormatError,
    TruncatedError,
    UnsupportedVersionError,
    UsageError,
)
from .tensor import AffineLayer

VERSION = 1
DTYPE_F32 = 0
MAGICS = {b"EBPD": "dataset", b"BDIR": "direction", b"ABCM": "checkpoint", b"EBIN": "batch"}
KIND_MAGIC = {v: k for k, v in MAGICS.items()}
DIGEST_KEY = "payload_fnv1a64"
# element counts are carried in the u32 header fields; larger payloads are rejected
MAX_ELEMENTS = 2**32 - 1

_HEAD = struct.Struct("<4sHIIIB")
_CKPT_EXT = struct.Struct("<BI")
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


@njit(cache=True)
def _fnv1a64(buf):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in buf:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes | np.ndarray) -> str:
    """64-bit FNV-1a over raw bytes, as a 0x-prefixed hex string."""
    buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
    return f"0x{int(_fnv1a64(buf)):016x}"


def _meta_bytes(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _as_f32(arr) -> np.ndarray:
    a = np.asarray(arr)
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to serialize non-finite values")
    return np.ascontiguousarray(a, dtype=_F32)


@dataclass
class PairDataset:
    neutral: np.ndarray  # (N, D, L) float32
    biased: np.ndarray  # (N, D, L) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.neutral = _as_f32(self.neutral)
        self.biased = _as_f32(self.biased)
        if self.neutral.ndim != 3 or self.neutral.shape != self.biased.shape:
            raise DimensionError(
                f"neutral {self.neutral.shape} and biased {self.biased.shape} must be equal (N, D, L) stacks"
            )
        if min(self.neutral.shape) < 1:
            raise DimensionError(f"dataset needs N, D, L >= 1, got {self.neutral.shape}")

    @property
    def n(self) -> int:
        return self.neutral.shape[0]

    @property
    def d(self) -> int:
        return self.neutral.shape[1]

    @property
    def l(self) -> int:
        return self.neutral.shape[2]

    def payload(self) -> bytes:
        return np.stack([self.neutral, self.biased], axis=1).tobytes()

    def digest(self) -> str:
        return fnv1a64(self.payload())

    def diffs(self) -> np.ndarray:
        """Per-pair offsets biased_i - neutral_i in float64."""
        return self.biased.astype(np.float64) - self.neutral.astype(np.float64)


@dataclass
class DirectionFile:
    direction: np.ndarray  # (D, L) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.direction = _as_f32(self.direction)
        if self.direction.ndim != 2 or min(self.direction.shape) < 1:
            raise DimensionError(f"direction must be a non-empty (D, L) matrix, got {self.direction.shape}")

    @property
    def d(self) -> int:
        return self.direction.shape[0]

    @property
    def l(self) -> int:
        return self.direction.shape[1]

    def digest(self) -> str:
        return fnv1a64(self.direction.tobytes())


@dataclass
class EmbeddingBatch:
    data: np.ndarray  # (N, D, L) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = _as_f32(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"batch must be a non-empty (N, D, L) stack, got {self.data.shape}")

    def __len__(self):
        return self.data.shape[0]


@dataclass
class Checkpoint:
    module: AdaptiveModule
    meta: dict = field(default_factory=dict)


def module_payload(module: AdaptiveModule) -> bytes:
    return b"".join(_as_f32(a).tobytes() for a in module.parameters().values())


def module_digest(module: AdaptiveModule) -> str:
    return fnv1a64(module_payload(module))


# -- writing -----------------------------------------------------------------


def _encode(kind: str, n: int, d: int, l: int, meta: dict, payload: bytes, ext: bytes = b"") -> bytes:
    meta = dict(meta)
    meta.pop(DIGEST_KEY, None)
    meta[DIGEST_KEY] = fnv1a64(payload)
    mb = _meta_bytes(meta)
    head = _HEAD.pack(KIND_MAGIC[kind], VERSION, n, d, l, DTYPE_F32)
    return head + ext + _U32.pack(len(mb)) + mb + payload


def _write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def dataset_bytes(ds: PairDataset) -> bytes:
    return _encode("dataset", ds.n, ds.d, ds.l, ds.meta, ds.payload())


def direction_bytes(df: DirectionFile) -> bytes:
    return _encode("direction", 1, df.d, df.l, df.meta, df.direction.tobytes())


def batch_bytes(batch: EmbeddingBatch) -> bytes:
    n, d, l = batch.data.shape
    return _encode("batch", n, d, l, batch.meta, batch.data.tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    m = ckpt.module
    ext = _CKPT_EXT.pack(MODE_CODES[m.mode], m.r)
    return _encode("checkpoint", len(m.parameters()), m.d, m.l, ckpt.meta, module_payload(m), ext)


def write_dataset(path, ds: PairDataset) -> None:
    _write(path, dataset_bytes(ds))


def write_direction(path, df: DirectionFile) -> None:
    _write(path, direction_bytes(df))


def write_batch(path, batch: EmbeddingBatch) -> None:
    _write(path, batch_bytes(batch))


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    _write(path, checkpoint_bytes(ckpt))


# -- reading -----------------------------------------------------------------


@dataclass
class Header:
    kind: str
    version: int
    n: int
    d: int
    l: int
    dtype: int
    meta: dict
    payload_offset: int
    payload_bytes: int
    mode: str | None = None
    r: int | None = None

    def as_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "magic": KIND_MAGIC[self.kind].decode(),
            "version": self.version,
            "n": self.n,
            "d": self.d,
            "l": self.l,
            "dtype": "float32",
            "payload_bytes": self.payload_bytes,
        }
        if self.kind == "checkpoint":
            out["mode"] = self.mode
            out["r"] = self.r
        out["meta"] = self.meta
        return out


def _element_count(kind: str, n: int, d: int, l: int, mode: str | None, r: int | None) -> int:
    if kind == "dataset":
        return 2 * n * d * l
    if kind in ("direction", "batch"):
        return n * d * l
    shapes = parameter_shapes(d, l, mode, r)
    if n != len(shapes):
        raise FormatError(f"checkpoint header lists {n} tensors, mode {mode!r} needs {len(shapes)}")
    return sum(int(np.prod(s)) for s in shapes.values())


def parse_header(buf: bytes, expect: str | None = None) -> Header:
    if len(buf) < _HEAD.size:
        raise TruncatedError(f"file too short for a header ({len(buf)} bytes)")
    magic, version, n, d, l, dtype = _HEAD.unpack_from(buf, 0)
    if magic not in MAGICS:
        raise BadMagicError(f"unknown magic {magic!r}")
    kind = MAGICS[magic]
    if expect is not None and kind != expect:
        raise BadMagicError(f"expected a {expect} file ({KIND_MAGIC[expect]!r}), found {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    if n < 1 or d < 1 or l < 1:
        raise FormatError(f"header dims must be positive, got n={n} d={d} l={l}")
    off = _HEAD.size
    mode = r = None
    if kind == "checkpoint":
        if len(buf) < off + _CKPT_EXT.size:
            raise TruncatedError("file too short for checkpoint header")
        code, r = _CKPT_EXT.unpack_from(buf, off)
        off += _CKPT_EXT.size
        if code >= len(MODES):
            raise FormatError(f"unknown mode code {code}")
        mode = MODES[code]
        if r < 1 or r > min(d, l):
            raise FormatError(f"reduction ratio {r} out of range for d={d}, l={l}")
    count = _element_count(kind, n, d, l, mode, r)
    if count > MAX_ELEMENTS:
        raise FormatError(f"header declares {count} elements, above the {MAX_ELEMENTS} limit")
    if len(buf) < off + _U32.size:
        raise TruncatedError("file too short for meta length")
    (meta_len,) = _U32.unpack_from(buf, off)
    off += _U32.size
    if len(buf) < off + meta_len:
        raise TruncatedError(f"meta truncated: need {meta_len} bytes, have {len(buf) - off}")
    try:
        meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"meta is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError("meta must be a JSON object")
    off += meta_len
    return Header(kind, version, n, d, l, dtype, meta, off, count * 4, mode, r)


def _load(path, expect: str) -> tuple[Header, np.ndarray, dict]:
    buf = Path(path).read_bytes()
    head = parse_header(buf, expect)
    have = len(buf) - head.payload_offset
    if have < head.payload_bytes:
        raise TruncatedError(f"payload truncated: header needs {head.payload_bytes} bytes, found {have}")
    if have > head.payload_bytes:
        raise FormatError(f"{have - head.payload_bytes} trailing bytes after payload")
    payload = buf[head.payload_offset :]
    stored = head.meta.get(DIGEST_KEY)
    if stored is None:
        raise FormatError(f"meta lacks {DIGEST_KEY}")
    actual = fnv1a64(payload)
    if stored != actual:
        raise DigestMismatchError(f"payload digest {actual} != stored {stored}")
    meta = {k: v for k, v in head.meta.items() if k != DIGEST_KEY}
    data = np.frombuffer(payload, dtype=_F32).copy()
    if not np.all(np.isfinite(data)):
        raise FormatError("payload contains non-finite values")
    return head, data, meta


def read_header(path) -> Header:
    """Parse and validate only the header and meta of any of the four formats."""
    with open(path, "rb") as fh:
        prefix = fh.read(_HEAD.size + _CKPT_EXT.size + _U32.size)
        meta_at = _HEAD.size + (_CKPT_EXT.size if prefix[:4] == b"ABCM" else 0)
        if len(prefix) >= meta_at + _U32.size:
            (meta_len,) = _U32.unpack_from(prefix, meta_at)
            fh.seek(0)
            prefix = fh.read(meta_at + _U32.size + meta_len)
        size = os.fstat(fh.fileno()).st_size
    head = parse_header(prefix, None)
    have = size - head.payload_offset
    if have != head.payload_bytes:
        cls = TruncatedError if have < head.payload_bytes else FormatError
        raise cls(f"payload is {have} bytes, header declares {head.payload_bytes}")
    return head


def read_dataset(path) -> PairDataset:
    head, data, meta = _load(path, "dataset")
    pairs = data.reshape(head.n, 2, head.d, head.l)
    return PairDataset(pairs[:, 0], pairs[:, 1], meta)


def read_direction(path) -> DirectionFile:
    head, data, meta = _load(path, "direction")
    if head.n != 1:
        raise FormatError(f"direction file must hold exactly one matrix, header says {head.n}")
    return DirectionFile(data.reshape(head.d, head.l), meta)


def read_batch(path) -> EmbeddingBatch:
    head, data, meta = _load(path, "batch")
    return EmbeddingBatch(data.reshape(head.n, head.d, head.l), meta)


def read_checkpoint(path) -> Checkpoint:
    head, data, meta = _load(path, "checkpoint")
    shapes = parameter_shapes(head.d, head.l, head.mode, head.r)
    params = {}
    pos = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = data[pos : pos + size].reshape(shape).astype(np.float64)
        pos += size
    layers = {}
    for branch in ("token", "embedding"):
        if f"{branch}.W1" in params:
            layers[branch] = (
                AffineLayer(params[f"{branch}.W1"], params[f"{branch}.b1"]),
                AffineLayer(params[f"{branch}.W2"], params[f"{branch}.b2"]),
            )
    return Checkpoint(AdaptiveModule(head.d, head.l, head.mode, head.r, layers), meta)


# -- dataset utilities -------------------------------------------------------


def subsample(ds: PairDataset, k: int, seed: int = 0) -> PairDataset:
    """Seeded random subset of ``k`` pairs; the parent digest goes into meta."""
    if not 1 <= k <= ds.n:
        raise UsageError(f"subsample size {k} outside [1, {ds.n}]")
    idx = np.random.default_rng(seed).permutation(ds.n)[:k]
    meta = dict(ds.meta)
    for key in ("neutral_prompts", "biased_prompts"):
        if isinstance(meta.get(key), list) and len(meta[key]) == ds.n:
            meta[key] = [meta[key][i] for i in idx]
    meta["parent_digest"] = ds.digest()
    meta["subsample"] = {"k": int(k), "seed": int(seed), "indices": [int(i) for i in idx]}
    return PairDataset(ds.neutral[idx], ds.biased[idx], meta)
