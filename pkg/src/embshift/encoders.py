"""Text-encoder providers and pair ingestion.

The toolkit never hosts an encoder. Embeddings come either from a manifest of
pre-computed EBIN files or from a separate process speaking a small JSON
protocol::

    POST /encode   {"text": "..."}
    200            {"d": D, "l": L, "data": [row-major floats, D*L of them]}
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np

from .errors import DimensionError, EmbshiftError, PromptNotFoundError, ProviderError, UsageError
from .formats import PairDataset, read_batch

TIMEOUT_ENV = "EMBSHIFT_HTTP_TIMEOUT"
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class EncoderProfile:
    name: str
    d: int
    l: int
    encoder_id: str


# SD 2.1 conditions on the OpenCLIP ViT-H/14 text tower: 1024 features x 77 tokens
PROFILES = {
    "sd21": EncoderProfile("sd21", d=1024, l=77, encoder_id="openclip-vit-h-14"),
}


class EncoderProvider:
    """Base class: ``encode`` returns a ``(d, l)`` float32 matrix."""

    encoder_id: str = "unknown"
    d: int | None = None
    l: int | None = None

    def _encode(self, prompt: str) -> np.ndarray:
        raise NotImplementedError

    def encode(self, prompt: str) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt.strip():
            raise UsageError("prompt must be a non-empty string")
        m = np.asarray(self._encode(prompt))
        if m.ndim != 2:
            raise DimensionError(f"provider returned a {m.ndim}-d array for {prompt!r}")
        if self.d is not None and self.l is not None and m.shape != (self.d, self.l):
            raise DimensionError(
                f"provider returned {m.shape[0]}x{m.shape[1]}, declared {self.d}x{self.l}"
            )
        if not np.all(np.isfinite(m)):
            raise ProviderError(f"provider returned non-finite values for {prompt!r}")
        if self.d is None or self.l is None:
            self.d, self.l = m.shape
        return m.astype(np.float32, copy=False)


def encode(provider: EncoderProvider, prompt: str) -> np.ndarray:
    return provider.encode(prompt)


class FileProvider(EncoderProvider):
    """Looks prompts up in a JSON manifest.

    Manifest layout::

        {"encoder": "...", "d": 8, "l": 6,
         "entries": {"a dog": {"file": "emb.ebin", "index": 0}, "a cat": "cat.ebin"}}

    A bare string entry means index 0. Paths are relative to the manifest.
    """

    def __init__(self, manifest_path):
        self.manifest_path = Path(manifest_path)
        try:
            manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ProviderError(f"manifest not found: {manifest_path}") from exc
        except json.JSONDecodeError as exc:
            raise ProviderError(f"manifest is not valid JSON: {exc}") from exc
        self.encoder_id = manifest.get("encoder", "file")
        self.d = manifest.get("d")
        self.l = manifest.get("l")
        self.entries = manifest.get("entries", {})
        self._root = self.manifest_path.parent
        self._batches = {}
        self._lock = threading.Lock()

    def _batch(self, name: str) -> np.ndarray:
        with self._lock:
            if name not in self._batches:
                try:
                    self._batches[name] = read_batch(self._root / name).data
                except FileNotFoundError as exc:
                    raise ProviderError(f"embedding file missing: {name}") from exc
            return self._batches[name]

    def _encode(self, prompt: str) -> np.ndarray:
        entry = self.entries.get(prompt)
        if entry is None:
            raise PromptNotFoundError(f"prompt not in manifest: {prompt!r}")
        if isinstance(entry, str):
            entry = {"file": entry, "index": 0}
        batch = self._batch(entry["file"])
        idx = int(entry.get("index", 0))
        if not 0 <= idx < batch.shape[0]:
            raise ProviderError(f"index {idx} out of range for {entry['file']}")
        return batch[idx]


class HttpProvider(EncoderProvider):
    """Client for a remote encoder. Retries once on transport failures.

    Calls on one instance are serialized; use :meth:`clone` per worker thread.
    """

    def __init__(self, endpoint: str, d: int | None = None, l: int | None = None,
                 encoder_id: str | None = None, timeout: float | None = None,
                 transport: httpx.BaseTransport | None = None):
        endpoint = endpoint.rstrip("/")
        self.url = endpoint if endpoint.endswith("/encode") else endpoint + "/encode"
        self.d, self.l = d, l
        self.encoder_id = encoder_id or f"http:{endpoint}"
        if timeout is None:
            timeout = float(os.environ.get(TIMEOUT_ENV, DEFAULT_TIMEOUT))
        self.timeout = timeout
        self._transport = transport
        self._client = httpx.Client(timeout=httpx.Timeout(timeout), transport=transport)
        self._lock = threading.Lock()

    def clone(self) -> "HttpProvider":
        return HttpProvider(self.url, self.d, self.l, self.encoder_id, self.timeout, self._transport)

    def close(self):
        self._client.close()

    def _post(self, prompt: str) -> httpx.Response:
        last = None
        for _ in range(2):
            try:
                return self._client.post(self.url, json={"text": prompt})
            except httpx.TransportError as exc:
                last = exc
        raise ProviderError(f"encoder at {self.url} unavailable: {last}") from last

    def _encode(self, prompt: str) -> np.ndarray:
        with self._lock:
            resp = self._post(prompt)
        if resp.status_code == 404:
            raise PromptNotFoundError(f"encoder does not know prompt {prompt!r}")
        if resp.status_code != 200:
            raise ProviderError(f"encoder returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            d, l, data = int(body["d"]), int(body["l"]), body["data"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"malformed encoder response: {exc}") from exc
        if len(data) != d * l:
            raise DimensionError(f"response carries {len(data)} values for a {d}x{l} matrix")
        return np.asarray(data, dtype=np.float64).reshape(d, l)


def _created() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so ingestion is reproducible
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def ingest_pairs(provider: EncoderProvider, neutral_prompts: list[str], biased_prompts: list[str],
                 bias_label: str | None = None) -> PairDataset:
    """Encode aligned prompt lists into a pair dataset (pair i = line i of each list)."""
    neutral_prompts, biased_prompts = list(neutral_prompts), list(biased_prompts)
    if not neutral_prompts or not biased_prompts:
        raise UsageError("prompt lists must be non-empty")
    if len(neutral_prompts) != len(biased_prompts):
        raise UsageError(
            f"prompt lists are not aligned: {len(neutral_prompts)} neutral vs {len(biased_prompts)} biased"
        )
    neutral, biased = [], []
    for i, (pn, pb) in enumerate(zip(neutral_prompts, biased_prompts)):
        try:
            en = provider.encode(pn)
            eb = provider.encode(pb)
        except EmbshiftError as exc:
            raise type(exc)(f"pair {i}: {exc}") from exc
        if neutral and en.shape != neutral[0].shape:
            raise DimensionError(f"pair {i}: shape {en.shape} differs from {neutral[0].shape}")
        neutral.append(en)
        biased.append(eb)
    meta = {
        "bias_label": bias_label,
        "neutral_prompts": neutral_prompts,
        "biased_prompts": biased_prompts,
        "encoder": provider.encoder_id,
        "created": _created(),
    }
    return PairDataset(np.stack(neutral), np.stack(biased), meta)


def read_prompt_list(path) -> list[str]:
    """UTF-8 text, one prompt per line; blank lines are ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


_INSTRUCTION = """\
You are helping build a paired prompt dataset for the concept: "{bias}".

Step 1. Write {count} neutral image-generation prompts about everyday scenes
with people. Each prompt is a single sentence with a plain subject-verb-object
structure, for example "A man reads a newspaper on a bench." Do not use
emotional or evaluative words.

Step 2. Rewrite each of the {count} neutral prompts so that it expresses
"{bias}". The only edit allowed is inserting adjectives directly before
nouns. Keep every original word, keep the word order, and do not add clauses,
verbs, adverbs or new objects. Example: "A man reads a newspaper on a bench."
becomes "A weary man reads a crumpled newspaper on a broken bench."

Output format: two plain-text lists of exactly {count} lines each, one prompt
per line, in the same order. List A holds the neutral prompts, list B holds
the rewritten prompts. Line i of list B must be the rewrite of line i of
list A.
"""


def emit_llm_instruction(bias_description: str, count: int) -> str:
    """Instruction text for producing aligned neutral/rewritten prompt lists with any LLM."""
    if not isinstance(bias_description, str) or not bias_description.strip():
        raise UsageError("bias description must be non-empty")
    if isinstance(count, bool) or not isinstance(count, int) or count < 1:
        raise UsageError(f"count must be a positive integer, got {count!r}")
    return _INSTRUCTION.format(bias=bias_description.strip(), count=count)
