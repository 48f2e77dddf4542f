"""Pluggable item-semantic embeddings: metadata-to-text, embedding providers
with a persistent cache, and the trainable projector into the model space."""

import hashlib
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CACHE_MAGIC = b"SEMC"
DEFAULT_TEXT_CAP = 2048


class ProviderError(RuntimeError):
    """Raised when an embedding provider fails after retries; carries the
    index of the failing batch."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


class CacheCorruptionError(RuntimeError):
    pass


def json2sentence(record, text_cap=DEFAULT_TEXT_CAP):
    """Render a metadata record as one declarative sentence.

    Missing fields are elided with the grammar kept intact; the output is
    trimmed to `text_cap` characters. A record with no usable field is a
    metadata-absent item and raises ValueError.
    """
    title = str(record.get("title") or "").strip()
    category = record.get("category") or ""
    if isinstance(category, (list, tuple)):
        category = ", ".join(str(c) for c in category)
    category = str(category).strip()
    description = record.get("description") or ""
    if isinstance(description, (list, tuple)):
        description = " ".join(str(d) for d in description)
    description = str(description).strip()

    if not (title or category or description):
        raise ValueError("metadata record has no usable field")

    sentence = f"The item '{title}'" if title else "The item"
    if category:
        sentence += f" belongs to category {category}"
    sentence += "."
    if description:
        sentence += f" {description}"
    return sentence[:text_cap]


class EmbeddingProvider:
    """Text-batch -> vector-batch capability.

    Implementations must be deterministic for identical text within one
    cache epoch and return float32 vectors of width `dim_raw`. `calls`
    counts actual provider invocations (cache hits bypass it).
    """

    name = "base"
    dim_raw = 0

    def __init__(self):
        self.calls = 0

    def embed(self, texts):
        raise NotImplementedError


class MockEmbeddingProvider(EmbeddingProvider):
    """Offline provider: a seeded hash-derived unit vector per text.

    Bit-identical across runs for the same (seed, text), which makes the
    full pipeline testable without network access or credentials.
    """

    name = "mock"

    def __init__(self, dim_raw=2048, seed=0):
        super().__init__()
        self.dim_raw = dim_raw
        self.seed = seed

    def embed(self, texts):
        self.calls += 1
        out = np.empty((len(texts), self.dim_raw), dtype=np.float32)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
            v = rng.standard_normal(self.dim_raw)
            out[i] = (v / np.linalg.norm(v)).astype(np.float32)
        return out


class HttpEmbeddingProvider(EmbeddingProvider):
    """JSON-over-HTTP embedding endpoint client.

    Credentials come from the environment only (`api_key_env`); missing
    credentials are a configuration error at construction time. Requests
    are retried with backoff, and a still-failing batch raises
    ProviderError carrying the batch index.
    """

    def __init__(self, url, model, dim_raw, api_key_env="EMBEDDING_API_KEY",
                 batch_size=16, retries=3, timeout=60.0, name=None):
        super().__init__()
        key = os.environ.get(api_key_env, "")
        if not key:
            raise ValueError(f"environment variable {api_key_env} is not set")
        self._key = key
        self.url = url
        self.model = model
        self.dim_raw = dim_raw
        self.batch_size = batch_size
        self.retries = retries
        self.timeout = timeout
        self.name = name or f"http:{model}"

    def embed(self, texts):
        import requests

        out = np.empty((len(texts), self.dim_raw), dtype=np.float32)
        for bi, start in enumerate(range(0, len(texts), self.batch_size)):
            chunk = texts[start:start + self.batch_size]
            last_exc = None
            for attempt in range(self.retries):
                try:
                    resp = requests.post(
                        self.url,
                        json={"model": self.model, "input": chunk},
                        headers={"Authorization": f"Bearer {self._key}"},
                        timeout=self.timeout,
                    )
                    resp.raise_for_status()
                    data = resp.json()["data"]
                    for j, row in enumerate(data):
                        out[start + j] = np.asarray(row["embedding"], dtype=np.float32)
                    self.calls += 1
                    last_exc = None
                    break
                except Exception as exc:  # noqa: BLE001 - retried, then surfaced
                    last_exc = exc
                    time.sleep(min(2.0**attempt, 8.0))
            if last_exc is not None:
                raise ProviderError(f"embedding batch {bi} failed: {last_exc}", batch_index=bi) from last_exc
        return out


def _text_key(text):
    return hashlib.sha256(text.encode("utf-8")).digest()


class EmbeddingCache:
    """Persistent binary cache of provider outputs.

    File layout (little-endian): magic "SEMC", uint16 provider-name length,
    the name bytes, uint32 dim_raw, uint64 record count, then `count`
    records of (32-byte sha256 text key, dim_raw float32 values).
    """

    def __init__(self, path, provider_name, dim_raw):
        self.path = Path(path)
        self.provider_name = provider_name
        self.dim_raw = dim_raw
        self.entries = {}
        if self.path.exists():
            self._load()

    def _load(self):
        raw = self.path.read_bytes()
        try:
            if raw[:4] != CACHE_MAGIC:
                raise CacheCorruptionError(f"{self.path}: bad magic")
            off = 4
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            dim, count = struct.unpack_from("<IQ", raw, off)
            off += 12
            if name != self.provider_name or dim != self.dim_raw:
                raise CacheCorruptionError(
                    f"{self.path}: cache is for provider {name!r} dim {dim}, "
                    f"expected {self.provider_name!r} dim {self.dim_raw}"
                )
            rec = 32 + 4 * dim
            if len(raw) - off != count * rec:
                raise CacheCorruptionError(f"{self.path}: truncated cache file")
            for _ in range(count):
                key = raw[off:off + 32]
                vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 32).copy()
                self.entries[key] = vec
                off += rec
        except struct.error as exc:
            raise CacheCorruptionError(f"{self.path}: truncated cache header") from exc

    def save(self):
        name = self.provider_name.encode("utf-8")
        parts = [CACHE_MAGIC, struct.pack("<H", len(name)), name,
                 struct.pack("<IQ", self.dim_raw, len(self.entries))]
        for key in sorted(self.entries):
            parts.append(key)
            parts.append(self.entries[key].astype("<f4").tobytes())
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(self.path)

    def get(self, text):
        return self.entries.get(_text_key(text))

    def put(self, text, vector):
        self.entries[_text_key(text)] = np.asarray(vector, dtype=np.float32)


def embed_texts(provider, texts, cache_path=None):
    """Embed texts through the provider, serving repeats and previously
    cached texts from the cache file when one is given."""
    cache = EmbeddingCache(cache_path, provider.name, provider.dim_raw) if cache_path else None
    out = np.empty((len(texts), provider.dim_raw), dtype=np.float32)
    missing, missing_texts, seen = [], [], {}
    for i, text in enumerate(texts):
        vec = cache.get(text) if cache is not None else None
        if vec is not None:
            out[i] = vec
        elif text in seen:
            missing.append(i)  # duplicate of an in-flight text; filled below
        else:
            seen[text] = i
            missing.append(i)
            missing_texts.append(text)
    if missing_texts:
        fresh = provider.embed(missing_texts)
        if fresh.shape != (len(missing_texts), provider.dim_raw):
            raise ProviderError(
                f"provider returned shape {fresh.shape}, expected "
                f"{(len(missing_texts), provider.dim_raw)}"
            )
        by_text = dict(zip(missing_texts, fresh))
        for i in missing:
            out[i] = by_text[texts[i]]
        if cache is not None:
            for text, vec in by_text.items():
                cache.put(text, vec)
            cache.save()
    return out


@dataclass
class SemanticTable:
    """Raw provider embeddings per catalog item plus presence flags.

    Rows where `present` is False are zeros and the item falls back to the
    learned embedding table downstream.
    """

    raw: np.ndarray
    present: np.ndarray

    @property
    def dim_raw(self):
        return self.raw.shape[1]


def build_semantic_table(catalog, provider, cache_path=None, text_cap=DEFAULT_TEXT_CAP):
    """Embed every catalog item that has usable metadata."""
    texts, ids = [], []
    for item_id in range(catalog.n):
        meta = catalog.metadata.get(item_id)
        if not meta:
            continue
        try:
            texts.append(json2sentence(meta, text_cap=text_cap))
        except ValueError:
            continue
        ids.append(item_id)
    raw = np.zeros((catalog.n, provider.dim_raw), dtype=np.float32)
    present = np.zeros(catalog.n, dtype=bool)
    if ids:
        raw[ids] = embed_texts(provider, texts, cache_path=cache_path)
        present[ids] = True
    return SemanticTable(raw=raw, present=present)


def save_semantic_table(table, path):
    np.savez(path, raw=table.raw, present=table.present)


def load_semantic_table(path):
    data = np.load(path)
    return SemanticTable(raw=data["raw"], present=data["present"].astype(bool))


class SpaceProjector(nn.Module):
    """Two-layer perceptron mapping raw provider embeddings to width d."""

    def __init__(self, dim_raw, d, hidden=None):
        super().__init__()
        hidden = hidden or 4 * d
        self.fc1 = nn.Linear(dim_raw, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        if x.shape[-1] != self.fc1.in_features:
            raise ValueError(f"raw width {x.shape[-1]} != expected {self.fc1.in_features}")
        return self.fc2(torch.relu(self.fc1(x)))


def init_item_table(n, d, generator=None):
    """Learned embedding table over n items plus the padding row, initialized
    uniformly in [-1/sqrt(d), 1/sqrt(d)]."""
    stdv = 1.0 / d**0.5
    table = torch.empty(n + 1, d)
    table.uniform_(-stdv, stdv, generator=generator)
    return table
