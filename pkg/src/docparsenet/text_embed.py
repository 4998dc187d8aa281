"""Text embedding providers standing in for OCR followed by a BERT-style encoder.

Every provider maps a batch of :class:`TextRecord` to a ``[B, 1, dim]`` tensor,
i.e. one aggregate ([CLS]-like) token per sample.

* ``hash``: a deterministic pseudo-embedding seeded from the text bytes.
* ``constant``: the same fixed vector for every sample.
* ``file``: precomputed vectors looked up by ``sample_id`` in a DTF matrix
  with a sidecar ``.index`` file (one sample id per line, line n = row n).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dtf import atomic_write_bytes, dtf_read, dtf_write
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, make_result

EMBED_DIM = 768
KINDS = ("file", "hash", "constant")


class EmbeddingLookupError(DataError, LookupError):
    pass


@dataclass
class TextRecord:
    sample_id: str
    text: str
    embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=np.float32).reshape(-1)


def hash_embedding(text: str, dim: int = EMBED_DIM, seed: int = 0) -> np.ndarray:
    """Uniform [-1, 1] vector drawn from a generator seeded by a keyed hash of ``text``."""
    digest = hashlib.blake2b(
        text.encode("utf-8"), digest_size=16, key=int(seed).to_bytes(8, "little", signed=True)
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.uniform(-1.0, 1.0, size=dim).astype(np.float32)


def index_path(path) -> str:
    return os.fspath(path) + ".index"


def write_embedding_file(path, ids, matrix):
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ShapeError(f"need a [{len(ids)}, dim] matrix, got {list(matrix.shape)}")
    dtf_write(path, {"embeddings": matrix})
    atomic_write_bytes(index_path(path), "".join(f"{i}\n" for i in ids).encode("utf-8"))


@dataclass
class EmbeddingProvider:
    kind: str
    dim: int = EMBED_DIM
    source: Optional[str] = None
    seed: int = 0
    _table: dict = field(default=None, repr=False)
    _constant: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"provider kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "file":
            if not self.source:
                raise ConfigError("file provider needs a source path")
            self._load()
        if self.kind == "constant":
            self._constant = np.random.default_rng(self.seed).uniform(-1, 1, self.dim).astype(np.float32)

    @classmethod
    def from_spec(cls, spec: str, dim: int = EMBED_DIM, seed: int = 0) -> "EmbeddingProvider":
        """Parse ``hash``, ``constant`` or ``file:<path>``."""
        kind, _, source = spec.partition(":")
        return cls(kind, dim=dim, source=source or None, seed=seed)

    def _load(self):
        try:
            tensors = dtf_read(self.source)
            with open(index_path(self.source), encoding="utf-8") as fh:
                ids = [line.rstrip("\n") for line in fh if line.strip()]
        except FileNotFoundError as exc:
            raise DataError(f"embedding file missing: {exc.filename}") from None
        matrix = tensors.get("embeddings", next(iter(tensors.values()), None))
        if matrix is None or matrix.ndim != 2 or matrix.shape[1] != self.dim or matrix.shape[0] != len(ids):
            raise DataError(f"{self.source}: expected a [{len(ids)}, {self.dim}] embedding matrix")
        self._table = {sid: matrix[row] for row, sid in enumerate(ids)}

    def vector(self, record: TextRecord) -> np.ndarray:
        if self.kind == "constant":
            return self._constant
        if self.kind == "hash":
            return hash_embedding(record.text, self.dim, self.seed)
        vec = self._table.get(record.sample_id)
        if vec is None:
            vec = record.embedding
        if vec is None:
            raise EmbeddingLookupError(f"no embedding for sample {record.sample_id!r} in {self.source}")
        return vec

    def embed(self, records, dtype=np.float32) -> Tensor:
        return embed(self, records, dtype)


def embed(provider: EmbeddingProvider, records, dtype=np.float32) -> Tensor:
    """Stack one embedding per record into a ``[B, 1, dim]`` tensor."""
    records = list(records)
    if not records:
        raise ShapeError("embed needs at least one record")
    rows = [np.asarray(provider.vector(r), dtype=np.float32) for r in records]
    for r, v in zip(records, rows):
        if v.shape != (provider.dim,):
            raise ShapeError(f"embedding for {r.sample_id!r} has shape {list(v.shape)}, expected [{provider.dim}]")
    return Tensor(np.stack(rows)[:, None, :].astype(dtype))


def cls_extract(seq) -> Tensor:
    """Keep the first token of a ``[B, S, dim]`` sequence: ``seq[:, 0:1, :]``."""
    data = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    if data.ndim != 3:
        raise ShapeError(f"expected [B,S,dim], got {list(data.shape)}")
    if data.shape[1] == 0:
        raise ShapeError("sequence has no tokens")
    if not isinstance(seq, Tensor):
        return Tensor(data[:, :1, :].copy())

    def back(g):
        full = np.zeros_like(seq.data)
        full[:, :1, :] = g
        return (full,)

    return make_result(seq.data[:, :1, :].copy(), (seq,), back, "cls_extract")
