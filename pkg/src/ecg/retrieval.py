"""Exact multi-vector similarity search over an on-disk embedding store.

Similarity is the mean-pooled late-interaction score: each query vector
takes its maximum dot product over the document's vectors, and the mean
over the query vectors (not the sum) is the score, so queries with fewer
vectors are not penalized.

Store file layout (little-endian):

    magic  4 bytes "ECGS"
    u32    version (1)
    u32    m (vector dimension)
    u32    count (number of records)
    per record:
        u32  passage id
        u16  n (vector count)
        f32  n*m values, row-major

A single store serves both retrieval scoring and, via the compression
projection, generation context; nothing else is ever written to disk for
a corpus. Search is a full scan: every record is scored exactly, with ties
broken by ascending passage id.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .projections import MultiVectorEmbedding

STORE_MAGIC = b"ECGS"
STORE_VERSION = 1
HEADER_BYTES = 16
RECORD_OVERHEAD_BYTES = 6  # u32 id + u16 n


class StoreFormatError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankedResult:
    passage_id: int
    score: float
    rank: int


def maxsim(query: MultiVectorEmbedding | np.ndarray, doc: MultiVectorEmbedding | np.ndarray) -> float:
    """Mean over query vectors of the max dot product against doc vectors."""
    q = query.vectors if isinstance(query, MultiVectorEmbedding) else np.asarray(query)
    d = doc.vectors if isinstance(doc, MultiVectorEmbedding) else np.asarray(doc)
    if q.ndim != 2 or d.ndim != 2 or q.shape[0] < 1 or d.shape[0] < 1:
        raise ValueError(f"maxsim needs non-empty [n, m] arrays, got {q.shape} and {d.shape}")
    if q.shape[1] != d.shape[1]:
        raise ValueError(f"maxsim dimension mismatch: {q.shape} vs {d.shape}")
    return float((q @ d.T).max(axis=1).mean())


class EmbeddingStore:
    """Immutable-after-write collection of multi-vector embeddings."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = dim
        self._records: list[MultiVectorEmbedding] = []
        self._by_id: dict[int, int] = {}
        self._frozen = False

    def freeze(self) -> None:
        self._frozen = True

    def add(self, passage_id: int, vectors: np.ndarray) -> None:
        if self._frozen:
            raise StoreFormatError("store is read-only once loaded from disk")
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ValueError(f"record {passage_id}: vectors {vectors.shape} do not match store dim {self.dim}")
        if passage_id in self._by_id:
            raise StoreFormatError(f"duplicate passage id {passage_id}")
        if not (0 <= passage_id < 2**32):
            raise ValueError(f"passage id {passage_id} does not fit in u32")
        if not (1 <= vectors.shape[0] < 2**16):
            raise ValueError(f"record {passage_id}: vector count {vectors.shape[0]} does not fit in u16")
        self._by_id[passage_id] = len(self._records)
        self._records.append(MultiVectorEmbedding(passage_id, vectors))

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def ids(self) -> list[int]:
        return [r.source_id for r in self._records]

    def get(self, passage_id: int) -> MultiVectorEmbedding:
        try:
            return self._records[self._by_id[passage_id]]
        except KeyError:
            raise KeyError(f"passage id {passage_id} not in store") from None

    def __contains__(self, passage_id: int) -> bool:
        return passage_id in self._by_id


def store_write(store: EmbeddingStore, path: str | Path) -> None:
    chunks = [
        STORE_MAGIC,
        struct.pack("<III", STORE_VERSION, store.dim, len(store)),
    ]
    for rec in store:
        chunks.append(struct.pack("<IH", rec.source_id, rec.count))
        chunks.append(np.asarray(rec.vectors, dtype="<f4", order="C").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def store_read(path: str | Path) -> EmbeddingStore:
    blob = Path(path).read_bytes()
    if blob[:4] != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic {blob[:4]!r}, expected {STORE_MAGIC!r}")
    if len(blob) < HEADER_BYTES:
        raise StoreFormatError(f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<III", blob, 4)
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    store = EmbeddingStore(dim)
    off = HEADER_BYTES
    for _ in range(count):
        if off + RECORD_OVERHEAD_BYTES > len(blob):
            raise StoreFormatError(f"{path}: truncated record header at byte {off}")
        passage_id, n = struct.unpack_from("<IH", blob, off)
        off += RECORD_OVERHEAD_BYTES
        nbytes = 4 * n * dim
        if off + nbytes > len(blob):
            raise StoreFormatError(f"{path}: truncated vectors for passage {passage_id}")
        vectors = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
        off += nbytes
        store.add(passage_id, vectors)
    if off != len(blob):
        raise StoreFormatError(f"{path}: {len(blob) - off} trailing bytes after {count} records")
    store.freeze()
    return store


def _score_chunk(query: np.ndarray, records: Sequence[MultiVectorEmbedding]) -> list[tuple[float, int]]:
    out = []
    for rec in records:
        sims = query @ rec.vectors.T.astype(query.dtype)
        out.append((float(sims.max(axis=1).mean()), rec.source_id))
    return out


def search_topk(
    query: MultiVectorEmbedding | np.ndarray,
    store: EmbeddingStore,
    k: int,
    threads: int = 1,
) -> list[RankedResult]:
    """Exact top-k by full scan; deterministic tie-break by ascending id.

    The scan may be partitioned across worker threads; each record's score
    is computed independently so the merged result is identical to the
    serial scan.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        raise ValueError("store is empty")
    q = query.vectors if isinstance(query, MultiVectorEmbedding) else np.asarray(query)
    if q.shape[-1] != store.dim:
        raise ValueError(f"query dim {q.shape[-1]} does not match store dim {store.dim}")
    if k > len(store):
        warnings.warn(f"k={k} exceeds store size {len(store)}; returning all records", stacklevel=2)
        k = len(store)

    records = list(store)
    if threads <= 1 or len(records) < 2 * threads:
        scored = _score_chunk(q, records)
    else:
        chunk = (len(records) + threads - 1) // threads
        parts = [records[i : i + chunk] for i in range(0, len(records), chunk)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = [item for part in pool.map(lambda p: _score_chunk(q, p), parts) for item in part]

    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [RankedResult(pid, score, rank + 1) for rank, (score, pid) in enumerate(scored[:k])]


def disk_usage(store: EmbeddingStore) -> int:
    """Exact byte size of the serialized store."""
    payload = sum(RECORD_OVERHEAD_BYTES + 4 * rec.count * store.dim for rec in store)
    return HEADER_BYTES + payload


@dataclass(frozen=True)
class DualStoreComparison:
    unified_bytes: int
    dual_bytes: int
    payload_ratio: float
    byte_ratio: float


def compare_dual_store(n: int, m: int, count: int) -> DualStoreComparison:
    """Unified storage vs. keeping a second same-shape store for generation.

    A pipeline with separate retrieval and compression representations
    stores the same [n, m] float32 block twice per passage; deriving the
    generation context from the stored retrieval vectors halves that.
    """
    payload = count * (RECORD_OVERHEAD_BYTES + 4 * n * m)
    unified = HEADER_BYTES + payload
    dual = 2 * unified
    if count == 0:
        return DualStoreComparison(unified, dual, 1.0, 1.0)
    return DualStoreComparison(unified, dual, payload / (2 * payload), unified / dual)
