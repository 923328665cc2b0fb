"""Passage-embedding vector store with exact cosine top-k search.

Embeddings are L2-normalized at build time and queries at search time, so
cosine similarity is a plain dot product and there is a single canonical
similarity path. Search is exact (full scan): at desk scale, approximation
error must not be confounded with the retrieval quality under study.

On-disk format: magic ``SRAGIDX1`` | version u32 | H u32 | N u64 | id table
(per id: u32 byte length + UTF-8) | N x H f32 little-endian rows. A sibling
format with magic ``SRAGEMB1`` stores raw (unnormalized) embeddings written
by the CLI ``embed`` step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INDEX_MAGIC = b"SRAGIDX1"
EMB_MAGIC = b"SRAGEMB1"
VERSION = 1
NORM_TOL = 1e-6


@dataclass(frozen=True)
class Index:
    ids: tuple[str, ...]
    matrix: np.ndarray  # N x H, rows unit-norm

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class SearchResult:
    """Ranked (passage id, cosine score) pairs, scores non-increasing, ties
    broken by ascending id."""

    ranking: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.ranking]

    def rank_of(self, passage_id: str) -> int | None:
        """1-based rank of a passage, or None if outside the ranking."""
        for pos, (pid, _) in enumerate(self.ranking, start=1):
            if pid == passage_id:
                return pos
        return None


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero vector cannot be indexed")
    return (matrix / norms).astype(np.float32)


def build(pairs) -> Index:
    """Build an index from (id, embedding) pairs. Content is independent of
    input order: rows are stored sorted by id."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot build an empty index")
    ids = [str(pid) for pid, _ in pairs]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate passage ids: {dupes}")
    dims = {np.asarray(vec).shape for _, vec in pairs}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ValueError(f"inconsistent embedding shapes: {sorted(dims)}")
    order = sorted(range(len(pairs)), key=lambda i: ids[i])
    matrix = np.stack([np.asarray(pairs[i][1], dtype=np.float64) for i in order])
    return Index(ids=tuple(ids[i] for i in order), matrix=_normalize_rows(matrix))


def search(index: Index, query: np.ndarray, k: int) -> SearchResult:
    """Exact top-k by dot product with the normalized query (equals cosine).
    Returns min(k, N) results; ties break by ascending passage id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query shape {query.shape} does not match index dim {index.dim}")
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise ValueError("cannot search with a zero query vector")
    scores = index.matrix.astype(np.float64) @ (query / norm)
    # lexsort: primary key last. Ascending id breaks exact-score ties.
    order = np.lexsort((np.array(index.ids), -scores))[: min(k, len(index.ids))]
    return SearchResult(
        ranking=tuple((index.ids[i], float(scores[i])) for i in order)
    )


def recall_at_k(results: dict[str, SearchResult], qrels: dict[str, str], k: int) -> float:
    """Fraction of queries whose single relevant passage appears in the
    top-k of its result list."""
    if not results:
        raise ValueError("no query results")
    hits = 0
    for query_key, result in results.items():
        if query_key not in qrels:
            raise KeyError(f"query {query_key!r} missing from qrels")
        relevant = qrels[query_key]
        hits += any(pid == relevant for pid, _ in result.ranking[:k])
    return hits / len(results)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _write_matrix_file(path, magic: bytes, ids, matrix: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", matrix.shape[1]))
        fh.write(struct.pack("<Q", matrix.shape[0]))
        for pid in ids:
            encoded = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def _read_matrix_file(path, magic: bytes) -> tuple[tuple[str, ...], np.ndarray]:
    path = Path(path)
    with path.open("rb") as fh:
        def need(n: int, what: str) -> bytes:
            data = fh.read(n)
            if len(data) != n:
                raise ValueError(f"corrupt file (truncated at {what}): {path}")
            return data

        got = need(8, "magic")
        if got != magic:
            raise ValueError(f"bad magic {got!r} (expected {magic!r}): {path}")
        (version,) = struct.unpack("<I", need(4, "version"))
        if version != VERSION:
            raise ValueError(f"unsupported version {version}: {path}")
        (dim,) = struct.unpack("<I", need(4, "dim"))
        (count,) = struct.unpack("<Q", need(8, "count"))
        ids = []
        for _ in range(count):
            (id_len,) = struct.unpack("<I", need(4, "id length"))
            ids.append(need(id_len, "id").decode("utf-8"))
        raw = need(4 * dim * count, "embedding rows")
        if fh.read(1):
            raise ValueError(f"corrupt file (trailing bytes): {path}")
    matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float32)
    return tuple(ids), matrix


def save(index: Index, path) -> None:
    _write_matrix_file(path, INDEX_MAGIC, index.ids, index.matrix)


def load(path) -> Index:
    """Load and verify an index: magic, version, dims, count, uniqueness,
    and per-row unit norms."""
    ids, matrix = _read_matrix_file(path, INDEX_MAGIC)
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate ids in index file: {path}")
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    bad = np.where(np.abs(norms - 1.0) > NORM_TOL)[0]
    if bad.size:
        raise ValueError(
            f"norm violation in row {bad[0]} (norm {norms[bad[0]]:.6f}): {path}"
        )
    return Index(ids=ids, matrix=matrix)


def save_embeddings(path, ids, matrix: np.ndarray) -> None:
    """Persist raw (unnormalized) embeddings in id-sorted order."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    ordered_ids = [ids[i] for i in order]
    _write_matrix_file(path, EMB_MAGIC, ordered_ids, np.asarray(matrix)[order])


def load_embeddings(path) -> tuple[tuple[str, ...], np.ndarray]:
    return _read_matrix_file(path, EMB_MAGIC)
