"""Domain types and on-disk formats shared by every other module.

Embeddings and sparse score matrices have a small binary format (little
endian, 64-bit floats) plus CSV import/export for interoperability.
Ranking everywhere in the package uses one total order: score descending,
then item id ascending.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "AxnError",
    "FormatError",
    "InvalidMatrixError",
    "DimensionMismatchError",
    "EmbeddingMatrix",
    "SparseScoreMatrix",
    "TopKList",
    "topk_indices",
    "topk_merge",
    "save_embeddings",
    "load_embeddings",
    "save_sparse",
    "load_sparse",
    "embeddings_to_csv",
    "embeddings_from_csv",
    "sparse_to_csv",
    "sparse_from_csv",
]

EMB_MAGIC = b"AXNE"
G_MAGIC = b"AXNG"
FORMAT_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIBQQ")
_G_HEADER = struct.Struct("<4sIQQQ")
_G_ENTRY = np.dtype([("q", "<u8"), ("i", "<u8"), ("s", "<f8")])
ROLES = ("query", "item")


class AxnError(Exception):
    """Base class for errors raised by this package."""


class FormatError(AxnError):
    pass


class InvalidMatrixError(AxnError, ValueError):
    pass


class DimensionMismatchError(AxnError, ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Dense ``rows x dim`` float64 matrix of query or item vectors.

    Row ``j`` is the vector of the entity with id ``j``. The array is
    copied and frozen on construction.
    """

    data: np.ndarray
    role: str = "item"

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidMatrixError(f"role must be one of {ROLES}, got {self.role!r}")
        a = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if a.ndim != 2:
            raise InvalidMatrixError(f"expected a 2-D array, got shape {a.shape}")
        if a.shape[1] == 0:
            raise InvalidMatrixError("embedding dimension must be positive")
        if a.shape[0] == 0:
            raise InvalidMatrixError("empty embedding matrix")
        if not np.all(np.isfinite(a)):
            raise InvalidMatrixError("embedding matrix contains non-finite values")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.rows

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.role == other.role and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"EmbeddingMatrix(role={self.role!r}, rows={self.rows}, dim={self.dim})"


@dataclass(frozen=True, eq=False)
class SparseScoreMatrix:
    """Observed ``(query, item, score)`` triples over a query x item grid.

    Entries are stored sorted by ``(query_id, item_id)``; duplicate
    coordinates are rejected.
    """

    n_queries: int
    n_items: int
    query_ids: np.ndarray
    item_ids: np.ndarray
    scores: np.ndarray
    _lookup: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.n_queries < 0 or self.n_items < 0:
            raise InvalidMatrixError("matrix shape must be non-negative")
        q = np.asarray(self.query_ids, dtype=np.int64).ravel()
        i = np.asarray(self.item_ids, dtype=np.int64).ravel()
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        if not (len(q) == len(i) == len(s)):
            raise InvalidMatrixError("query_ids, item_ids and scores differ in length")
        if len(q):
            if q.min() < 0 or q.max() >= self.n_queries:
                raise InvalidMatrixError("query id out of range")
            if i.min() < 0 or i.max() >= self.n_items:
                raise InvalidMatrixError("item id out of range")
        if not np.all(np.isfinite(s)):
            raise InvalidMatrixError("score matrix contains non-finite values")
        order = np.lexsort((i, q))
        q, i, s = q[order], i[order], s[order]
        if len(q) > 1:
            dup = (np.diff(q) == 0) & (np.diff(i) == 0)
            if dup.any():
                j = int(np.flatnonzero(dup)[0])
                raise InvalidMatrixError(f"duplicate coordinate ({q[j]}, {i[j]})")
        object.__setattr__(self, "query_ids", _readonly(q.copy()))
        object.__setattr__(self, "item_ids", _readonly(i.copy()))
        object.__setattr__(self, "scores", _readonly(s.copy()))

    @classmethod
    def from_entries(cls, n_queries: int, n_items: int, entries: Iterable[tuple]):
        entries = list(entries)
        if not entries:
            return cls(n_queries, n_items, np.empty(0), np.empty(0), np.empty(0))
        q, i, s = zip(*entries)
        return cls(n_queries, n_items, np.array(q), np.array(i), np.array(s))

    @property
    def nnz(self) -> int:
        return len(self.scores)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_queries, self.n_items)

    def entries(self) -> list[tuple[int, int, float]]:
        return [
            (int(q), int(i), float(s))
            for q, i, s in zip(self.query_ids, self.item_ids, self.scores)
        ]

    def get(self, query_id: int, item_id: int) -> float:
        if self._lookup is None:
            lookup = {
                (int(q), int(i)): k for k, (q, i) in enumerate(zip(self.query_ids, self.item_ids))
            }
            object.__setattr__(self, "_lookup", lookup)
        return float(self.scores[self._lookup[(int(query_id), int(item_id))]])

    def with_scores(self, scores: np.ndarray) -> "SparseScoreMatrix":
        """Same coordinates, new values (aligned with the stored order)."""
        return SparseScoreMatrix(self.n_queries, self.n_items, self.query_ids, self.item_ids, scores)

    def to_dense(self, fill: float = np.nan) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=np.float64)
        out[self.query_ids, self.item_ids] = self.scores
        return out

    def __eq__(self, other):
        if not isinstance(other, SparseScoreMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.query_ids, other.query_ids)
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.scores, other.scores)
        )

    def __repr__(self):
        return f"SparseScoreMatrix(shape={self.shape}, nnz={self.nnz})"


def topk_indices(scores: np.ndarray, k: int, ids: np.ndarray | None = None) -> np.ndarray:
    """Positions of the ``k`` best entries of ``scores`` in ranking order.

    Ties are broken by ascending id (``ids`` defaults to the positions
    themselves). Runs in O(n + k log k) by partitioning first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if ids is None:
        ids = np.arange(n)
    k = max(0, min(int(k), n))
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        thr = np.partition(scores, n - k)[n - k]
        above = np.flatnonzero(scores > thr)
        tied = np.flatnonzero(scores == thr)
        need = k - len(above)
        tied = tied[np.argsort(ids[tied], kind="stable")[:need]]
        cand = np.concatenate([above, tied])
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order].astype(np.int64)


@dataclass(frozen=True)
class TopKList:
    """At most ``k`` ``(item_id, score)`` pairs in ranking order."""

    k: int
    items: tuple = ()

    def __post_init__(self):
        items = tuple((int(i), float(s)) for i, s in self.items)
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if len(items) > self.k:
            raise ValueError(f"{len(items)} items exceed k={self.k}")
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item ids in TopKList")
        for (i1, s1), (i2, s2) in zip(items, items[1:]):
            if not (s1 > s2 or (s1 == s2 and i1 < i2)):
                raise ValueError("TopKList items are not in (score desc, id asc) order")
        object.__setattr__(self, "items", items)

    @classmethod
    def from_scores(cls, item_ids: Sequence[int], scores: Sequence[float], k: int) -> "TopKList":
        ids = np.asarray(item_ids, dtype=np.int64)
        sc = np.asarray(scores, dtype=np.float64)
        pos = topk_indices(sc, k, ids)
        return cls(k, tuple(zip(ids[pos].tolist(), sc[pos].tolist())))

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.items]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.items]

    def truncate(self, k: int) -> "TopKList":
        return TopKList(k, self.items[:k])

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def topk_merge(a: TopKList, b: TopKList, k: int) -> TopKList:
    """Top-``k`` of the union of two lists; a repeated id keeps its higher score."""
    best: dict[int, float] = {}
    for i, s in (*a.items, *b.items):
        if i not in best or s > best[i]:
            best[i] = s
    if not best:
        return TopKList(k)
    return TopKList.from_scores(list(best), list(best.values()), k)


# -- binary formats ----------------------------------------------------------


def save_embeddings(m: EmbeddingMatrix, path) -> None:
    if not isinstance(m, EmbeddingMatrix):
        m = EmbeddingMatrix(m)
    header = _EMB_HEADER.pack(EMB_MAGIC, FORMAT_VERSION, ROLES.index(m.role), m.rows, m.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(m.data.astype("<f8", copy=False).tobytes(order="C"))


def load_embeddings(path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, role, rows, dim = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if role >= len(ROLES):
        raise FormatError(f"{path}: bad role byte {role}")
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive")
    expected = _EMB_HEADER.size + rows * dim * 8
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_EMB_HEADER.size).reshape(rows, dim)
    return EmbeddingMatrix(data.astype(np.float64), role=ROLES[role])


def save_sparse(g: SparseScoreMatrix, path) -> None:
    rec = np.empty(g.nnz, dtype=_G_ENTRY)
    rec["q"], rec["i"], rec["s"] = g.query_ids, g.item_ids, g.scores
    with open(path, "wb") as fh:
        fh.write(_G_HEADER.pack(G_MAGIC, FORMAT_VERSION, g.n_queries, g.n_items, g.nnz))
        fh.write(rec.tobytes())


def load_sparse(path) -> SparseScoreMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _G_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, nq, ni, nnz = _G_HEADER.unpack_from(raw)
    if magic != G_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    expected = _G_HEADER.size + nnz * _G_ENTRY.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype=_G_ENTRY, offset=_G_HEADER.size)
    return SparseScoreMatrix(nq, ni, rec["q"].astype(np.int64), rec["i"].astype(np.int64), rec["s"])


# -- CSV ---------------------------------------------------------------------


def embeddings_to_csv(m: EmbeddingMatrix, path) -> None:
    np.savetxt(path, m.data, delimiter=",", fmt="%.17g")


def embeddings_from_csv(path, role: str = "item") -> EmbeddingMatrix:
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return EmbeddingMatrix(data, role=role)


def sparse_to_csv(g: SparseScoreMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "item_id", "score"])
        for q, i, s in g.entries():
            w.writerow([q, i, repr(s)])


def sparse_from_csv(path, n_queries: int | None = None, n_items: int | None = None) -> SparseScoreMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        q = np.array([int(r["query_id"]) for r in rows], dtype=np.int64)
        i = np.array([int(r["item_id"]) for r in rows], dtype=np.int64)
        s = np.array([float(r["score"]) for r in rows], dtype=np.float64)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    nq = n_queries if n_queries is not None else int(q.max(initial=-1)) + 1
    ni = n_items if n_items is not None else int(i.max(initial=-1)) + 1
    return SparseScoreMatrix(nq, ni, q, i, s)
