"""Exact brute-force cosine search over an EmbeddingStore.

Ordering is always (score descending, item id ascending), which makes
every result deterministic and independent of how the scan is chunked
across workers: candidates are scanned in id order and ties are broken
by a stable sort, so the same total order falls out for any chunking.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import as_vector
from .errors import (
    BadConfig,
    DimMismatch,
    EmptyCandidateSet,
    FilteredOut,
    UnknownId,
)
from .store import EmbeddingStore, ItemMeta

MetaFilter = Optional[Callable[[ItemMeta], bool]]

DEFAULT_CHUNK = 8192


@dataclass(frozen=True)
class RankedList:
    """Top-k retrieval result: (item id, cosine) ordered best-first."""

    entries: tuple[tuple[str, float], ...]
    k: int

    def ids(self) -> list[str]:
        return [item_id for item_id, _ in self.entries]

    def scores(self) -> list[float]:
        return [score for _, score in self.entries]


def _candidate_rows(store: EmbeddingStore, filt: MetaFilter) -> np.ndarray:
    """Row indices of filter-passing items, in ascending id order."""
    rows = store.id_sorted_rows()
    if filt is None:
        return rows
    keep = np.fromiter((filt(store.meta[store.ids[r]]) for r in rows),
                       dtype=bool, count=len(rows))
    return rows[keep]


def _chunk_top(matrix: np.ndarray, rows: np.ndarray, query: np.ndarray,
               k: int) -> tuple[np.ndarray, np.ndarray]:
    """Best k of one contiguous chunk; returns (rows, scores) best-first."""
    scores = matrix[rows].astype(np.float64) @ query
    # stable sort on -score keeps the id-ascending input order within ties
    order = np.argsort(-scores, kind="stable")[:k]
    return rows[order], scores[order]


def top_k(store: EmbeddingStore, query, k: int, filter: MetaFilter = None,
          workers: int = 1, chunk_size: int = DEFAULT_CHUNK) -> RankedList:
    """Exactly the k highest-cosine items passing `filter`.

    The query must be unit-normalized and match the store dimension.
    """
    if k < 1:
        raise BadConfig(f"k must be >= 1, got {k}")
    q = as_vector(query)
    if q.shape[0] != store.dim:
        raise DimMismatch(f"query dim {q.shape[0]} vs store dim {store.dim}")
    cand = _candidate_rows(store, filter)
    if len(cand) == 0:
        raise EmptyCandidateSet("no candidate passes the filter")

    q64 = q.astype(np.float64)
    chunks = [cand[i:i + chunk_size] for i in range(0, len(cand), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda rows: _chunk_top(store.matrix, rows, q64, k), chunks))
    else:
        parts = [_chunk_top(store.matrix, rows, q64, k) for rows in chunks]

    # chunk winners concatenate in id order, so one more stable sort
    # reproduces the global (score desc, id asc) order
    all_rows = np.concatenate([p[0] for p in parts])
    all_scores = np.concatenate([p[1] for p in parts])
    order = np.argsort(-all_scores, kind="stable")[:min(k, len(cand))]
    entries = tuple(
        (store.ids[all_rows[i]], min(1.0, max(-1.0, float(all_scores[i]))))
        for i in order)
    return RankedList(entries=entries, k=k)


def rank_of(store: EmbeddingStore, query, target_id: str,
            filter: MetaFilter = None) -> int:
    """1-based rank of `target_id` under the same order as top_k."""
    q = as_vector(query)
    if q.shape[0] != store.dim:
        raise DimMismatch(f"query dim {q.shape[0]} vs store dim {store.dim}")
    if target_id not in store:
        raise UnknownId(f"target {target_id!r} not in store")
    if filter is not None and not filter(store.meta[target_id]):
        raise FilteredOut(f"target {target_id!r} rejected by filter")
    cand = _candidate_rows(store, filter)

    q64 = q.astype(np.float64)
    scores = store.matrix[cand].astype(np.float64) @ q64
    # take the target's score out of the same product: a separately
    # computed dot can differ in the last ulp and skew the count
    pos = int(np.nonzero(cand == store.row_index(target_id))[0][0])
    target_score = float(scores[pos])
    ahead = int(np.count_nonzero(scores > target_score))
    for i in np.nonzero(scores == target_score)[0]:
        if store.ids[cand[i]] < target_id:
            ahead += 1
    return ahead + 1


def batch_top_k(store: EmbeddingStore, queries: Sequence, k: int,
                filter: MetaFilter = None, workers: int = 1) -> list[RankedList]:
    """top_k for each query; elementwise identical to sequential calls."""
    queries = list(queries)
    if not queries:
        return []
    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda q: top_k(store, q, k, filter), queries))
    return [top_k(store, q, k, filter) for q in queries]
