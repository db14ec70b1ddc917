"""Retrieval evaluation: exact-match median rank / recall and
category-level recall / precision at k.

Queries are video frames, ranked against the projected audio of all
test pairs. Exact metrics score the one true paired audio item;
category metrics score any audio sharing the true item's category.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

from .curation import CuratedPair
from .errors import BadConfig, EmptyInput, EmptyTestSet, UnknownId
from .index import rank_of, top_k
from .store import EmbeddingStore


def median_rank(ranks: Sequence[int]) -> float:
    """Median of 1-based ranks; even-length lists take the lower middle,
    so the statistic is always an attained rank value."""
    if not ranks:
        raise EmptyInput("median_rank needs at least one rank")
    s = sorted(ranks)
    n = len(s)
    return float(s[n // 2] if n % 2 else s[n // 2 - 1])


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    """Fraction of queries whose true item ranked within the top k."""
    if not ranks:
        raise EmptyInput("recall_at_k needs at least one rank")
    if k < 1:
        raise BadConfig(f"k must be >= 1, got {k}")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def category_precision_at_k(topk_categories: Sequence[Sequence[str]],
                            true_category: Sequence[str], k: int) -> float:
    """Mean fraction of the top-k slots holding the right category.

    Lists shorter than k count their missing slots as misses.
    """
    if not topk_categories:
        raise EmptyInput("category_precision_at_k needs at least one query")
    if len(topk_categories) != len(true_category):
        raise BadConfig("per-query lists and true categories disagree in length")
    total = 0.0
    for cats, truth in zip(topk_categories, true_category):
        if len(cats) > k:
            raise BadConfig(f"top-k list longer than k={k}")
        total += sum(1 for c in cats if c == truth) / k
    return total / len(topk_categories)


def category_recall_at_k(topk_categories: Sequence[Sequence[str]],
                         true_category: Sequence[str], k: int) -> float:
    """Fraction of queries with at least one right-category hit in top k."""
    if not topk_categories:
        raise EmptyInput("category_recall_at_k needs at least one query")
    if len(topk_categories) != len(true_category):
        raise BadConfig("per-query lists and true categories disagree in length")
    hits = 0
    for cats, truth in zip(topk_categories, true_category):
        if len(cats) > k:
            raise BadConfig(f"top-k list longer than k={k}")
        if truth in cats:
            hits += 1
    return hits / len(topk_categories)


@dataclass(frozen=True)
class EvalReport:
    """One model's retrieval metrics on one test set."""

    dataset_name: str
    n_queries: int
    exact_mr: float
    exact_r_at_k: float
    category_r_at_k: float
    category_p_at_k: float
    k: int = 10

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate(projected_audio: EmbeddingStore, test_pairs: Sequence[CuratedPair],
             frame_store: EmbeddingStore, categories: Mapping[str, str],
             k: int = 10, dataset_name: str = "test") -> EvalReport:
    """Score retrieval over all test pairs.

    Each pair contributes one query (its frame embedding) with one true
    target (its audio). The candidate set is the projected audio of all
    test pairs; ties and ordering follow the search index exactly.
    """
    if not test_pairs:
        raise EmptyTestSet("no test pairs to evaluate")
    audio_ids = []
    seen = set()
    for p in test_pairs:
        if p.frame_id not in frame_store:
            raise UnknownId(f"pair frame {p.frame_id!r} not in frame store")
        if p.audio_id not in projected_audio:
            raise UnknownId(f"pair audio {p.audio_id!r} not in audio store")
        if p.audio_id not in categories:
            raise UnknownId(f"no category for audio {p.audio_id!r}")
        if p.audio_id not in seen:
            seen.add(p.audio_id)
            audio_ids.append(p.audio_id)

    candidates = projected_audio.subset(audio_ids)
    ranks: list[int] = []
    topk_cats: list[list[str]] = []
    true_cats: list[str] = []
    for p in test_pairs:
        query = frame_store.vector(p.frame_id)
        ranks.append(rank_of(candidates, query, p.audio_id))
        ranked = top_k(candidates, query, k)
        topk_cats.append([categories[a] for a in ranked.ids()])
        true_cats.append(categories[p.audio_id])

    return EvalReport(
        dataset_name=dataset_name,
        n_queries=len(test_pairs),
        exact_mr=median_rank(ranks),
        exact_r_at_k=recall_at_k(ranks, k),
        category_r_at_k=category_recall_at_k(topk_cats, true_cats, k),
        category_p_at_k=category_precision_at_k(topk_cats, true_cats, k),
        k=k,
    )


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table: exact MR / R@k then category R@k / P@k."""
    if not reports:
        raise EmptyInput("no reports to render")
    k = reports[0].k
    header = ["Dataset", "Queries", "Exact MR", f"Exact R@{k}",
              f"Category R@{k}", f"Category P@{k}"]
    rows = [[r.dataset_name, str(r.n_queries), f"{r.exact_mr:.0f}",
             f"{r.exact_r_at_k:.3f}", f"{r.category_r_at_k:.3f}",
             f"{r.category_p_at_k:.3f}"] for r in reports]
    widths = [max(len(header[i]), *(len(row[i]) for row in rows))
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)
