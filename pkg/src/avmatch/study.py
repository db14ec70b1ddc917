"""Pairwise preference study: pools, sessions, votes, significance.

A pool holds frames from two datasets ("A" and "B"), each frame carrying
the audio picked by two competing systems. A rater session shows 30
distinct frames; for each, the two audio clips appear in a randomized
left/right order. Votes are logged append-only in the *system* space
(the left/right presentation is resolved before logging), and the
aggregate applies an exact one-sided binomial test per dataset.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadArgs,
    BadConfig,
    DuplicateId,
    DuplicateVote,
    InsufficientFrames,
    IoFailure,
    PoolTooSmall,
    UnknownComparison,
)

DATASETS = ("A", "B")
SESSION_SIZE = 30
ORDERS = (12, 21)
CHOICES = ("system_1", "system_2")
SIDES = ("left", "right")


@dataclass(frozen=True)
class PoolEntry:
    """One candidate frame with the audio chosen by each system."""

    frame_id: str
    dataset: str
    sfx_system_1: str
    sfx_system_2: str

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise BadConfig(f"{self.frame_id}: dataset must be one of "
                            f"{DATASETS}, got {self.dataset!r}")
        if self.sfx_system_1 == self.sfx_system_2:
            raise BadConfig(f"{self.frame_id}: both systems picked "
                            f"{self.sfx_system_1!r}; nothing to compare")


@dataclass(frozen=True)
class ComparisonItem:
    """One blinded A/B comparison inside a session."""

    comparison_id: str
    frame_id: str
    dataset: str
    sfx_system_1: str
    sfx_system_2: str
    presentation_order: int  # 12: system_1 on the left; 21: flipped

    def side_audio(self, side: str) -> str:
        """Audio id shown on the given side."""
        if side not in SIDES:
            raise BadArgs(f"side must be left/right, got {side!r}")
        left_first = self.presentation_order == 12
        if side == "left":
            return self.sfx_system_1 if left_first else self.sfx_system_2
        return self.sfx_system_2 if left_first else self.sfx_system_1


@dataclass(frozen=True)
class StudySession:
    session_id: str
    rater_id: str
    items: tuple[ComparisonItem, ...]
    created_at: float


@dataclass(frozen=True)
class Vote:
    """A recorded preference, already resolved to system identity."""

    session_id: str
    comparison_id: str
    choice: str  # "system_1" | "system_2"
    timestamp: float


@dataclass(frozen=True)
class DatasetResult:
    dataset: str
    n: int
    k_system_1: int
    proportion: float | None
    p_value: float | None


@dataclass(frozen=True)
class StudyResult:
    datasets: tuple[DatasetResult, ...]
    n_total: int

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "datasets": [
                {"dataset": d.dataset, "n": d.n,
                 "k_system_1": d.k_system_1,
                 "proportion": d.proportion, "p_value": d.p_value}
                for d in self.datasets
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_pool(frames_a: Sequence[PoolEntry], frames_b: Sequence[PoolEntry],
               per_dataset: int = 400, seed: int = 0) -> list[PoolEntry]:
    """Seeded uniform sample without replacement from each dataset.

    The returned pool keeps each dataset's original candidate order and
    lists dataset A before dataset B.
    """
    if per_dataset < 1:
        raise BadConfig(f"per_dataset must be >= 1, got {per_dataset}")
    pool: list[PoolEntry] = []
    rng = np.random.default_rng(seed)
    for label, candidates in (("A", frames_a), ("B", frames_b)):
        if len(candidates) < per_dataset:
            raise InsufficientFrames(
                f"dataset {label}: {len(candidates)} candidate frames "
                f"< per_dataset {per_dataset}")
        for entry in candidates:
            entry.validate()
            if entry.dataset != label:
                raise BadConfig(f"entry {entry.frame_id!r} labeled "
                                f"{entry.dataset!r} passed as dataset {label}")
        picks = sorted(rng.choice(len(candidates), size=per_dataset,
                                  replace=False).tolist())
        pool.extend(candidates[i] for i in picks)
    seen: set[str] = set()
    for entry in pool:
        if entry.frame_id in seen:
            raise DuplicateId(f"frame {entry.frame_id!r} appears twice "
                              f"in the pool")
        seen.add(entry.frame_id)
    return pool


def _session_id(rater_id: str, seed: int) -> str:
    digest = hashlib.sha256(f"{rater_id}\x00{seed}".encode("utf-8")).hexdigest()
    return f"s-{digest[:12]}"


def make_session(pool: Sequence[PoolEntry], rater_id: str, seed: int,
                 size: int = SESSION_SIZE,
                 created_at: float | None = None) -> StudySession:
    """Draw `size` distinct frames and randomize each presentation order.

    Both draws come from the same seeded generator, so a (rater, seed)
    pair always yields the same session.
    """
    if size < 1:
        raise BadConfig(f"session size must be >= 1, got {size}")
    if len(pool) < size:
        raise PoolTooSmall(f"pool has {len(pool)} frames, need {size}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(pool), size=size, replace=False)
    orders = rng.integers(0, 2, size=size)
    session_id = _session_id(rater_id, seed)
    items = []
    for i, (pick, coin) in enumerate(zip(picks.tolist(), orders.tolist())):
        entry = pool[pick]
        items.append(ComparisonItem(
            comparison_id=f"{session_id}-c{i:04d}",
            frame_id=entry.frame_id,
            dataset=entry.dataset,
            sfx_system_1=entry.sfx_system_1,
            sfx_system_2=entry.sfx_system_2,
            presentation_order=ORDERS[coin],
        ))
    when = time.time() if created_at is None else created_at
    return StudySession(session_id, rater_id, tuple(items), when)


def resolve_choice(presentation_order: int, side: str) -> str:
    """Map a raw left/right pick back to the system that produced it."""
    if presentation_order not in ORDERS:
        raise BadArgs(f"presentation_order must be 12 or 21, got "
                      f"{presentation_order}")
    if side not in SIDES:
        raise BadArgs(f"side must be left/right, got {side!r}")
    if presentation_order == 12:
        return "system_1" if side == "left" else "system_2"
    return "system_2" if side == "left" else "system_1"


def binom_test_one_sided(k: int, n: int, p0: float = 0.5) -> float:
    """Exact upper-tail probability P(X >= k) for X ~ Binomial(n, p0).

    Integer-combinatoric sums up to n = 50; log-gamma with a
    log-sum-exp reduction above that to avoid overflow.
    """
    if not isinstance(k, int) or not isinstance(n, int):
        raise BadArgs(f"k and n must be integers, got {k!r}, {n!r}")
    if n < 1 or k < 0 or k > n:
        raise BadArgs(f"need 0 <= k <= n with n >= 1, got k={k} n={n}")
    if not 0.0 < p0 < 1.0:
        raise BadArgs(f"p0 must be in (0, 1), got {p0}")
    if k == 0:
        return 1.0
    if n <= 50:
        total = sum(math.comb(n, j) * p0 ** j * (1.0 - p0) ** (n - j)
                    for j in range(k, n + 1))
        return min(total, 1.0)
    log_p = math.log(p0)
    log_q = math.log1p(-p0)
    log_n_fact = math.lgamma(n + 1)
    log_terms = [
        log_n_fact - math.lgamma(j + 1) - math.lgamma(n - j + 1)
        + j * log_p + (n - j) * log_q
        for j in range(k, n + 1)
    ]
    peak = max(log_terms)
    tail = peak + math.log(sum(math.exp(t - peak) for t in log_terms))
    return min(math.exp(tail), 1.0)


def aggregate(votes: Iterable[Vote],
              sessions: Mapping[str, StudySession]) -> StudyResult:
    """Tally votes per dataset and attach exact significance levels.

    Votes are already in system space; the sessions supply each
    comparison's dataset. Datasets with no votes report n=0 with
    proportion and p_value left unset.
    """
    comparison_dataset: dict[str, str] = {}
    for session in sessions.values():
        for item in session.items:
            comparison_dataset[item.comparison_id] = item.dataset
    n: dict[str, int] = {d: 0 for d in DATASETS}
    k: dict[str, int] = {d: 0 for d in DATASETS}
    total = 0
    for vote in votes:
        if vote.comparison_id not in comparison_dataset:
            raise UnknownComparison(f"vote references unknown comparison "
                                    f"{vote.comparison_id!r}")
        if vote.choice not in CHOICES:
            raise BadArgs(f"vote choice must be one of {CHOICES}, got "
                          f"{vote.choice!r}")
        dataset = comparison_dataset[vote.comparison_id]
        n[dataset] += 1
        total += 1
        if vote.choice == "system_1":
            k[dataset] += 1
    results = []
    for dataset in DATASETS:
        if n[dataset] == 0:
            results.append(DatasetResult(dataset, 0, 0, None, None))
        else:
            results.append(DatasetResult(
                dataset, n[dataset], k[dataset],
                k[dataset] / n[dataset],
                binom_test_one_sided(k[dataset], n[dataset]),
            ))
    return StudyResult(tuple(results), total)


def _session_to_json(session: StudySession) -> dict:
    return {
        "session_id": session.session_id,
        "rater_id": session.rater_id,
        "created_at": session.created_at,
        "items": [
            {"comparison_id": it.comparison_id, "frame_id": it.frame_id,
             "dataset": it.dataset, "sfx_system_1": it.sfx_system_1,
             "sfx_system_2": it.sfx_system_2,
             "presentation_order": it.presentation_order}
            for it in session.items
        ],
    }


def _session_from_json(rec: dict) -> StudySession:
    try:
        items = tuple(
            ComparisonItem(it["comparison_id"], it["frame_id"], it["dataset"],
                           it["sfx_system_1"], it["sfx_system_2"],
                           int(it["presentation_order"]))
            for it in rec["items"]
        )
        return StudySession(rec["session_id"], rec["rater_id"], items,
                            float(rec.get("created_at", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise BadConfig(f"malformed session record: {exc}") from exc


class StudyStore:
    """Durable session registry and append-only vote log.

    Sessions live in a sidecar next to the vote log; both are JSON
    lines. Opening a store replays the files, so a restart reproduces
    the exact aggregate (event-sourced). Writes are serialized through
    a lock and flushed per record.
    """

    def __init__(self, vote_log_path: str | os.PathLike,
                 sessions_path: str | os.PathLike | None = None):
        self.vote_log_path = os.fspath(vote_log_path)
        self.sessions_path = os.fspath(sessions_path) if sessions_path \
            else f"{self.vote_log_path}.sessions.jsonl"
        self._lock = threading.Lock()
        self.sessions: dict[str, StudySession] = {}
        self.comparisons: dict[str, ComparisonItem] = {}
        self.votes: list[Vote] = []
        self._voted: set[tuple[str, str]] = set()
        self._replay()

    def _replay(self) -> None:
        for line in _read_lines(self.sessions_path):
            self._index_session(_session_from_json(json.loads(line)))
        for line in _read_lines(self.vote_log_path):
            rec = json.loads(line)
            try:
                vote = Vote(rec["session_id"], rec["comparison_id"],
                            rec["choice"], float(rec.get("timestamp", 0.0)))
            except (KeyError, TypeError, ValueError) as exc:
                raise BadConfig(f"malformed vote record: {exc}") from exc
            self._check_vote(vote)
            self._index_vote(vote)

    def _index_session(self, session: StudySession) -> None:
        if session.session_id in self.sessions:
            raise DuplicateId(f"session {session.session_id!r} already exists")
        self.sessions[session.session_id] = session
        for item in session.items:
            if item.comparison_id in self.comparisons:
                raise DuplicateId(f"comparison {item.comparison_id!r} "
                                  f"already exists")
            self.comparisons[item.comparison_id] = item

    def _check_vote(self, vote: Vote) -> None:
        if vote.choice not in CHOICES:
            raise BadArgs(f"vote choice must be one of {CHOICES}, got "
                          f"{vote.choice!r}")
        session = self.sessions.get(vote.session_id)
        item = self.comparisons.get(vote.comparison_id)
        if session is None or item is None or item not in session.items:
            raise UnknownComparison(
                f"no comparison {vote.comparison_id!r} in session "
                f"{vote.session_id!r}")
        if (vote.session_id, vote.comparison_id) in self._voted:
            raise DuplicateVote(f"comparison {vote.comparison_id!r} already "
                                f"voted in session {vote.session_id!r}")

    def _index_vote(self, vote: Vote) -> None:
        self.votes.append(vote)
        self._voted.add((vote.session_id, vote.comparison_id))

    def add_session(self, session: StudySession) -> None:
        with self._lock:
            self._index_session(session)
            _append_line(self.sessions_path,
                         json.dumps(_session_to_json(session),
                                    sort_keys=True))

    def get_session(self, session_id: str) -> StudySession | None:
        return self.sessions.get(session_id)

    def record_vote(self, vote: Vote) -> None:
        with self._lock:
            self._check_vote(vote)
            _append_line(self.vote_log_path, json.dumps(
                {"session_id": vote.session_id,
                 "comparison_id": vote.comparison_id,
                 "choice": vote.choice,
                 "timestamp": vote.timestamp}, sort_keys=True))
            self._index_vote(vote)

    def result(self) -> StudyResult:
        with self._lock:
            return aggregate(list(self.votes), self.sessions)


def _read_lines(path: str) -> list[str]:
    if not os.path.exists(path):
        return []
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [ln.strip() for ln in f if ln.strip()]
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _append_line(path: str, line: str) -> None:
    try:
        with open(path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())
    except OSError as exc:
        raise IoFailure(f"cannot append to {path}: {exc}") from exc


def load_pool_entries(path: str | os.PathLike) -> list[PoolEntry]:
    """Read candidate pool entries from a JSON-lines file."""
    entries = []
    for line in _read_lines(os.fspath(path)):
        rec = json.loads(line)
        try:
            entry = PoolEntry(rec["frame_id"], rec["dataset"],
                              rec["sfx_system_1"], rec["sfx_system_2"])
        except KeyError as exc:
            raise BadConfig(f"pool entry missing field {exc}") from exc
        entry.validate()
        entries.append(entry)
    return entries


def write_pool_entries(entries: Sequence[PoolEntry],
                       path: str | os.PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            for e in entries:
                f.write(json.dumps({"frame_id": e.frame_id,
                                    "dataset": e.dataset,
                                    "sfx_system_1": e.sfx_system_1,
                                    "sfx_system_2": e.sfx_system_2},
                                   sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write pool to {path}: {exc}") from exc


@dataclass(frozen=True)
class StudyConfig:
    """Study setup: candidate pools plus sampling parameters."""

    entries: tuple[PoolEntry, ...]
    per_dataset: int = 400
    session_size: int = SESSION_SIZE
    pool_seed: int = 0

    def build(self) -> list[PoolEntry]:
        frames_a = [e for e in self.entries if e.dataset == "A"]
        frames_b = [e for e in self.entries if e.dataset == "B"]
        return build_pool(frames_a, frames_b, self.per_dataset,
                          self.pool_seed)


def load_study_config(path: str | os.PathLike) -> StudyConfig:
    """Study config JSON: sampling parameters plus either inline
    `entries` or a `pool_path` pointing at a pool JSONL file."""
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            rec = json.load(f)
    except OSError as exc:
        raise IoFailure(f"cannot read study config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadConfig(f"{path}: invalid JSON: {exc}") from exc
    if "entries" in rec:
        entries = []
        for item in rec["entries"]:
            entry = PoolEntry(item["frame_id"], item["dataset"],
                              item["sfx_system_1"], item["sfx_system_2"])
            entry.validate()
            entries.append(entry)
    elif "pool_path" in rec:
        pool_path = rec["pool_path"]
        if not os.path.isabs(pool_path):
            pool_path = os.path.join(os.path.dirname(path), pool_path)
        entries = load_pool_entries(pool_path)
    else:
        raise BadConfig(f"{path}: needs either 'entries' or 'pool_path'")
    return StudyConfig(
        entries=tuple(entries),
        per_dataset=int(rec.get("per_dataset", 400)),
        session_size=int(rec.get("session_size", SESSION_SIZE)),
        pool_seed=int(rec.get("pool_seed", 0)),
    )
