"""Automatic audio-visual curation: filtering, frame sampling, tag-to-
sentence prompting, text-to-frame matching, capacity-constrained pairing,
and disjoint split construction.

The pairing step is the heart of the pipeline: each audio item is matched
to its best-scoring frames, but a frame may serve at most `limit_per_frame`
audio items before it leaves the pool. Unconstrained pairing tends to
concentrate many audio items on a few "hub" frames; a tight limit trades
per-pair match quality for dataset diversity.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import requests

from .errors import (
    BadConfig,
    BackendUnavailable,
    DimMismatch,
    EmptyCompletion,
    EmptyExemplars,
    InsufficientItems,
    NoFramesAvailable,
    NoTags,
)
from .store import AudioItem, EmbeddingStore, FrameItem

INFINITY = math.inf

_TOKEN_RE = re.compile(r"[^a-z0-9]+")


# --- filtering ----------------------------------------------------------

@dataclass(frozen=True)
class FilterSpec:
    """Exclusion lists for categories and tag terms (case-insensitive)."""

    excluded_categories: frozenset[str] = frozenset()
    excluded_tag_terms: frozenset[str] = frozenset()

    def normalized(self) -> tuple[set[str], set[str]]:
        return ({c.lower() for c in self.excluded_categories},
                {t.lower() for t in self.excluded_tag_terms})


def _tag_tokens(tag: str) -> set[str]:
    return {t for t in _TOKEN_RE.split(tag.lower()) if t}


def filter_items(items: Sequence, spec: FilterSpec) -> list:
    """Drop items whose category is excluded or whose tags hit a term.

    Tag matching is whole-token: a term matches when it equals one of
    the tag's word tokens (or the whole tag), never by substring.
    Items lacking tags or category (e.g. frames) pass untouched.
    Order is preserved.
    """
    bad_cats, bad_terms = spec.normalized()
    kept = []
    for item in items:
        category = getattr(item, "category", "") or ""
        if category.lower() in bad_cats:
            continue
        tags = getattr(item, "tags", ()) or ()
        hit = False
        for tag in tags:
            tokens = _tag_tokens(tag)
            if tokens & bad_terms or tag.strip().lower() in bad_terms:
                hit = True
                break
        if not hit:
            kept.append(item)
    return kept


# --- frame sampling -----------------------------------------------------

def sample_frames(video_id: str, duration_s: float, max_frames: int = 10,
                  seed: int = 0) -> list[int]:
    """Seconds offsets of up-to-`max_frames` frames sampled at 1 FPS.

    Candidates are {0..floor(duration)-1}; when more than `max_frames`
    exist, a seeded uniform subset is drawn without replacement. The
    draw depends only on (video_id, seed), so reruns agree. Returned
    sorted ascending; sub-second videos yield [].
    """
    if max_frames < 1:
        raise BadConfig(f"max_frames must be >= 1, got {max_frames}")
    if duration_s < 0:
        raise BadConfig(f"negative duration {duration_s}")
    count = int(math.floor(duration_s))
    if count <= 0:
        return []
    if count <= max_frames:
        return list(range(count))
    digest = hashlib.sha256(f"{video_id}\x00{seed}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    picks = rng.choice(count, size=max_frames, replace=False)
    return sorted(int(p) for p in picks)


# --- tag-to-sentence prompting -----------------------------------------

@dataclass(frozen=True)
class PromptSpec:
    """Few-shot analogy prompt: exemplar (tags -> sentence) pairs plus
    the query tags to complete."""

    exemplars: tuple[tuple[tuple[str, ...], str], ...]
    query_tags: tuple[str, ...]
    instruction: str = ("Rewrite each list of sound-effect tags as one short "
                        "natural-language description of the scene.")


def build_prompt(spec: PromptSpec) -> str:
    """Deterministic prompt string; format is frozen for golden tests.

    Layout: the instruction line, one "Tags: a, b => Description: s"
    line per exemplar in order, then "Tags: <query> => Description:"
    with nothing after the colon. Lines joined with a single newline.
    """
    if not spec.exemplars:
        raise EmptyExemplars("prompt needs at least one exemplar")
    lines = [spec.instruction]
    for tags, sentence in spec.exemplars:
        if not sentence:
            raise BadConfig("exemplar sentence must be non-empty")
        lines.append(f"Tags: {', '.join(tags)} => Description: {sentence}")
    lines.append(f"Tags: {', '.join(spec.query_tags)} => Description:")
    return "\n".join(lines)


def template_sentence(tags: Sequence[str], max_tags: int = 4) -> str:
    """Offline fallback: "a photo of <tag1> <tag2> ...", lowercased.

    Uses the first `max_tags` non-empty tags; also serves as the
    tags-only control arm when no language backend is configured.
    """
    words = [t.strip().lower() for t in tags if t.strip()]
    if not words:
        raise NoTags("template needs at least one tag")
    return "a photo of " + " ".join(words[:max_tags])


class TextBackend:
    """HTTP client for a text-generation endpoint.

    POSTs JSON {prompt, max_tokens, temperature} and expects {text}.
    """

    def __init__(self, url: str, timeout_s: float = 10.0, retries: int = 2,
                 max_tokens: int = 64, temperature: float = 0.7):
        self.url = url
        self.timeout_s = timeout_s
        self.retries = retries
        self.max_tokens = max_tokens
        self.temperature = temperature

    def complete(self, prompt: str) -> str:
        payload = {"prompt": prompt, "max_tokens": self.max_tokens,
                   "temperature": self.temperature}
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(self.url, json=payload,
                                     timeout=self.timeout_s)
                resp.raise_for_status()
                return str(resp.json().get("text", ""))
            except requests.RequestException as exc:
                last_error = exc
        raise BackendUnavailable(f"backend {self.url} unreachable: {last_error}")


def generate_sentence(spec: PromptSpec, backend, fallback: bool = False) -> str:
    """First non-empty line of the backend completion, stripped.

    With `fallback` enabled a backend failure degrades to
    template_sentence over the query tags instead of raising.
    """
    try:
        completion = backend.complete(build_prompt(spec))
        for line in completion.splitlines():
            line = line.strip()
            if line:
                return line
        raise EmptyCompletion("backend returned no usable text")
    except (BackendUnavailable, EmptyCompletion):
        if fallback:
            return template_sentence(spec.query_tags)
        raise


# --- capacity-constrained pairing ---------------------------------------

SEQUENTIAL_GREEDY = "sequential_greedy"
GLOBAL_GREEDY = "global_greedy"


@dataclass(frozen=True)
class PairingConfig:
    """limit_per_frame is the per-frame capacity (math.inf = unconstrained);
    frames_per_audio is the augmentation factor (top-k frames per audio)."""

    limit_per_frame: float = INFINITY
    frames_per_audio: int = 1
    mode: str = SEQUENTIAL_GREEDY

    def __post_init__(self):
        n, k = self.limit_per_frame, self.frames_per_audio
        if not (n == INFINITY or (float(n).is_integer() and n >= 1)):
            raise BadConfig(f"limit_per_frame must be >= 1 or inf, got {n}")
        if k < 1:
            raise BadConfig(f"frames_per_audio must be >= 1, got {k}")
        if self.mode not in (SEQUENTIAL_GREEDY, GLOBAL_GREEDY):
            raise BadConfig(f"unknown pairing mode {self.mode!r}")


def parse_limit(text: str) -> float:
    """Parse a pairing limit: integer string or "inf"/"infinity"."""
    t = text.strip().lower()
    if t in ("inf", "infinity", "unlimited"):
        return INFINITY
    try:
        value = int(t)
    except ValueError:
        raise BadConfig(f"bad pairing limit {text!r}") from None
    if value < 1:
        raise BadConfig(f"pairing limit must be >= 1, got {value}")
    return float(value)


@dataclass(frozen=True)
class CuratedPair:
    """One (audio, frame) training pair with its match cosine."""

    audio_id: str
    frame_id: str
    score: float
    rank_within_audio: int


def _clamp(x: float) -> float:
    return min(1.0, max(-1.0, x))


def pair(audio_text_embs: EmbeddingStore, frame_embs: EmbeddingStore,
         cfg: PairingConfig) -> list[CuratedPair]:
    """Match every audio item to up to `frames_per_audio` frames.

    sequential_greedy (canonical): audio ids are visited in ascending
    lexicographic order; each takes its best-scoring still-available
    frames. A frame that reaches `limit_per_frame` uses leaves the pool.

    global_greedy: all (audio, frame) edges sorted by (score desc,
    audio_id asc, frame_id asc); an edge is accepted when the audio is
    below its quota and the frame below its capacity.

    Raises NoFramesAvailable when some audio item ends up with no frame,
    which can only happen once every frame is at capacity.
    """
    if audio_text_embs.dim != frame_embs.dim:
        raise DimMismatch(f"text dim {audio_text_embs.dim} vs "
                          f"frame dim {frame_embs.dim}")
    if len(audio_text_embs) == 0 or len(frame_embs) == 0:
        raise BadConfig("pairing needs non-empty stores")

    audio_ids = sorted(audio_text_embs.ids)
    frame_rows = frame_embs.id_sorted_rows()
    frame_ids = [frame_embs.ids[r] for r in frame_rows]
    frame_mat = frame_embs.matrix[frame_rows].astype(np.float64)

    if cfg.mode == SEQUENTIAL_GREEDY:
        return _pair_sequential(audio_text_embs, audio_ids, frame_ids,
                                frame_mat, cfg)
    return _pair_global(audio_text_embs, audio_ids, frame_ids, frame_mat, cfg)


def _pair_sequential(text_store: EmbeddingStore, audio_ids: list[str],
                     frame_ids: list[str], frame_mat: np.ndarray,
                     cfg: PairingConfig) -> list[CuratedPair]:
    remaining = np.full(len(frame_ids), cfg.limit_per_frame)
    pool_size = len(frame_ids)
    pairs: list[CuratedPair] = []
    for audio_id in audio_ids:
        if pool_size == 0:
            raise NoFramesAvailable(
                f"frame pool exhausted before {audio_id!r} got a frame")
        scores = frame_mat @ text_store.vector(audio_id).astype(np.float64)
        order = np.argsort(-scores, kind="stable")
        taken = 0
        for j in order:
            if remaining[j] <= 0:
                continue
            taken += 1
            pairs.append(CuratedPair(audio_id, frame_ids[j],
                                     _clamp(float(scores[j])), taken))
            remaining[j] -= 1
            if remaining[j] <= 0:
                pool_size -= 1
            if taken == cfg.frames_per_audio or pool_size == 0:
                break
        if taken == 0:
            raise NoFramesAvailable(
                f"frame pool exhausted before {audio_id!r} got a frame")
    return pairs


def _pair_global(text_store: EmbeddingStore, audio_ids: list[str],
                 frame_ids: list[str], frame_mat: np.ndarray,
                 cfg: PairingConfig) -> list[CuratedPair]:
    text_mat = np.vstack([text_store.vector(a) for a in audio_ids]) \
        .astype(np.float64)
    scores = text_mat @ frame_mat.T
    n_a, n_f = scores.shape
    flat = scores.ravel()
    a_pos, f_pos = np.divmod(np.arange(flat.size), n_f)
    # sort by score desc, then audio position, then frame position
    # (positions are already in ascending id order)
    order = np.lexsort((f_pos, a_pos, -flat))

    audio_count = np.zeros(n_a, dtype=np.int64)
    frame_used = np.zeros(n_f, dtype=np.float64)
    chosen: list[tuple[int, int, float]] = []
    accepted = 0
    target = n_a * cfg.frames_per_audio
    for e in order:
        a, f = int(a_pos[e]), int(f_pos[e])
        if audio_count[a] >= cfg.frames_per_audio or frame_used[f] >= cfg.limit_per_frame:
            continue
        audio_count[a] += 1
        frame_used[f] += 1
        chosen.append((a, f, float(flat[e])))
        accepted += 1
        if accepted == target:
            break
    if np.any(audio_count == 0):
        missing = audio_ids[int(np.argmax(audio_count == 0))]
        raise NoFramesAvailable(
            f"frame pool exhausted before {missing!r} got a frame")

    # rank within audio = order by descending score, which is the
    # acceptance order because edges were scanned best-first
    rank = np.zeros(n_a, dtype=np.int64)
    pairs: list[CuratedPair] = []
    for a, f, s in chosen:
        rank[a] += 1
        pairs.append(CuratedPair(audio_ids[a], frame_ids[f], _clamp(s),
                                 int(rank[a])))
    pairs.sort(key=lambda p: (p.audio_id, p.rank_within_audio))
    return pairs


def pair_within_splits(audio_text_embs: EmbeddingStore,
                       frame_embs: EmbeddingStore, assignment,
                       cfg: PairingConfig) -> dict[str, list[CuratedPair]]:
    """Run pairing separately inside each split.

    Audio items only compete for frames of their own split, so no pair
    ever crosses a split boundary and train/val/test stay fully
    disjoint.
    """
    out: dict[str, list[CuratedPair]] = {}
    for split in ("train", "val", "test"):
        audio_ids = [i for i in audio_text_embs.ids
                     if assignment.audio_split.get(i) == split]
        frame_ids = [i for i in frame_embs.ids
                     if assignment.frame_split.get(i) == split]
        if not audio_ids:
            out[split] = []
            continue
        if not frame_ids:
            raise NoFramesAvailable(f"split {split!r} has "
                                    f"{len(audio_ids)} audio items but no "
                                    f"frames")
        out[split] = pair(audio_text_embs.subset(audio_ids),
                          frame_embs.subset(frame_ids), cfg)
    return out


def write_split_pairs(path: str | os.PathLike,
                      by_split: dict[str, list[CuratedPair]]) -> None:
    """One JSONL file holding all three splits' pairs, labeled."""
    with open(path, "w", encoding="utf-8") as f:
        for split in ("train", "val", "test"):
            for p in by_split.get(split, []):
                f.write(json.dumps({"audio_id": p.audio_id,
                                    "frame_id": p.frame_id, "score": p.score,
                                    "rank_within_audio": p.rank_within_audio,
                                    "split": split}))
                f.write("\n")


def write_pairs(path: str | os.PathLike, pairs: Iterable[CuratedPair],
                split: str = "train") -> None:
    """Append-free JSONL dump: one pair per line with its split tag."""
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({"audio_id": p.audio_id, "frame_id": p.frame_id,
                                "score": p.score,
                                "rank_within_audio": p.rank_within_audio,
                                "split": split}))
            f.write("\n")


def read_pairs(path: str | os.PathLike,
               split: str | None = None) -> list[CuratedPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if split is not None and rec.get("split") != split:
                continue
            pairs.append(CuratedPair(rec["audio_id"], rec["frame_id"],
                                     float(rec["score"]),
                                     int(rec["rank_within_audio"])))
    return pairs


# --- split construction -------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test partition of audio ids and video ids."""

    audio_split: dict[str, str]
    video_split: dict[str, str]
    frame_split: dict[str, str] = field(default_factory=dict)

    def audio_ids(self, split: str) -> list[str]:
        return [a for a, s in self.audio_split.items() if s == split]

    def frame_ids(self, split: str) -> list[str]:
        return [f for f, s in self.frame_split.items() if s == split]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"audio": self.audio_split, "video": self.video_split,
                       "frame": self.frame_split}, f, indent=0, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitAssignment":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls(audio_split=data["audio"], video_split=data["video"],
                   frame_split=data.get("frame", {}))


def make_splits(audio: Sequence[AudioItem], frames: Sequence[FrameItem],
                val_count: int, test_count: int, seed: int) -> SplitAssignment:
    """Seeded disjoint partition; frames follow their whole video.

    Audio items are split by count; videos are split so that each
    split's frame share approximates its audio share. No audio id and
    no video id ever lands in two splits.
    """
    if val_count < 0 or test_count < 0:
        raise BadConfig("split counts must be non-negative")
    if val_count + test_count >= len(audio):
        raise InsufficientItems(
            f"need val+test < audio count ({val_count}+{test_count} vs "
            f"{len(audio)})")

    rng = np.random.default_rng(seed)
    audio_ids = sorted(a.id for a in audio)
    if len(set(audio_ids)) != len(audio_ids):
        raise BadConfig("duplicate audio ids in split input")
    perm = rng.permutation(len(audio_ids))
    audio_split: dict[str, str] = {}
    for i, p in enumerate(perm):
        if i < val_count:
            split = "val"
        elif i < val_count + test_count:
            split = "test"
        else:
            split = "train"
        audio_split[audio_ids[p]] = split

    by_video: dict[str, list[str]] = {}
    for fr in frames:
        by_video.setdefault(fr.video_id, []).append(fr.id)
    video_ids = sorted(by_video)
    n_frames = len(frames)
    n_audio = len(audio)
    targets = {"val": val_count / n_audio * n_frames,
               "test": test_count / n_audio * n_frames}
    wanted = [s for s in ("val", "test") if (val_count if s == "val"
                                             else test_count) > 0]
    if frames and len(video_ids) < len(wanted) + 1:
        raise InsufficientItems(
            f"{len(video_ids)} videos cannot cover {len(wanted) + 1} splits")

    video_split: dict[str, str] = {}
    vperm = rng.permutation(len(video_ids))
    counts = {"val": 0, "test": 0}
    cursor = 0
    for si, split in enumerate(wanted):
        # leave one video per still-unserved split, plus one for train
        reserve = (len(wanted) - si - 1) + 1
        while cursor < len(video_ids) - reserve and (
                counts[split] < targets[split] or counts[split] == 0):
            vid = video_ids[vperm[cursor]]
            video_split[vid] = split
            counts[split] += len(by_video[vid])
            cursor += 1
    for i in range(cursor, len(video_ids)):
        video_split[video_ids[vperm[i]]] = "train"

    frame_split = {fid: video_split[vid]
                   for vid, fids in by_video.items() for fid in fids}
    return SplitAssignment(audio_split=audio_split, video_split=video_split,
                           frame_split=frame_split)
