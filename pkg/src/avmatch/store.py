"""Embedding store: item metadata, on-disk format, synthetic fixtures.

A store is an immutable collection of unit-normalized float32 vectors
keyed by item id, with one metadata record per item. The on-disk layout
is a little-endian binary vector file plus a JSON-lines metadata sidecar
at ``<path>.meta.jsonl``.

Vector file layout::

    magic   "AVCE"          4 bytes
    version u16             currently 1
    flags   u16             bit0 = vectors already unit-normalized
    dim     u32
    count   u64
    then per record:
        id_len  u16
        id      id_len ASCII bytes
        vector  dim * f32

Sidecar: one JSON object per line with fields
``{id, kind, tags, category, split, video_id, frame_index, duration_s}``.
Unknown fields are ignored; required fields depend on ``kind``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .core import as_vector, l2_normalize, normalize_rows
from .errors import (
    BadConfig,
    BadMagic,
    DimMismatch,
    DuplicateId,
    IoFailure,
    TruncatedFile,
    VersionUnsupported,
    ZeroVector,
)

MAGIC = b"AVCE"
FORMAT_VERSION = 1
FLAG_NORMALIZED = 0x0001
MAX_ID_BYTES = 256

SPLITS = ("train", "val", "test")
KINDS = ("audio", "frame", "text")

_HEADER = struct.Struct("<4sHHIQ")
_ID_LEN = struct.Struct("<H")


@dataclass(frozen=True)
class ItemMeta:
    """Metadata record attached to one stored vector."""

    kind: str
    tags: tuple[str, ...] = ()
    category: str = ""
    split: str = "train"
    video_id: str | None = None
    frame_index: int | None = None
    duration_s: float | None = None

    def validate(self, item_id: str) -> None:
        if self.kind not in KINDS:
            raise BadConfig(f"{item_id}: unknown kind {self.kind!r}")
        if self.split not in SPLITS:
            raise BadConfig(f"{item_id}: unknown split {self.split!r}")
        if self.kind == "audio":
            if not self.category:
                raise BadConfig(f"{item_id}: audio item needs a category")
            if self.duration_s is not None and self.duration_s < 0:
                raise BadConfig(f"{item_id}: negative duration")
        elif self.kind == "frame":
            if not self.video_id:
                raise BadConfig(f"{item_id}: frame item needs a video_id")
            if self.frame_index is None or self.frame_index < 0:
                raise BadConfig(f"{item_id}: frame item needs frame_index >= 0")


@dataclass(frozen=True)
class AudioItem:
    """One SFX: id, tag metadata, category label, and its feature vector."""

    id: str
    tags: tuple[str, ...]
    category: str
    split: str
    feature: np.ndarray
    duration_s: float | None = None

    def meta(self) -> ItemMeta:
        return ItemMeta(
            kind="audio",
            tags=tuple(self.tags),
            category=self.category,
            split=self.split,
            duration_s=self.duration_s,
        )


@dataclass(frozen=True)
class FrameItem:
    """One sampled video frame and its image embedding."""

    id: str
    video_id: str
    frame_index: int
    split: str
    embedding: np.ndarray

    def meta(self) -> ItemMeta:
        return ItemMeta(
            kind="frame",
            split=self.split,
            video_id=self.video_id,
            frame_index=self.frame_index,
        )


def _check_id(item_id: str) -> str:
    try:
        raw = item_id.encode("ascii")
    except UnicodeEncodeError:
        raise BadConfig(f"item id must be ASCII: {item_id!r}") from None
    if not raw or len(raw) > MAX_ID_BYTES:
        raise BadConfig(f"item id must be 1..{MAX_ID_BYTES} bytes: {item_id!r}")
    return item_id


class EmbeddingStore:
    """Immutable id-keyed collection of unit vectors with metadata.

    Safe for concurrent reads; construct through :meth:`build` (which
    normalizes raw vectors) or :func:`load_store`.
    """

    def __init__(self, dim: int, ids: tuple[str, ...], matrix: np.ndarray,
                 meta: dict[str, ItemMeta]):
        self.dim = dim
        self.ids = ids
        self.matrix = matrix
        self.meta = meta
        self._row = {item_id: i for i, item_id in enumerate(ids)}
        self._id_order: np.ndarray | None = None
        self.matrix.setflags(write=False)

    def id_sorted_rows(self) -> np.ndarray:
        """Row indices in ascending item-id order (computed once)."""
        if self._id_order is None:
            order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
            self._id_order = np.asarray(order, dtype=np.int64)
        return self._id_order

    @classmethod
    def build(cls, dim: int, entries: Iterable[tuple[str, np.ndarray, ItemMeta]],
              normalize: bool = True) -> "EmbeddingStore":
        """Assemble and validate a store from (id, vector, meta) triples."""
        if dim < 1:
            raise BadConfig(f"dim must be positive, got {dim}")
        ids: list[str] = []
        rows: list[np.ndarray] = []
        meta: dict[str, ItemMeta] = {}
        for item_id, vec, m in entries:
            _check_id(item_id)
            if item_id in meta:
                raise DuplicateId(f"duplicate item id {item_id!r}")
            m.validate(item_id)
            v = as_vector(vec, dim)
            ids.append(item_id)
            rows.append(v)
            meta[item_id] = m
        matrix = np.vstack(rows) if rows else np.empty((0, dim), dtype=np.float32)
        if normalize and len(rows):
            matrix = normalize_rows(matrix)
        return cls(dim, tuple(ids), matrix, meta)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._row

    def vector(self, item_id: str) -> np.ndarray:
        try:
            return self.matrix[self._row[item_id]]
        except KeyError:
            raise KeyError(f"unknown item id {item_id!r}") from None

    def meta_of(self, item_id: str) -> ItemMeta:
        return self.meta[item_id]

    def row_index(self, item_id: str) -> int:
        return self._row[item_id]

    def items(self) -> Iterator[tuple[str, np.ndarray, ItemMeta]]:
        for i, item_id in enumerate(self.ids):
            yield item_id, self.matrix[i], self.meta[item_id]

    def subset(self, keep_ids: Iterable[str]) -> "EmbeddingStore":
        """New store with only `keep_ids`, in this store's order."""
        wanted = set(keep_ids)
        missing = wanted - set(self.ids)
        if missing:
            raise KeyError(f"ids not in store: {sorted(missing)[:5]}")
        kept = [i for i in self.ids if i in wanted]
        rows = self.matrix[[self._row[i] for i in kept]]
        return EmbeddingStore(self.dim, tuple(kept), np.ascontiguousarray(rows),
                              {i: self.meta[i] for i in kept})

    def ids_where(self, predicate) -> list[str]:
        return [i for i in self.ids if predicate(self.meta[i])]

    def audio_items(self) -> list[AudioItem]:
        out = []
        for item_id, vec, m in self.items():
            if m.kind == "audio":
                out.append(AudioItem(item_id, m.tags, m.category, m.split, vec,
                                     m.duration_s))
        return out

    def frame_items(self) -> list[FrameItem]:
        out = []
        for item_id, vec, m in self.items():
            if m.kind == "frame":
                out.append(FrameItem(item_id, m.video_id or "", m.frame_index or 0,
                                     m.split, vec))
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (self.dim == other.dim and self.ids == other.ids
                and self.meta == other.meta
                and np.array_equal(self.matrix, other.matrix))


def sidecar_path(path: str | os.PathLike) -> str:
    return f"{os.fspath(path)}.meta.jsonl"


def _meta_to_json(item_id: str, m: ItemMeta) -> dict:
    rec: dict = {"id": item_id, "kind": m.kind}
    if m.tags:
        rec["tags"] = list(m.tags)
    if m.category:
        rec["category"] = m.category
    rec["split"] = m.split
    if m.video_id is not None:
        rec["video_id"] = m.video_id
    if m.frame_index is not None:
        rec["frame_index"] = m.frame_index
    if m.duration_s is not None:
        rec["duration_s"] = m.duration_s
    return rec


def _meta_from_json(rec: dict) -> tuple[str, ItemMeta]:
    if "id" not in rec or "kind" not in rec:
        raise BadConfig(f"sidecar record missing id/kind: {rec}")
    m = ItemMeta(
        kind=rec["kind"],
        tags=tuple(rec.get("tags", ())),
        category=rec.get("category", ""),
        split=rec.get("split", "train"),
        video_id=rec.get("video_id"),
        frame_index=rec.get("frame_index"),
        duration_s=rec.get("duration_s"),
    )
    m.validate(rec["id"])
    return rec["id"], m


def save_store(store: EmbeddingStore, path: str | os.PathLike) -> None:
    """Write the vector file and its metadata sidecar.

    Vectors are written as-is with the normalized flag set, so a
    save/load round trip is bit-identical.
    """
    path = os.fspath(path)
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, FLAG_NORMALIZED,
                                 store.dim, len(store)))
            for item_id in store.ids:
                raw = item_id.encode("ascii")
                f.write(_ID_LEN.pack(len(raw)))
                f.write(raw)
                f.write(store.vector(item_id).astype("<f4").tobytes())
        with open(sidecar_path(path), "w", encoding="utf-8") as f:
            for item_id in store.ids:
                f.write(json.dumps(_meta_to_json(item_id, store.meta[item_id])))
                f.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write store to {path}: {exc}") from exc


def load_store(path: str | os.PathLike) -> EmbeddingStore:
    """Read a store written by :func:`save_store`.

    Raw (unnormalized) vector files are normalized on load; files
    flagged normalized are loaded bit-identically.
    """
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoFailure(f"cannot read store from {path}: {exc}") from exc

    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"{path}: shorter than header")
    magic, version, flags, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: version {version}")
    if dim < 1:
        raise DimMismatch(f"{path}: non-positive dim {dim}")

    offset = _HEADER.size
    vec_bytes = dim * 4
    ids: list[str] = []
    seen: set[str] = set()
    rows = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        if offset + _ID_LEN.size > len(blob):
            raise TruncatedFile(f"{path}: record {i} cut off in id length")
        (id_len,) = _ID_LEN.unpack_from(blob, offset)
        offset += _ID_LEN.size
        if offset + id_len + vec_bytes > len(blob):
            raise TruncatedFile(f"{path}: record {i} cut off (declared count {count})")
        item_id = blob[offset:offset + id_len].decode("ascii")
        offset += id_len
        rows[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
        if item_id in seen:
            raise DuplicateId(f"{path}: duplicate id {item_id!r}")
        seen.add(item_id)
        ids.append(item_id)
    if offset != len(blob):
        raise TruncatedFile(f"{path}: {len(blob) - offset} trailing bytes")

    meta: dict[str, ItemMeta] = {}
    side = sidecar_path(path)
    try:
        with open(side, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                item_id, m = _meta_from_json(json.loads(line))
                if item_id in meta:
                    raise DuplicateId(f"{side}: duplicate id {item_id!r}")
                meta[item_id] = m
    except OSError as exc:
        raise IoFailure(f"cannot read sidecar {side}: {exc}") from exc

    missing = [i for i in ids if i not in meta]
    extra = [i for i in meta if i not in set(ids)]
    if missing or extra:
        raise BadConfig(f"{side}: metadata/vector mismatch "
                        f"(missing {missing[:3]}, extra {extra[:3]})")

    if flags & FLAG_NORMALIZED:
        if count:
            norms = np.linalg.norm(rows.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0)
            if np.any(off > 1e-4):
                bad = int(np.argmax(off))
                raise BadConfig(f"{path}: row {bad} flagged normalized but has "
                                f"norm {norms[bad]:.6f}")
    elif count:
        rows = normalize_rows(rows)
    return EmbeddingStore(dim, tuple(ids), rows, meta)


def synth_store(seed: int, n_items: int, dim: int, n_categories: int,
                cluster_spread: float, *, kind: str = "audio",
                id_prefix: str | None = None, center_seed: int | None = None,
                frames_per_video: int = 10) -> EmbeddingStore:
    """Deterministic category-clustered unit vectors for fixtures.

    Each category gets a random unit center; item i belongs to category
    ``i % n_categories`` and its vector is the normalized sum of the
    center and ``cluster_spread`` times Gaussian noise. With spread 0
    all same-category vectors coincide. `center_seed` lets two stores
    (e.g. a text store and a frame store) share category centers while
    drawing independent noise.
    """
    if n_items < 0 or dim < 1 or n_categories < 1:
        raise BadConfig(f"bad synth sizes n={n_items} dim={dim} cats={n_categories}")
    if n_categories > max(n_items, 1):
        raise BadConfig(f"n_categories {n_categories} > n_items {n_items}")
    if cluster_spread < 0:
        raise BadConfig(f"negative cluster_spread {cluster_spread}")
    if kind not in KINDS:
        raise BadConfig(f"unknown kind {kind!r}")

    rng = np.random.default_rng(seed)
    center_rng = np.random.default_rng(center_seed) if center_seed is not None else rng
    centers = normalize_rows(center_rng.standard_normal((n_categories, dim)))

    prefix = id_prefix or {"audio": "sfx", "frame": "frm", "text": "txt"}[kind]
    entries = []
    for i in range(n_items):
        cat = i % n_categories
        noise = rng.standard_normal(dim)
        vec = l2_normalize(centers[cat].astype(np.float64)
                           + cluster_spread * noise)
        item_id = f"{prefix}-{i:05d}"
        if kind == "frame":
            meta = ItemMeta(kind="frame", category=f"cat-{cat}", split="train",
                            video_id=f"{prefix}vid-{i // frames_per_video:04d}",
                            frame_index=i % frames_per_video)
        elif kind == "audio":
            meta = ItemMeta(kind="audio", tags=("synthetic", f"cat-{cat}"),
                            category=f"cat-{cat}", split="train")
        else:
            meta = ItemMeta(kind="text", category=f"cat-{cat}", split="train")
        entries.append((item_id, vec, meta))
    return EmbeddingStore.build(dim, entries, normalize=False)
