"""Shared builders for the test suite."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from avmatch.store import EmbeddingStore, ItemMeta


def audio_meta(category: str = "dog", tags: Sequence[str] = ("bark",),
               split: str = "train", duration_s: float | None = None) -> ItemMeta:
    return ItemMeta(kind="audio", tags=tuple(tags), category=category,
                    split=split, duration_s=duration_s)


def frame_meta(video_id: str = "vid-0", frame_index: int = 0,
               split: str = "train") -> ItemMeta:
    return ItemMeta(kind="frame", video_id=video_id, frame_index=frame_index,
                    split=split)


def text_meta(category: str = "", split: str = "train") -> ItemMeta:
    return ItemMeta(kind="text", category=category, split=split)


def build_store(vectors: Mapping[str, Sequence[float]],
                metas: Mapping[str, ItemMeta] | None = None,
                kind: str = "audio", normalize: bool = True) -> EmbeddingStore:
    """Store from an id->vector map; default metadata by kind."""
    ids = list(vectors)
    dim = len(next(iter(vectors.values())))
    defaults = {"audio": audio_meta, "frame": frame_meta, "text": text_meta}
    entries = []
    for i, item_id in enumerate(ids):
        if metas and item_id in metas:
            meta = metas[item_id]
        elif kind == "frame":
            meta = frame_meta(video_id=f"vid-{i}", frame_index=0)
        else:
            meta = defaults[kind]()
        entries.append((item_id,
                        np.asarray(vectors[item_id], dtype=np.float32), meta))
    return EmbeddingStore.build(dim, entries, normalize=normalize)


def random_unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows.astype(np.float32)


def random_store(seed: int, n: int, dim: int, kind: str = "audio",
                 prefix: str = "it", n_categories: int = 3) -> EmbeddingStore:
    """Uniform random unit vectors with cycling categories and videos."""
    rng = np.random.default_rng(seed)
    rows = random_unit_rows(rng, n, dim)
    entries = []
    for i in range(n):
        item_id = f"{prefix}-{i:04d}"
        if kind == "frame":
            meta = frame_meta(video_id=f"{prefix}v-{i // 10}", frame_index=i % 10)
        elif kind == "audio":
            meta = audio_meta(category=f"cat-{i % n_categories}")
        else:
            meta = text_meta()
        entries.append((item_id, rows[i], meta))
    return EmbeddingStore.build(dim, entries, normalize=True)
