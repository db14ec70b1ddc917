"""Vector primitives: unit normalization and cosine similarity.

Vectors are float32 throughout; dot products accumulate in float64 so
that results stay stable under the 1e-6 tolerances the metric suite
asserts. All stored vectors are normalized at ingest, which reduces
cosine on the hot path to a plain dot product.
"""

from __future__ import annotations

import numpy as np

from .errors import DimMismatch, ZeroVector

NORM_EPS = 1e-12


def as_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce a sequence to a contiguous float32 1-D vector.

    Raises DimMismatch when `dim` is given and disagrees.
    """
    v = np.ascontiguousarray(values, dtype=np.float32)
    if v.ndim != 1:
        raise DimMismatch(f"expected 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimMismatch(f"expected dim {dim}, got {v.shape[0]}")
    return v


def l2_normalize(v) -> np.ndarray:
    """Scale `v` to unit L2 norm, preserving direction.

    Raises ZeroVector when the norm is at or below 1e-12.
    """
    v = as_vector(v)
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm <= NORM_EPS:
        raise ZeroVector(f"cannot normalize vector with norm {norm:g}")
    return (v.astype(np.float64) / norm).astype(np.float32)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise l2_normalize for an (n, dim) float32 matrix."""
    m = np.ascontiguousarray(matrix, dtype=np.float32)
    norms = np.linalg.norm(m.astype(np.float64), axis=1)
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmax(norms <= NORM_EPS))
        raise ZeroVector(f"row {bad} has norm {norms[bad]:g}")
    return (m.astype(np.float64) / norms[:, None]).astype(np.float32)


def cosine(a, b) -> float:
    """Cosine similarity of two unit vectors, clamped to [-1, 1].

    Both inputs are expected to be pre-normalized (see l2_normalize), so
    this is a float64-accumulated dot product.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.shape[0] != b.shape[0]:
        raise DimMismatch(f"dim {a.shape[0]} vs {b.shape[0]}")
    dot = float(np.dot(a.astype(np.float64), b.astype(np.float64)))
    return min(1.0, max(-1.0, dot))


def scores_against(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Dot products of every row of `matrix` against `query`, in float64.

    Rows and query are assumed unit-normalized, so these are cosines.
    """
    if matrix.shape[1] != query.shape[0]:
        raise DimMismatch(f"dim {matrix.shape[1]} vs {query.shape[0]}")
    return matrix.astype(np.float64) @ query.astype(np.float64)
