"""Vector primitives: normalization and cosine similarity."""

import math

import numpy as np
import pytest

from avmatch.core import as_vector, cosine, l2_normalize, normalize_rows, scores_against
from avmatch.errors import DimMismatch, ZeroVector


class TestAsVector:
    def test_list_becomes_float32(self):
        v = as_vector([1, 2, 3])
        assert v.dtype == np.float32
        assert v.shape == (3,)

    def test_dim_enforced(self):
        with pytest.raises(DimMismatch):
            as_vector([1.0, 2.0], dim=3)

    def test_rejects_matrix(self):
        with pytest.raises(DimMismatch):
            as_vector([[1.0, 2.0], [3.0, 4.0]])


class TestL2Normalize:
    def test_three_four_five(self):
        v = l2_normalize(np.array([3.0, 4.0]))
        assert v == pytest.approx([0.6, 0.8], abs=1e-7)

    def test_already_unit_unchanged(self):
        v = l2_normalize(np.array([1.0, 0.0, 0.0]))
        assert np.array_equal(v, np.array([1.0, 0.0, 0.0], dtype=np.float32))

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            l2_normalize(np.zeros(4))

    def test_tiny_norm_rejected(self):
        with pytest.raises(ZeroVector):
            l2_normalize(np.full(4, 1e-14))

    def test_unit_norm_within_tolerance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = l2_normalize(rng.standard_normal(32) * 10)
            assert abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) <= 1e-6
            assert v.dtype == np.float32

    def test_direction_preserved(self):
        raw = np.array([2.0, -1.0, 0.5])
        unit = l2_normalize(raw)
        assert float(np.dot(unit, raw / np.linalg.norm(raw))) == pytest.approx(1.0, abs=1e-6)


class TestNormalizeRows:
    def test_each_row_unit(self):
        rng = np.random.default_rng(1)
        rows = normalize_rows(rng.standard_normal((20, 8)).astype(np.float32))
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-6)

    def test_zero_row_rejected(self):
        m = np.ones((3, 4), dtype=np.float32)
        m[1] = 0
        with pytest.raises(ZeroVector):
            normalize_rows(m)


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_known_eight_ninths(self):
        a = l2_normalize(np.array([1.0, 2.0, 2.0]))
        b = l2_normalize(np.array([2.0, 1.0, 2.0]))
        assert cosine(a, b) == pytest.approx(8.0 / 9.0, abs=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = l2_normalize(rng.standard_normal(16))
            b = l2_normalize(rng.standard_normal(16))
            assert cosine(a, b) == cosine(b, a)

    def test_clamped_to_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            v = l2_normalize(rng.standard_normal(64))
            assert -1.0 <= cosine(v, v) <= 1.0
            assert cosine(v, v) == pytest.approx(1.0, abs=1e-6)

    def test_matches_float64_dot(self):
        rng = np.random.default_rng(4)
        a = l2_normalize(rng.standard_normal(32))
        b = l2_normalize(rng.standard_normal(32))
        expected = float(a.astype(np.float64) @ b.astype(np.float64))
        assert cosine(a, b) == pytest.approx(expected, abs=1e-12)

    def test_scaling_invariance(self):
        rng = np.random.default_rng(5)
        raw_a = rng.standard_normal(16)
        raw_b = rng.standard_normal(16)
        base = cosine(l2_normalize(raw_a), l2_normalize(raw_b))
        scaled = cosine(l2_normalize(3.5 * raw_a), l2_normalize(0.02 * raw_b))
        assert scaled == pytest.approx(base, abs=1e-6)


class TestScoresAgainst:
    def test_matches_per_row_cosine(self):
        rng = np.random.default_rng(6)
        matrix = normalize_rows(rng.standard_normal((10, 8)).astype(np.float32))
        q = l2_normalize(rng.standard_normal(8))
        scores = scores_against(matrix, q)
        assert scores.dtype == np.float64
        for i in range(10):
            assert scores[i] == pytest.approx(cosine(matrix[i], q), abs=1e-12)

    def test_math_sanity(self):
        matrix = np.array([[1.0, 0.0], [0.0, 1.0],
                           [math.sqrt(0.5), math.sqrt(0.5)]], dtype=np.float32)
        q = np.array([1.0, 0.0], dtype=np.float32)
        scores = scores_against(matrix, q)
        assert scores == pytest.approx([1.0, 0.0, math.sqrt(0.5)], abs=1e-6)
