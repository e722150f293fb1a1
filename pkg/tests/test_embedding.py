import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clusternc.embedding import (
    EmbeddingMatrix,
    cosine_sim,
    effective_rank,
    gram_matrix,
    normalize_rows,
    read_embedding_csv,
    write_embedding_csv,
)
from clusternc.errors import ZeroNormRow

SIMPLEX = np.array([[1.0, 0.0], [-0.5, math.sqrt(3) / 2], [-0.5, -math.sqrt(3) / 2]])

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
matrices = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)), elements=finite).filter(
    lambda a: (np.linalg.norm(a, axis=1) > 1e-3).all()
)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)
    np.testing.assert_allclose(normalize_rows(np.array([[1.0, 0.0], [0.0, -2.0]])), [[1, 0], [0, -1]])
    with pytest.raises(ZeroNormRow) as err:
        normalize_rows(np.array([[0.0, 0.0]]))
    assert err.value.index == 0


def test_normalize_keeps_labels():
    m = EmbeddingMatrix(np.array([[2.0, 0.0], [0.0, 5.0]]), ("a", "b"))
    out = normalize_rows(m)
    assert out.labels == ("a", "b")
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)


def test_cosine_examples():
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 0], [-1, 0]) == -1.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-6)
    with pytest.raises(ZeroNormRow):
        cosine_sim([0, 0], [1, 0])


def test_gram_examples():
    np.testing.assert_allclose(gram_matrix([[1, 0], [0, 1]]), np.eye(2))
    np.testing.assert_allclose(gram_matrix([[1, 0], [-1, 0]]), [[1, -1], [-1, 1]])
    g = gram_matrix(SIMPLEX)
    off = g[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, -0.5, atol=1e-6)


def test_effective_rank_examples():
    assert effective_rank(np.eye(4)) == pytest.approx(4.0)
    assert effective_rank(np.ones((4, 4))) == pytest.approx(1.0)
    block = np.kron(np.eye(2), np.ones((2, 2)))
    assert effective_rank(block) == pytest.approx(2.0)
    assert effective_rank(np.zeros((3, 3))) == 1.0


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_normalize_idempotent(a):
    once = normalize_rows(a)
    np.testing.assert_allclose(normalize_rows(once), once, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, s, t):
    if a.shape[0] < 2:
        return
    x, y = a[0], a[1]
    assert cosine_sim(x, y) == pytest.approx(cosine_sim(y, x), abs=1e-12)
    assert cosine_sim(s * x, t * y) == pytest.approx(cosine_sim(x, y), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_gram_psd_symmetric_unit_diagonal(a):
    g = gram_matrix(a)
    np.testing.assert_allclose(g, g.T, atol=1e-9)
    np.testing.assert_allclose(np.diag(g), 1.0, atol=1e-9)
    assert np.linalg.eigvalsh(g).min() >= -1e-8
    assert g.min() >= -1.0 and g.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(matrices, st.randoms(use_true_random=False))
def test_effective_rank_permutation_invariant(a, rnd):
    g = gram_matrix(a)
    perm = list(range(len(g)))
    rnd.shuffle(perm)
    p = np.eye(len(g))[perm]
    r = effective_rank(g)
    assert effective_rank(p @ g @ p.T) == pytest.approx(r, abs=1e-9)
    assert 1.0 - 1e-9 <= r <= len(g) + 1e-9


def test_csv_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    m = EmbeddingMatrix(rng.standard_normal((5, 4)) * 1e-3, (0, 1, 2, 3, "cat"))
    path = tmp_path / "emb.csv"
    write_embedding_csv(path, m)
    assert path.read_text().splitlines()[0] == "label,x0,x1,x2,x3"
    back = read_embedding_csv(path)
    assert back.labels == m.labels
    assert np.array_equal(back.data, m.data)
