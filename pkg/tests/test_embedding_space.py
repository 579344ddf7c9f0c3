import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from seqalign.embedding_space import (EmbeddingError, EmbeddingSpace, apply_projection, build_candidates,
                                      cosine, load_embeddings, load_embeddings_binary, save_embeddings,
                                      save_embeddings_binary)
from seqalign.kg_store import load_kg

KG = load_kg("a\tr\tb\nb\tr\tc\n")


def emb_text(rows, dim=4):
    return [f"{len(rows)} {dim}"] + [f"{name} " + " ".join(map(str, vec)) for name, vec in rows]


def test_load_embeddings_text():
    m = load_embeddings(emb_text([("c", [1, 1, 1, 1]), ("a", [0, 1, 2, 3]), ("b", [4, 5, 6, 7])]), KG)
    assert m.shape == (3, 4)
    np.testing.assert_array_equal(m[KG.entities.id("a")], [0, 1, 2, 3])


def test_mixed_lengths_rejected():
    lines = ["3 4", "a 1 2 3 4", "b 1 2 3 4 5", "c 1 1 1 1"]
    with pytest.raises(EmbeddingError, match="length"):
        load_embeddings(lines, KG)


def test_missing_entity_named():
    with pytest.raises(EmbeddingError, match="'c'"):
        load_embeddings(emb_text([("a", [1, 2, 3, 4]), ("b", [1, 2, 3, 4])]), KG)


def test_non_finite_rejected():
    with pytest.raises(EmbeddingError, match="non-finite"):
        load_embeddings({"a": [1.0, 0.0], "b": [np.nan, 1.0], "c": [1.0, 1.0]}, KG)


def test_text_and_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    m = rng.standard_normal((3, 5))
    save_embeddings(tmp_path / "emb.txt", KG.entities.names, m)
    np.testing.assert_array_equal(load_embeddings(tmp_path / "emb.txt", KG), m)
    save_embeddings_binary(tmp_path / "emb.bin", tmp_path / "ids.txt", KG.entities.names, m)
    back = load_embeddings_binary(tmp_path / "emb.bin", tmp_path / "ids.txt", KG)
    np.testing.assert_array_equal(back, m.astype(np.float32).astype(np.float64))


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += a[i][k] * b[k][j]
    return out


def test_projection_cases():
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(apply_projection(x, np.eye(3)), x)
    np.testing.assert_array_equal(apply_projection([[1.0, 0.0]], [[0, 1], [1, 0]]), [[0.0, 1.0]])
    m = np.random.default_rng(1).standard_normal((3, 3))
    before = x.copy()
    np.testing.assert_allclose(apply_projection(x, m), naive_matmul(x.tolist(), m.tolist()), rtol=1e-12)
    np.testing.assert_array_equal(x, before)
    with pytest.raises(EmbeddingError):
        apply_projection(x, np.eye(4))


def test_cosine_values():
    assert cosine([3.0, -1.0], [3.0, -1.0]) == pytest.approx(1.0, abs=1e-15)
    assert cosine([1, 0, 0], [0, 1, 0]) == 0.0
    assert cosine([1, 2, 3], [4, 5, 6]) == pytest.approx(0.9746318461970762, rel=1e-12)
    with pytest.raises(EmbeddingError):
        cosine([0, 0], [1, 0])


vec = arrays(np.float64, 5, elements=st.floats(-10, 10, allow_nan=False)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@given(vec, vec, st.floats(0.01, 100), st.floats(0.01, 100))
@settings(max_examples=200, deadline=None)
def test_cosine_symmetric_scale_invariant(u, v, a, b):
    c = cosine(u, v)
    assert -1.0 <= c <= 1.0
    assert cosine(v, u) == pytest.approx(c, abs=1e-12)
    assert cosine(a * u, b * v) == pytest.approx(c, abs=1e-9)


def space(e1, e2):
    return EmbeddingSpace.from_matrices(e1, e2)


def test_candidates_exact_copy_first():
    e1 = np.array([[0.3, 0.9, 0.1]])
    e2 = np.array([[1.0, 0.0, 0.0], [0.3, 0.9, 0.1], [0.0, 0.0, 1.0]])
    tab = build_candidates(space(e1, e2), [0], [0, 1, 2], k=1)
    assert tab.rows[0][0][0] == 1 and tab.rows[0][0][1] == pytest.approx(1.0)


def test_candidates_saturate():
    rng = np.random.default_rng(0)
    tab = build_candidates(space(rng.random((2, 3)), rng.random((4, 3))), [0, 1], [0, 1, 2, 3], k=10)
    assert tab.k == 4 and all(len(r) == 4 for r in tab.rows.values())


def test_candidates_match_exhaustive_sort():
    rng = np.random.default_rng(7)
    e1, e2 = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    tab = build_candidates(space(e1, e2), range(5), range(5), k=3)
    for s in range(5):
        scored = sorted(((-cosine(e1[s], e2[t]), t) for t in range(5)))[:3]
        assert [t for _, t in scored] == [t for t, _ in tab.rows[s]]
        np.testing.assert_allclose([-x for x, _ in scored], [x for _, x in tab.rows[s]], atol=1e-12)


def test_candidates_tie_break_on_target_id():
    e1 = np.array([[1.0, 0.0]])
    e2 = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    tab = build_candidates(space(e1, e2), [0], [3, 2, 1, 0], k=4)
    assert [t for t, _ in tab.rows[0]] == [1, 2, 3, 0]


def test_candidates_respect_target_pool():
    e1 = np.array([[1.0, 0.0]])
    e2 = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    tab = build_candidates(space(e1, e2), [0], [1, 2], k=2)
    assert [t for t, _ in tab.rows[0]] == [1, 2]


def test_candidates_bad_k():
    with pytest.raises(ValueError):
        build_candidates(space(np.eye(2), np.eye(2)), [0], [0], k=0)


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=50, deadline=None)
def test_candidate_rows_sorted_and_deterministic(seed, k):
    rng = np.random.default_rng(seed)
    sp_ = space(rng.standard_normal((4, 3)), rng.standard_normal((6, 3)))
    tab = build_candidates(sp_, range(4), range(6), k)
    again = build_candidates(sp_, range(4), range(6), k)
    assert tab == again
    for row in tab.rows.values():
        assert len(row) == min(k, 6)
        sims = [s for _, s in row]
        assert sims == sorted(sims, reverse=True)
        assert all(-1.0 <= s <= 1.0 for s in sims)


def test_space_rejects_non_finite():
    with pytest.raises(EmbeddingError):
        EmbeddingSpace.from_matrices([[math.inf]], [[1.0]])
