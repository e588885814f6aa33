import json
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from cafe_micro.errors import ArgumentError, ContractError
from cafe_micro.evaluation import (
    caption_perplexity,
    embed_pairs,
    emit_reports,
    evaluate_embeddings,
    modality_gap,
    pca_2d,
    recall_at_k,
    similarity_matrix,
)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_force_recall(s, k):
    """Full sort of every row by (score desc, index asc), then look up the diagonal."""
    hits = 0
    for i, row in enumerate(s):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += order.index(i) < k
    return hits / len(s)


# -- similarity --------------------------------------------------------------
def test_similarity_examples():
    eye = np.eye(3)
    np.testing.assert_array_equal(similarity_matrix(eye, eye), eye)
    assert similarity_matrix([[0.6, 0.8]], [[0.6, 0.8]])[0, 0] == pytest.approx(1.0, abs=1e-15)
    s = similarity_matrix([[1, 0], [0, 1]], [[1, 0], [0, 1], [0.6, 0.8]])
    np.testing.assert_allclose(s, [[1, 0, 0.6], [0, 1, 0.8]], atol=1e-15)


def test_similarity_transpose_exact():
    rng = np.random.default_rng(0)
    a, b = unit_rows(rng, 5, 7), unit_rows(rng, 4, 7)
    np.testing.assert_array_equal(similarity_matrix(a, b).T, similarity_matrix(b, a))


def test_similarity_errors():
    with pytest.raises(ArgumentError):
        similarity_matrix(np.eye(2), np.eye(3))
    with pytest.raises(ContractError):
        similarity_matrix([[2.0, 0.0]], [[1.0, 0.0]])


# -- recall ------------------------------------------------------------------
def test_recall_identity():
    r = recall_at_k(np.eye(5))
    for d in (r.i2t, r.t2i):
        assert (d.r1, d.r5, d.r10, d.p1) == (1.0, 1.0, 1.0, 1.0)


def test_recall_worked_example():
    s = np.array([[0.9, 0.8, 0.1], [0.2, 0.7, 0.6], [0.6, 0.2, 0.5]])
    r = recall_at_k(s)
    assert r.i2t.r1 == pytest.approx(2 / 3) and r.i2t.p1 == r.i2t.r1
    assert r.t2i.r1 == pytest.approx(1 / 3)
    assert brute_force_recall(s, 2) == 1.0 and brute_force_recall(s.T, 2) == 1.0
    assert r.i2t.r5 == r.t2i.r5 == 1.0


def test_recall_ties_break_to_lower_index():
    s = np.ones((3, 3))
    r = recall_at_k(s)
    assert r.i2t.r1 == pytest.approx(1 / 3)
    assert brute_force_recall(s, 2) == pytest.approx(2 / 3)


def test_recall_non_square():
    with pytest.raises(ArgumentError):
        recall_at_k(np.zeros((2, 3)))


def test_recall_matches_brute_force_with_ties():
    rng = np.random.default_rng(1)
    for trial in range(1000):
        n = int(rng.integers(1, 21))
        s = rng.normal(size=(n, n))
        if trial % 2:
            s = np.round(s, 0)  # plenty of ties
        r = recall_at_k(s)
        for k, a, b in ((1, r.i2t.r1, r.t2i.r1), (5, r.i2t.r5, r.t2i.r5), (10, r.i2t.r10, r.t2i.r10)):
            assert a == brute_force_recall(s, k)
            assert b == brute_force_recall(s.T, k)
        assert r.i2t.p1 == r.i2t.r1 and r.t2i.p1 == r.t2i.r1
        assert r.i2t.r1 <= r.i2t.r5 <= r.i2t.r10 and r.t2i.r1 <= r.t2i.r5 <= r.t2i.r10


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_recall_full_k_is_one(n, seed):
    s = np.random.default_rng(seed).normal(size=(n, n))
    r = recall_at_k(s)
    if n <= 10:
        assert r.i2t.r10 == r.t2i.r10 == 1.0
    if n <= 5:
        assert r.i2t.r5 == r.t2i.r5 == 1.0


# -- modality gap ------------------------------------------------------------
def test_gap_identical_sets():
    h = unit_rows(np.random.default_rng(2), 6, 4)
    g = modality_gap(h, h)
    assert g.centroid_gap == pytest.approx(0.0, abs=1e-15)
    assert g.matched_cos == pytest.approx(1.0, abs=1e-12)


def test_gap_orthogonal_clusters():
    hv = np.tile([1.0, 0.0], (4, 1))
    ht = np.tile([0.0, 1.0], (4, 1))
    g = modality_gap(hv, ht)
    assert g.centroid_gap == pytest.approx(math.sqrt(2), abs=1e-15)
    assert g.matched_cos == 0.0 and g.mismatched_cos == 0.0


def test_gap_direct_formula():
    rng = np.random.default_rng(3)
    hv, ht = unit_rows(rng, 8, 4), unit_rows(rng, 8, 4)
    g = modality_gap(hv, ht)
    cv = [sum(hv[i, j] for i in range(8)) / 8 for j in range(4)]
    ct = [sum(ht[i, j] for i in range(8)) / 8 for j in range(4)]
    gap = math.sqrt(sum((a - b) ** 2 for a, b in zip(cv, ct)))
    matched = sum(float(np.dot(hv[i], ht[i])) for i in range(8)) / 8
    mism = sum(float(np.dot(hv[i], ht[j])) for i in range(8) for j in range(8) if i != j) / 56
    assert abs(g.centroid_gap - gap) <= 1e-12
    assert abs(g.matched_cos - matched) <= 1e-12
    assert abs(g.mismatched_cos - mism) <= 1e-12


def test_gap_symmetry_and_bounds():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n, d = int(rng.integers(2, 10)), int(rng.integers(1, 6))
        hv, ht = unit_rows(rng, n, d), unit_rows(rng, n, d)
        a, b = modality_gap(hv, ht), modality_gap(ht, hv)
        assert a.centroid_gap == pytest.approx(b.centroid_gap, abs=1e-15)
        assert a.matched_cos == pytest.approx(b.matched_cos, abs=1e-15)
        assert a.mismatched_cos == pytest.approx(b.mismatched_cos, abs=1e-15)
        assert 0.0 <= a.centroid_gap <= 2.0


def test_gap_empty():
    with pytest.raises(ArgumentError):
        modality_gap(np.zeros((0, 3)), np.zeros((0, 3)))


# -- pca ---------------------------------------------------------------------
def pca_oracle(h):
    """Top-2 projection from scipy's general eigen-solver with the same sign convention."""
    centered = h - h.mean(axis=0)
    cov = np.cov(h, rowvar=False, ddof=1).reshape(h.shape[1], h.shape[1])
    vals, vecs = scipy.linalg.eig(cov)
    vals, vecs = vals.real, vecs.real
    order = np.argsort(-vals, kind="stable")[:2]
    comps = vecs[:, order] / np.linalg.norm(vecs[:, order], axis=0)
    if comps.shape[1] < 2:
        comps = np.pad(comps, ((0, 0), (0, 2 - comps.shape[1])))
    for j in range(comps.shape[1]):
        k = np.argmax(np.abs(comps[:, j]))
        comps[:, j] *= np.sign(comps[k, j]) or 1.0
    return centered @ comps


def test_pca_matches_independent_eigensolver():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n, d = int(rng.integers(2, 33)), int(rng.integers(2, 17))
        h = rng.normal(size=(n, d)) * rng.uniform(0.1, 3.0, size=d)
        np.testing.assert_allclose(pca_2d(h), pca_oracle(h), atol=1e-8)


def test_pca_5x4_example():
    h = np.random.default_rng(6).normal(size=(5, 4))
    np.testing.assert_allclose(pca_2d(h), pca_oracle(h), atol=1e-8)


def test_pca_rank_two_data():
    rng = np.random.default_rng(7)
    xy = rng.normal(size=(10, 2)) * [3.0, 1.0]
    h = np.concatenate([xy, np.zeros((10, 3))], axis=1)
    out = pca_2d(h)
    centered = xy - xy.mean(axis=0)
    # same point cloud up to an orthogonal map: pairwise distances agree
    d_in = np.linalg.norm(centered[:, None] - centered[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_in, d_out, atol=1e-10)


def test_pca_constant_rows():
    np.testing.assert_allclose(pca_2d(np.ones((4, 3)) * 2.5), 0.0, atol=1e-15)


def test_pca_permutation_invariant():
    rng = np.random.default_rng(8)
    h = rng.normal(size=(12, 5))
    perm = rng.permutation(12)
    np.testing.assert_allclose(pca_2d(h[perm]), pca_2d(h)[perm], atol=1e-8)


def test_pca_needs_two_rows():
    with pytest.raises(ArgumentError):
        pca_2d(np.zeros((1, 3)))


# -- reports -----------------------------------------------------------------
def test_emit_reports(tmp_path):
    rng = np.random.default_rng(9)
    hv, ht = unit_rows(rng, 7, 5), unit_rows(rng, 7, 5)
    report, gap = evaluate_embeddings(hv, ht)
    paths = tmp_path / "r.json", tmp_path / "r.svg", tmp_path / "r.csv"
    coords = emit_reports(report, gap, hv, ht, *paths, title="a < b")
    doc = json.loads(paths[0].read_text())
    assert set(doc) == {"n", "i2t", "t2i", "gap"}
    assert set(doc["i2t"]) == {"r1", "r5", "r10", "p1"}
    assert set(doc["gap"]) == {"centroid_gap", "matched_cos", "mismatched_cos"}
    assert doc["n"] == 7 and doc["gap"]["centroid_gap"] == gap.centroid_gap
    svg = paths[1].read_text()
    assert svg.count("<circle") == 14
    assert 'width="800"' in svg and "a &lt; b" in svg
    lines = paths[2].read_text().splitlines()
    assert lines[0] == "modality,x,y" and len(lines) == 15
    assert float(lines[1].split(",")[1]) == coords[0, 0]


def test_single_pair_report_json_is_valid(tmp_path):
    h = np.array([[1.0, 0.0]])
    report, gap = evaluate_embeddings(h, h)
    emit_reports(report, gap, np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]),
                 json_path=tmp_path / "x.json")
    json.loads((tmp_path / "x.json").read_text())


# -- model-driven ------------------------------------------------------------
def test_embed_pairs_threads_do_not_change_result(small_model, pairs):
    a = embed_pairs(small_model, pairs[:70], "image", threads=1)
    b = embed_pairs(small_model, pairs[:70], "image", threads=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (70, 16)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)


def test_embed_pairs_modalities(small_model, pairs):
    for modality in ("image", "text", "both"):
        assert embed_pairs(small_model, pairs[:3], modality).shape == (3, 16)
    with pytest.raises(ArgumentError):
        embed_pairs(small_model, pairs[:3], "audio")


def test_untrained_caption_perplexity_near_vocab_size(small_model, pairs):
    ppl = caption_perplexity(small_model, pairs[:10])
    assert 0.5 * len(small_model.vocab) < ppl < 2 * len(small_model.vocab)
