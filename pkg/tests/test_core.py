import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axn.core import (
    EmbeddingMatrix,
    FormatError,
    InvalidMatrixError,
    SparseScoreMatrix,
    TopKList,
    embeddings_from_csv,
    embeddings_to_csv,
    load_embeddings,
    load_sparse,
    save_embeddings,
    save_sparse,
    sparse_from_csv,
    sparse_to_csv,
    topk_indices,
    topk_merge,
)
from oracles import ranking


def test_embedding_roundtrip_2x3(tmp_path):
    m = EmbeddingMatrix([[1, 2, 3], [4, 5, 6]])
    p = tmp_path / "m.axne"
    save_embeddings(m, p)
    raw = p.read_bytes()
    assert len(raw) == 25 + 48
    assert raw[:4] == b"AXNE"
    assert load_embeddings(p) == m


def test_embedding_header_is_little_endian(tmp_path):
    p = tmp_path / "m.axne"
    save_embeddings(EmbeddingMatrix([[1.5, -2.0]], role="query"), p)
    magic, version, role, rows, dim = struct.unpack("<4sIBQQ", p.read_bytes()[:25])
    assert (magic, version, role, rows, dim) == (b"AXNE", 1, 0, 1, 2)
    assert np.frombuffer(p.read_bytes()[25:], "<f8").tolist() == [1.5, -2.0]


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros((3, 0)), [[1.0, np.nan]], [[np.inf]], [1.0, 2.0]])
def test_embedding_rejects(bad):
    with pytest.raises(InvalidMatrixError):
        EmbeddingMatrix(bad)


def test_embedding_is_frozen_copy():
    src = np.ones((2, 2))
    m = EmbeddingMatrix(src)
    src[0, 0] = 5
    assert m.data[0, 0] == 1
    with pytest.raises(ValueError):
        m.data[0, 0] = 3


def test_load_truncated(tmp_path):
    p = tmp_path / "m.axne"
    save_embeddings(EmbeddingMatrix(np.ones((3, 2))), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_embeddings(p)
    p.write_bytes(b"AXN")
    with pytest.raises(FormatError):
        load_embeddings(p)


def test_load_dim_zero(tmp_path):
    p = tmp_path / "z.axne"
    p.write_bytes(struct.pack("<4sIBQQ", b"AXNE", 1, 1, 0, 0))
    with pytest.raises(FormatError):
        load_embeddings(p)


def test_load_bad_magic(tmp_path):
    p = tmp_path / "x.axne"
    p.write_bytes(struct.pack("<4sIBQQ", b"NOPE", 1, 1, 1, 1) + b"\0" * 8)
    with pytest.raises(FormatError):
        load_embeddings(p)


def test_sparse_sorted_and_lookup():
    g = SparseScoreMatrix.from_entries(3, 4, [(2, 1, 0.5), (0, 3, 1.0), (0, 1, -2.0)])
    assert g.entries() == [(0, 1, -2.0), (0, 3, 1.0), (2, 1, 0.5)]
    assert g.get(0, 3) == 1.0
    with pytest.raises(KeyError):
        g.get(1, 1)
    dense = g.to_dense(fill=0.0)
    assert dense[2, 1] == 0.5 and dense.sum() == -0.5


@pytest.mark.parametrize(
    "entries",
    [[(0, 0, 1.0), (0, 0, 2.0)], [(5, 0, 1.0)], [(0, 9, 1.0)], [(0, 0, float("nan"))], [(-1, 0, 1.0)]],
)
def test_sparse_rejects(entries):
    with pytest.raises(InvalidMatrixError):
        SparseScoreMatrix.from_entries(3, 4, entries)


def test_sparse_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    flat = rng.choice(35, size=20, replace=False)
    g = SparseScoreMatrix(5, 7, flat // 7, flat % 7, rng.normal(size=20))
    p = tmp_path / "g.axng"
    save_sparse(g, p)
    assert len(p.read_bytes()) == struct.calcsize("<4sIQQQ") + 24 * g.nnz
    assert load_sparse(p) == g
    c = tmp_path / "g.csv"
    sparse_to_csv(g, c)
    assert sparse_from_csv(c, 5, 7) == g


def test_sparse_truncated(tmp_path):
    p = tmp_path / "g.axng"
    save_sparse(SparseScoreMatrix.from_entries(2, 2, [(0, 0, 1.0), (1, 1, 2.0)]), p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_sparse(p)


def test_embedding_csv_roundtrip_is_exact(tmp_path):
    m = EmbeddingMatrix(np.random.default_rng(1).normal(size=(4, 3)))
    c = tmp_path / "e.csv"
    embeddings_to_csv(m, c)
    assert embeddings_from_csv(c) == m


def test_topk_merge_examples():
    a = TopKList(2, ((1, 9), (2, 5)))
    b = TopKList(1, ((3, 7),))
    assert topk_merge(a, b, 2).items == ((1, 9.0), (3, 7.0))
    assert topk_merge(a, a, 2) == a
    tied = topk_merge(TopKList(1, ((7, 5),)), TopKList(1, ((2, 5),)), 1)
    assert tied.items == ((2, 5.0),)


def test_topklist_validates_order():
    with pytest.raises(ValueError):
        TopKList(2, ((1, 1.0), (2, 3.0)))
    with pytest.raises(ValueError):
        TopKList(2, ((2, 1.0), (1, 1.0)))
    with pytest.raises(ValueError):
        TopKList(1, ((1, 2.0), (2, 1.0)))


@settings(max_examples=200, deadline=None)
@given(
    scores=st.lists(st.integers(-5, 5), min_size=1, max_size=40),
    k=st.integers(0, 45),
)
def test_topk_indices_matches_sort(scores, k):
    ids = np.random.default_rng(len(scores)).permutation(len(scores)) * 3
    pos = topk_indices(np.array(scores, float), k, ids)
    assert [int(ids[p]) for p in pos] == ranking(ids, scores)[:k]


@settings(max_examples=100, deadline=None)
@given(
    a=st.dictionaries(st.integers(0, 30), st.integers(-4, 4), max_size=10),
    b=st.dictionaries(st.integers(0, 30), st.integers(-4, 4), max_size=10),
    k=st.integers(1, 25),
)
def test_topk_merge_is_topk_of_union(a, b, k):
    la = TopKList.from_scores(list(a), list(a.values()), max(len(a), 1))
    lb = TopKList.from_scores(list(b), list(b.values()), max(len(b), 1))
    union = dict(a)
    for i, s in b.items():
        union[i] = max(s, union.get(i, s))
    merged = topk_merge(la, lb, k)
    assert merged.ids == ranking(list(union), list(union.values()))[:k]
