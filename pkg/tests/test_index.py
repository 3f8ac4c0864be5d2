from __future__ import annotations

import numpy as np
import pytest

from lateqa.errors import ConflictError, IndexFormatError, InvalidInputError, NotFoundError
from lateqa.retrieval import (
    MultiVectorEmbedding,
    build_index,
    dumps_index,
    late_interaction_score,
    load_index,
    loads_index,
    retrieve_topk,
    save_index,
)
from lateqa.retrieval.index import PageRecord
from oracles import li_bruteforce


def rec(doc, page, rows, ref=""):
    return PageRecord(doc, page, ref, MultiVectorEmbedding(np.asarray(rows, dtype=np.float64)))


def random_index(rng, n_docs=None, dim=None):
    dim = dim or int(rng.integers(1, 40))
    records = []
    for d in range(n_docs or int(rng.integers(1, 6))):
        for p in rng.choice(np.arange(1, 50), size=int(rng.integers(1, 6)), replace=False):
            rows = rng.normal(size=(int(rng.integers(1, 10)), dim)) * 10 ** rng.uniform(-3, 3)
            doc = f"doc-{d}-ü" if d % 2 else f"d{d}"
            records.append(rec(doc, int(p), rows, ref=f"pages/{doc}_{int(p):04d}.png"))
    return build_index(records)


def test_build_sorts_and_preserves_dim():
    idx = build_index([rec("a", 3, [[1, 0]]), rec("a", 1, [[0, 1]]), rec("a", 2, [[1, 1]])])
    assert len(idx) == 3 and idx.dim == 2
    assert [e.page_no for e in idx.entries] == [1, 2, 3]


def test_build_errors():
    with pytest.raises(ConflictError):
        build_index([rec("docA", 1, [[1.0]]), rec("docA", 1, [[2.0]])])
    with pytest.raises(InvalidInputError):
        build_index([])
    with pytest.raises(InvalidInputError):
        build_index([rec("a", 1, [[1.0, 0.0]]), rec("a", 2, [[1.0]])])


def test_build_accepts_mappings():
    idx = build_index([{"doc_id": "x", "page_no": 1, "image_ref": "r",
                        "embedding": MultiVectorEmbedding(np.ones((2, 3)))}])
    assert idx.entries[0].image_ref == "r"


def test_topk_worked_example():
    # single-token pages with scores 1..5 against q=[[1]]
    idx = build_index([rec("d", p, [[float(s)]]) for p, s in zip(range(1, 6), [3.0, 5.0, 1.0, 4.0, 2.0])])
    hits = retrieve_topk(idx, MultiVectorEmbedding(np.array([[1.0]])), 3)
    assert [(h.page_no, h.score, h.rank) for h in hits] == [(2, 5.0, 1), (4, 4.0, 2), (1, 3.0, 3)]


def test_topk_saturates_and_breaks_ties_by_key():
    rows = [[0.5, 0.5]]
    idx = build_index([rec("b", 1, rows), rec("a", 2, rows), rec("a", 1, rows)])
    hits = retrieve_topk(idx, MultiVectorEmbedding(np.array([[1.0, 1.0]])), 10)
    assert [(h.doc_id, h.page_no) for h in hits] == [("a", 1), ("a", 2), ("b", 1)]
    assert len({h.score for h in hits}) == 1


def test_topk_equals_full_sort(rng):
    for _ in range(30):
        idx = random_index(rng)
        q = MultiVectorEmbedding(rng.normal(size=(int(rng.integers(1, 6)), idx.dim)))
        hits = retrieve_topk(idx, q, len(idx))
        oracle = sorted(
            ((-li_bruteforce(q.data.tolist(), e.embedding.data.tolist()), e.doc_id, e.page_no) for e in idx.entries)
        )
        assert [(h.doc_id, h.page_no) for h in hits] == [(d, p) for _, d, p in oracle]
        for h in hits:
            e = next(e for e in idx.entries if e.key == (h.doc_id, h.page_no))
            assert h.score == late_interaction_score(q, e.embedding)


def test_topk_doc_filter():
    idx = build_index([rec("a", 1, [[1.0]]), rec("b", 1, [[9.0]])])
    q = MultiVectorEmbedding(np.array([[1.0]]))
    assert [h.doc_id for h in retrieve_topk(idx, q, 3, doc_id="a")] == ["a"]
    with pytest.raises(NotFoundError):
        retrieve_topk(idx, q, 3, doc_id="zzz")
    with pytest.raises(InvalidInputError):
        retrieve_topk(idx, q, 0)
    with pytest.raises(InvalidInputError):
        retrieve_topk(idx, MultiVectorEmbedding(np.ones((1, 2))), 1)


def test_round_trip_byte_exact(rng, tmp_path):
    for i in range(50):
        idx = random_index(rng)
        path = tmp_path / f"i{i}.lidx"
        save_index(idx, path)
        back = load_index(path)
        assert dumps_index(back) == path.read_bytes()
        assert [e.key for e in back.entries] == [e.key for e in idx.entries]
        for a, b in zip(idx.entries, back.entries):
            assert a.image_ref == b.image_ref
            assert a.embedding.data.tobytes() == b.embedding.data.tobytes()


def test_quantization_is_idempotent(rng):
    idx = random_index(rng)
    again = build_index(idx.entries)
    assert dumps_index(again) == dumps_index(idx)


def test_header_layout():
    buf = dumps_index(build_index([rec("a", 7, [[1.0, 2.0]], ref="x")]))
    assert buf[:4] == b"LIDX"
    assert buf[4:6] == (1).to_bytes(2, "little")
    assert buf[6:8] == (2).to_bytes(2, "little")
    assert buf[8:12] == (1).to_bytes(4, "little")


def test_bad_magic_and_version():
    buf = bytearray(dumps_index(build_index([rec("a", 1, [[1.0]])])))
    with pytest.raises(IndexFormatError) as e:
        loads_index(b"XXXX" + bytes(buf[4:]))
    assert e.value.offset == 0
    buf[4] = 9
    with pytest.raises(IndexFormatError, match="version"):
        loads_index(bytes(buf))


def test_every_truncation_is_a_format_error(rng):
    buf = dumps_index(random_index(rng, n_docs=2, dim=3))
    for cut in range(len(buf)):
        with pytest.raises(IndexFormatError):
            loads_index(buf[:cut])
    with pytest.raises(IndexFormatError, match="trailing"):
        loads_index(buf + b"\0")


def test_load_missing_file(tmp_path):
    with pytest.raises(NotFoundError):
        load_index(tmp_path / "nope.lidx")
