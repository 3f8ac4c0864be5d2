"""Page index: construction, top-k retrieval and the ``LIDX`` binary format.

File layout (all integers little-endian)::

    b"LIDX"  u16 version  u16 dim  u32 entry_count
    per entry:
        u16 len + UTF-8 doc_id
        u32 page_no
        u16 len + UTF-8 image_ref
        u32 token_count
        token_count * dim float32 values, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import ConflictError, IndexFormatError, InvalidInputError, NotFoundError
from . import kernels
from .embedding import MultiVectorEmbedding

MAGIC = b"LIDX"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F32_LE = np.dtype("<f4")


@dataclass(frozen=True)
class PageRecord:
    doc_id: str
    page_no: int
    image_ref: str
    embedding: MultiVectorEmbedding

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.page_no)


@dataclass(frozen=True)
class RetrievalHit:
    doc_id: str
    page_no: int
    score: float
    rank: int
    image_ref: str = ""

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "doc_id": self.doc_id,
            "page_no": self.page_no,
            "score": self.score,
            "image_ref": self.image_ref,
        }


def _quantize(emb: MultiVectorEmbedding) -> MultiVectorEmbedding:
    # Stored values must survive the float32 file format bit-exactly; the format
    # has no normalization flag, so the index never carries one.
    data = emb.data.astype(np.float32).astype(np.float64)
    if not emb.normalized and np.array_equal(data, emb.data):
        return emb
    return MultiVectorEmbedding(data, normalized=False)


class PageIndex:
    """Immutable, ordered collection of page embeddings.

    Entries keep the order they were given in; :func:`build_index` sorts them
    by ``(doc_id, page_no)``. Embeddings are rounded to float32 precision on the
    way in so persistence is lossless.
    """

    def __init__(self, dim: int, entries: Iterable[PageRecord]):
        entries = tuple(
            PageRecord(e.doc_id, int(e.page_no), e.image_ref, _quantize(e.embedding)) for e in entries
        )
        seen = set()
        for e in entries:
            if e.embedding.dim != dim:
                raise InvalidInputError(
                    f"page ({e.doc_id}, {e.page_no}) has dim {e.embedding.dim}, index dim is {dim}"
                )
            if e.page_no < 1:
                raise InvalidInputError(f"page_no must be >= 1, got {e.page_no} for {e.doc_id!r}")
            if e.key in seen:
                raise ConflictError(f"duplicate page ({e.doc_id}, {e.page_no})")
            seen.add(e.key)
        self._dim = int(dim)
        self._entries = entries

        counts = [e.embedding.token_count for e in entries]
        self._offsets = np.zeros(len(entries) + 1, dtype=np.int64)
        np.cumsum(counts, out=self._offsets[1:])
        if entries:
            self._flat = np.ascontiguousarray(np.concatenate([e.embedding.data for e in entries]))
        else:
            self._flat = np.zeros((0, dim), dtype=np.float64)
        self._flat.setflags(write=False)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def entries(self) -> tuple[PageRecord, ...]:
        return self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __eq__(self, other):
        if not isinstance(other, PageIndex):
            return NotImplemented
        return self._dim == other._dim and self._entries == other._entries

    def __repr__(self):
        return f"PageIndex(dim={self._dim}, pages={len(self._entries)}, docs={len(self.doc_ids())})"

    def doc_ids(self) -> list[str]:
        return sorted({e.doc_id for e in self._entries})

    def score_all(self, query: MultiVectorEmbedding, positions: np.ndarray | None = None) -> np.ndarray:
        """Late-interaction score of ``query`` against every entry (or the given positions)."""
        if query.dim != self._dim:
            raise InvalidInputError(f"dimension mismatch: query dim {query.dim} vs index dim {self._dim}")
        if positions is None:
            return kernels.score_pages(query.data, self._flat, self._offsets)
        out = np.empty(len(positions), dtype=np.float64)
        # contiguous runs are scored in one kernel call
        start = 0
        while start < len(positions):
            stop = start + 1
            while stop < len(positions) and positions[stop] == positions[stop - 1] + 1:
                stop += 1
            lo, hi = positions[start], positions[stop - 1] + 1
            offs = self._offsets[lo:hi + 1] - self._offsets[lo]
            flat = self._flat[self._offsets[lo]:self._offsets[hi]]
            out[start:stop] = kernels.score_pages(query.data, flat, np.ascontiguousarray(offs))
            start = stop
        return out


def build_index(records: Iterable[PageRecord | Mapping]) -> PageIndex:
    """Build a :class:`PageIndex` sorted by ``(doc_id, page_no)``.

    ``records`` may be :class:`PageRecord` instances or mappings with the keys
    ``doc_id``, ``page_no``, ``image_ref`` and ``embedding``.
    """
    recs = []
    for r in records:
        if not isinstance(r, PageRecord):
            r = PageRecord(str(r["doc_id"]), int(r["page_no"]), str(r.get("image_ref", "")), r["embedding"])
        recs.append(r)
    if not recs:
        raise InvalidInputError("cannot build an index from zero records")
    dims = {r.embedding.dim for r in recs}
    if len(dims) != 1:
        raise InvalidInputError(f"records have inconsistent dims {sorted(dims)}")
    recs.sort(key=lambda r: r.key)
    return PageIndex(dims.pop(), recs)


def retrieve_topk(
    index: PageIndex, query: MultiVectorEmbedding, k: int = 3, doc_id: str | None = None
) -> list[RetrievalHit]:
    """Return the ``min(k, n)`` best pages by late-interaction score.

    Ties are broken by index order, which is ``(doc_id, page_no)`` for indexes
    made by :func:`build_index`. With ``doc_id`` the search is restricted to
    that document's pages.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if doc_id is None:
        positions = np.arange(len(index))
    else:
        positions = np.array([i for i, e in enumerate(index.entries) if e.doc_id == doc_id], dtype=np.int64)
        if len(positions) == 0:
            raise NotFoundError(f"document {doc_id!r} is not in the index")
    scores = index.score_all(query, positions)
    order = np.argsort(-scores, kind="stable")[:k]
    hits = []
    for rank, o in enumerate(order, start=1):
        e = index.entries[positions[o]]
        hits.append(RetrievalHit(e.doc_id, e.page_no, float(scores[o]), rank, e.image_ref))
    return hits


def _pack_str(s: str, what: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InvalidInputError(f"{what} is longer than 65535 UTF-8 bytes")
    return _U16.pack(len(raw)) + raw


def dumps_index(index: PageIndex) -> bytes:
    if index.dim > 0xFFFF:
        raise InvalidInputError(f"dim {index.dim} does not fit the index format (max 65535)")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, index.dim, len(index))]
    for e in index.entries:
        parts.append(_pack_str(e.doc_id, "doc_id"))
        parts.append(_U32.pack(e.page_no))
        parts.append(_pack_str(e.image_ref, "image_ref"))
        parts.append(_U32.pack(e.embedding.token_count))
        parts.append(e.embedding.data.astype(_F32_LE).tobytes())
    return b"".join(parts)


def save_index(index: PageIndex, path) -> None:
    """Write ``index`` to ``path`` atomically."""
    path = Path(path)
    data = dumps_index(index)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise IndexFormatError(
                f"truncated file: needed {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u16(self, what: str) -> int:
        return _U16.unpack(self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what: str) -> str:
        n = self.u16(f"{what} length")
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"{what} is not valid UTF-8", start) from exc


def loads_index(buf: bytes) -> PageIndex:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u16("version")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported format version {version}", 4)
    dim = r.u16("dim")
    count = r.u32("entry count")
    if dim == 0:
        raise IndexFormatError("dim must be positive", 6)
    entries = []
    for i in range(count):
        entry_start = r.pos
        doc_id = r.text(f"doc_id of entry {i}")
        page_no = r.u32(f"page_no of entry {i}")
        image_ref = r.text(f"image_ref of entry {i}")
        n_tok = r.u32(f"token_count of entry {i}")
        if n_tok == 0:
            raise IndexFormatError(f"entry {i} has zero tokens", entry_start)
        data_start = r.pos
        raw = r.take(n_tok * dim * 4, f"embedding of entry {i}")
        values = np.frombuffer(raw, dtype=_F32_LE).reshape(n_tok, dim).astype(np.float64)
        try:
            emb = MultiVectorEmbedding(values)
        except InvalidInputError as exc:
            raise IndexFormatError(f"entry {i}: {exc}", data_start) from exc
        entries.append(PageRecord(doc_id, page_no, image_ref, emb))
    if r.pos != len(buf):
        raise IndexFormatError(f"{len(buf) - r.pos} trailing bytes after last entry", r.pos)
    try:
        return PageIndex(dim, entries)
    except (ConflictError, InvalidInputError) as exc:
        raise IndexFormatError(str(exc)) from exc


def load_index(path) -> PageIndex:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"index file not found: {path}")
    return loads_index(path.read_bytes())
