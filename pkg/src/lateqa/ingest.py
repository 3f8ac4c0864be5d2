"""PDF to page images, and page images to multi-vector embeddings.

Pages are stored as ``{doc_id}_{page_no:04}.png`` with a JSON manifest
``{doc_id}_manifest.json`` next to them. Rasterization is delegated to an
external command (``pdftoppm`` by default, override with the
``LATEQA_RASTERIZER`` environment variable or the ``command`` argument). The
command template may use ``{input}``, ``{dpi}`` and ``{output}``; ``{output}``
is a file prefix and the tool must write one ``<prefix>-<n>.png`` per page.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shlex
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from PIL import Image, UnidentifiedImageError

from .errors import (
    BackendError,
    EmbeddingFailedError,
    IngestError,
    InvalidInputError,
    NotFoundError,
    RasterizerNotFoundError,
)
from .gateway import Gateway, ImagePart
from .retrieval.embedding import MultiVectorEmbedding

logger = logging.getLogger(__name__)

DEFAULT_DPI = 144
DEFAULT_RASTERIZER = "pdftoppm -png -r {dpi} {input} {output}"
_PAGE_FILE = re.compile(r"^(?P<doc>.+)_(?P<page>\d{4})\.png$")
_PRODUCED = re.compile(r"(\d+)\.png$")


@dataclass(frozen=True)
class PageImage:
    doc_id: str
    page_no: int
    path: Path
    width_px: int
    height_px: int
    format: str = "PNG"

    @property
    def ref(self) -> str:
        return self.path.stem

    def as_part(self) -> ImagePart:
        return ImagePart(ref=self.ref, path=str(self.path))

    def to_dict(self) -> dict:
        return {"page_no": self.page_no, "file": self.path.name, "width_px": self.width_px, "height_px": self.height_px}


@dataclass(frozen=True)
class PageSet:
    doc_id: str
    pages: tuple[PageImage, ...]

    def __post_init__(self):
        object.__setattr__(self, "pages", tuple(self.pages))
        nos = [p.page_no for p in self.pages]
        if any(b <= a for a, b in zip(nos, nos[1:])):
            raise InvalidInputError(f"page numbers of {self.doc_id!r} are not strictly increasing: {nos}")

    def __len__(self):
        return len(self.pages)


def page_filename(doc_id: str, page_no: int) -> str:
    return f"{doc_id}_{page_no:04d}.png"


def _probe_png(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise IngestError(f"{path.name} is {im.format}, not PNG")
        im.load()
        return im.size


def _rasterizer_command(command: str | Sequence[str] | None) -> list[str]:
    if command is None:
        command = os.environ.get("LATEQA_RASTERIZER") or DEFAULT_RASTERIZER
    return shlex.split(command) if isinstance(command, str) else list(command)


def write_manifest(page_set: PageSet, out_dir, dpi: int | None) -> Path:
    path = Path(out_dir) / f"{page_set.doc_id}_manifest.json"
    doc = {"doc_id": page_set.doc_id, "dpi": dpi, "pages": [p.to_dict() for p in page_set.pages]}
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def rasterize_document(
    pdf_path, out_dir, dpi: int = DEFAULT_DPI, doc_id: str | None = None, command=None
) -> PageSet:
    """Render every page of ``pdf_path`` to ``out_dir/{doc_id}_{page:04}.png``.

    Output is staged in a temporary directory and only moved into place once
    every page decodes, so a failed run leaves no partial page set. Re-running
    overwrites the same filenames.
    """
    pdf_path, out_dir = Path(pdf_path), Path(out_dir)
    if not pdf_path.is_file():
        raise NotFoundError(f"PDF not found: {pdf_path}")
    doc_id = doc_id or pdf_path.stem
    template = _rasterizer_command(command)
    if not template or shutil.which(template[0]) is None:
        tool = template[0] if template else "<empty>"
        raise RasterizerNotFoundError(
            f"rasterizer {tool!r} not found on PATH; install poppler-utils (pdftoppm) "
            "or set LATEQA_RASTERIZER to a command template using {input} {dpi} {output}"
        )
    out_dir.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory(dir=out_dir, prefix=".raster-") as tmp:
        prefix = str(Path(tmp) / "page")
        argv = [a.format(input=str(pdf_path), dpi=dpi, output=prefix) for a in template]
        logger.info("rasterizing %s: %s", pdf_path, shlex.join(argv))
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise IngestError(
                f"rasterizer exited with status {proc.returncode} for {pdf_path}", stderr=proc.stderr
            )
        produced = []
        for f in Path(tmp).glob("*.png"):
            m = _PRODUCED.search(f.name)
            if m:
                produced.append((int(m.group(1)), f))
        if not produced:
            raise IngestError(f"rasterizer produced no pages for {pdf_path}", stderr=proc.stderr)
        produced.sort()

        staged, bad = [], []
        for page_no, f in produced:
            try:
                w, h = _probe_png(f)
            except (OSError, UnidentifiedImageError, IngestError):
                bad.append(f.name)
                continue
            staged.append((page_no, f, w, h))
        if bad:
            raise IngestError(f"rasterizer wrote undecodable pages: {bad}", bad_files=bad)

        pages = []
        for page_no, f, w, h in staged:
            dest = out_dir / page_filename(doc_id, page_no)
            os.replace(f, dest)
            pages.append(PageImage(doc_id, page_no, dest, w, h))

    page_set = PageSet(doc_id, pages)
    write_manifest(page_set, out_dir, dpi)
    return page_set


def discover_doc_ids(directory) -> list[str]:
    ids = set()
    for f in Path(directory).iterdir():
        m = _PAGE_FILE.match(f.name)
        if m:
            ids.add(m.group("doc"))
    return sorted(ids)


def load_page_set(directory, doc_id: str) -> PageSet:
    """Collect the pre-rendered pages of ``doc_id``; page-number gaps are kept."""
    directory = Path(directory)
    if not directory.is_dir():
        raise NotFoundError(f"page directory not found: {directory}")
    found = []
    for f in directory.iterdir():
        m = _PAGE_FILE.match(f.name)
        if m and m.group("doc") == doc_id:
            found.append((int(m.group("page")), f))
    if not found:
        raise NotFoundError(f"no pages named {doc_id}_NNNN.png in {directory}")
    found.sort()
    pages, bad = [], []
    for page_no, f in found:
        try:
            w, h = _probe_png(f)
        except (OSError, UnidentifiedImageError, IngestError):
            bad.append(f.name)
            continue
        pages.append(PageImage(doc_id, page_no, f, w, h))
    if bad:
        raise IngestError(f"unreadable page images for {doc_id!r}: {bad}", bad_files=bad)
    return PageSet(doc_id, pages)


def embed_pages(
    gateway: Gateway, pages: PageSet, parallelism: int = 1
) -> list[tuple[PageImage, MultiVectorEmbedding]]:
    """Embed every page; results keep page order regardless of ``parallelism``."""
    if not pages.pages:
        raise InvalidInputError(f"page set {pages.doc_id!r} is empty")

    def one(page: PageImage):
        try:
            return gateway.embed_multivector(page.as_part()), None
        except BackendError as exc:
            return None, exc

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, pages.pages))
    else:
        results = [one(p) for p in pages.pages]

    failed = [(p.doc_id, p.page_no) for p, (_, err) in zip(pages.pages, results) if err is not None]
    if failed:
        first = next(err for _, err in results if err is not None)
        raise EmbeddingFailedError(f"embedding failed for {len(failed)} page(s) {failed}: {first}", failed)

    out = []
    dim = results[0][0].dim
    for page, (emb, _) in zip(pages.pages, results):
        if emb.dim != dim:
            raise InvalidInputError(
                f"backend returned dim {emb.dim} for page {page.page_no} of {page.doc_id!r}, expected {dim}"
            )
        out.append((page, emb))
    return out
