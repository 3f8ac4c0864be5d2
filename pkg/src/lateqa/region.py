"""Answer-region localization, cropping and crop-for-page substitution.

A page image is replaced by its crop only when the localization is confident
enough (``confidence >= 0.5``) and the crop scores strictly higher against the
query than the page it came from. Manual regions skip the localization model
and carry confidence 1.0.

Manual regions file format::

    {"<question_id>": [{"doc_id": "...", "page_no": 3, "bbox": [x1, y1, x2, y2]}, ...]}
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, Sequence

from PIL import Image, UnidentifiedImageError

from .errors import BackendError, IngestError, InvalidInputError, LocalizationFailedError
from .gateway import ChatRequest, Gateway, ImagePart
from .qa.parsing import load_json
from .qa.templates import TemplateSet, default_templates
from .qa.types import CandidatePage
from .retrieval.embedding import MultiVectorEmbedding
from .retrieval.scoring import late_interaction_score

logger = logging.getLogger(__name__)

MIN_EXTENT = 0.05
MIN_CROP_PX = 32
CONFIDENCE_GATE = 0.5


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


@dataclass(frozen=True)
class AnswerRegion:
    bbox: tuple[float, float, float, float]
    confidence: float
    source: Literal["model", "manual"] = "model"

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not all(0.0 <= v <= 1.0 for v in self.bbox):
            raise InvalidInputError(f"bbox coordinates must lie in [0, 1], got {self.bbox}")
        if not (x1 < x2 and y1 < y2):
            raise InvalidInputError(f"bbox must have x1 < x2 and y1 < y2, got {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(f"confidence must lie in [0, 1], got {self.confidence}")

    @classmethod
    def from_coords(cls, coords: Sequence, confidence, source: str = "model") -> "AnswerRegion":
        """Clamp into the unit square and reject boxes thinner than 0.05 on either axis."""
        try:
            vals = [float(v) for v in coords]
            conf = float(confidence)
        except (TypeError, ValueError):
            raise LocalizationFailedError(f"non-numeric region {coords!r} / confidence {confidence!r}") from None
        if len(vals) != 4 or not all(math.isfinite(v) for v in vals + [conf]):
            raise LocalizationFailedError(f"region must be four finite numbers, got {coords!r}")
        x1, y1, x2, y2 = (_clamp01(v) for v in vals)
        if x2 - x1 < MIN_EXTENT or y2 - y1 < MIN_EXTENT:
            raise LocalizationFailedError(f"degenerate region {[x1, y1, x2, y2]}")
        return cls((x1, y1, x2, y2), _clamp01(conf), source)

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "confidence": self.confidence, "source": self.source}


def parse_region_reply(raw: str) -> AnswerRegion:
    obj, _ = load_json(raw, dict)
    if obj is None:
        raise LocalizationFailedError("region reply contains no JSON object")
    coords = next((obj[k] for k in ("bbox", "coordinates", "box") if k in obj), None)
    conf = next((obj[k] for k in ("confidence", "alpha", "α") if k in obj), None)
    if not isinstance(coords, list) or conf is None or isinstance(conf, bool):
        raise LocalizationFailedError("region reply lacks bbox or confidence")
    return AnswerRegion.from_coords(coords, conf, "model")


def build_region_request(image: ImagePart, question: str, templates: TemplateSet | None = None) -> ChatRequest:
    tpl = (templates or default_templates()).get("region", "english")
    return ChatRequest(tpl.system, [image, tpl.render(question=question)], "json", stage="region")


def locate_answer_region(
    gateway: Gateway, image: ImagePart, question: str, templates: TemplateSet | None = None
) -> AnswerRegion:
    response = gateway.chat(build_region_request(image, question, templates))
    return parse_region_reply(response.text)


def open_image(image) -> Image.Image:
    try:
        if isinstance(image, Image.Image):
            return image
        if isinstance(image, ImagePart):
            im = Image.open(io.BytesIO(image.png_bytes()))
        else:
            im = Image.open(Path(image))
        im.load()
        return im
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestError(f"cannot decode image {getattr(image, 'ref', image)!r}: {exc}") from exc


def crop_box(width: int, height: int, region: AnswerRegion) -> tuple[int, int, int, int]:
    """Pixel box ``(left, top, right, bottom)``, each coordinate rounded half-up."""
    x1, y1, x2, y2 = region.bbox
    return (
        math.floor(x1 * width + 0.5),
        math.floor(y1 * height + 0.5),
        math.floor(x2 * width + 0.5),
        math.floor(y2 * height + 0.5),
    )


def crop_region(image, region: AnswerRegion) -> Image.Image:
    """Return a new image cut to ``region``; the input is not modified."""
    im = open_image(image)
    left, top, right, bottom = crop_box(im.width, im.height, region)
    if right - left < MIN_CROP_PX or bottom - top < MIN_CROP_PX:
        raise LocalizationFailedError(
            f"crop of {right - left}x{bottom - top} px is below the {MIN_CROP_PX} px minimum"
        )
    return im.crop((left, top, right, bottom))


def crop_part(page_image: ImagePart, region: AnswerRegion, crop_dir: Path | None = None) -> ImagePart:
    cropped = crop_region(page_image, region)
    buf = io.BytesIO()
    cropped.save(buf, format="PNG")
    ref = f"{page_image.ref}#crop=" + ",".join(f"{v:.4f}" for v in region.bbox)
    path = None
    if crop_dir is not None:
        crop_dir.mkdir(parents=True, exist_ok=True)
        path = crop_dir / (ref.replace("#", "_").replace("=", "_").replace(",", "_") + ".png")
        path.write_bytes(buf.getvalue())
        path = str(path)
    return ImagePart(ref=ref, path=path, png=buf.getvalue())


@dataclass
class RefineResult:
    pages: list[CandidatePage]
    events: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pages": [p.to_dict() for p in self.pages], "events": self.events}


def refine_retrieval_set(
    region_gateway: Gateway | None,
    embed_gateway: Gateway,
    query_embedding: MultiVectorEmbedding,
    pages: Sequence[CandidatePage],
    question: str,
    manual_regions: Mapping[tuple[str, int], Sequence[float]] | None = None,
    templates: TemplateSet | None = None,
    crop_dir: Path | None = None,
) -> RefineResult:
    """Try to swap each page for a tighter crop; output has the same pages in the same order.

    With ``manual_regions`` (keyed by ``(doc_id, page_no)``) the model is not
    consulted and pages without a manual box are left alone.
    """
    if not 1 <= len(pages) <= 3:
        raise InvalidInputError(f"expected 1..3 pages, got {len(pages)}")
    out, events = [], []
    for page in sorted(pages, key=lambda p: p.rank):
        key = (page.doc_id, page.page_no)
        ev = {"doc_id": page.doc_id, "page_no": page.page_no}
        try:
            if manual_regions is not None:
                if key not in manual_regions:
                    events.append({**ev, "action": "kept", "reason": "no manual region"})
                    out.append(page)
                    continue
                region = AnswerRegion.from_coords(manual_regions[key], 1.0, "manual")
            else:
                region = locate_answer_region(region_gateway, page.image, question, templates)
            ev["region"] = region.to_dict()
            if region.confidence < CONFIDENCE_GATE:
                events.append({**ev, "action": "kept", "reason": "low confidence"})
                out.append(page)
                continue
            part = crop_part(page.image, region, crop_dir)
            crop_score = late_interaction_score(query_embedding, embed_gateway.embed_multivector(part))
        except LocalizationFailedError as exc:
            events.append({**ev, "action": "kept", "reason": f"localization failed: {exc}"})
            out.append(page)
            continue
        except (BackendError, IngestError) as exc:
            logger.warning("refinement of %s page %d skipped: %s", page.doc_id, page.page_no, exc)
            events.append({**ev, "action": "kept", "reason": f"error: {exc}"})
            out.append(page)
            continue
        ev["crop_score"] = crop_score
        ev["original_score"] = page.score
        if crop_score > page.score:
            out.append(page.with_crop(part, crop_score, region))
            events.append({**ev, "action": "replaced"})
        else:
            out.append(page)
            events.append({**ev, "action": "kept", "reason": "no strict improvement"})
    return RefineResult(out, events)


def load_manual_regions(path) -> dict[str, dict[tuple[str, int], list[float]]]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise InvalidInputError("manual regions file must be a JSON object keyed by question_id")
    out = {}
    for qid, items in raw.items():
        table = {}
        for item in items:
            bbox = item["bbox"]
            if len(bbox) != 4:
                raise InvalidInputError(f"question {qid}: bbox must have four values")
            table[(str(item["doc_id"]), int(item["page_no"]))] = [float(v) for v in bbox]
        out[str(qid)] = table
    return out
