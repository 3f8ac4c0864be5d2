from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Literal

from ..errors import InvalidInputError
from ..gateway.types import ImagePart
from ..retrieval.index import RetrievalHit

MAX_SUB_QAS = 8
MAX_REFERENCES = 8


@dataclass(frozen=True)
class SubQA:
    question: str
    answer: str

    def __post_init__(self):
        object.__setattr__(self, "question", self.question.strip())
        object.__setattr__(self, "answer", self.answer.strip())
        if not self.question or not self.answer:
            raise InvalidInputError("sub-question and answer must both be non-empty")


@dataclass(frozen=True)
class ReferenceNote:
    text: str

    def __post_init__(self):
        object.__setattr__(self, "text", self.text.strip())
        if not self.text:
            raise InvalidInputError("reference note must be non-empty")


@dataclass(frozen=True)
class DecompositionTrace:
    sub_qas: tuple[SubQA, ...]
    references: tuple[ReferenceNote, ...] = ()
    raw_model_text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sub_qas", tuple(self.sub_qas))
        object.__setattr__(self, "references", tuple(self.references))
        if not 1 <= len(self.sub_qas) <= MAX_SUB_QAS:
            raise InvalidInputError(f"a trace holds 1..{MAX_SUB_QAS} sub-questions, got {len(self.sub_qas)}")
        if len(self.references) > MAX_REFERENCES:
            raise InvalidInputError(f"a trace holds at most {MAX_REFERENCES} references")

    def to_dict(self) -> dict:
        return {
            "sub_qas": [{"question": s.question, "answer": s.answer} for s in self.sub_qas],
            "references": [r.text for r in self.references],
            "raw_model_text": self.raw_model_text,
        }


ParseStatus = Literal["clean", "repaired", "failed"]


@dataclass(frozen=True)
class StructuredAnswer:
    think: str
    answer_index: int | None
    raw_text: str
    parse_status: ParseStatus

    def __post_init__(self):
        if (self.answer_index is None) != (self.parse_status == "failed"):
            raise InvalidInputError("answer_index must be present exactly when parse_status is not 'failed'")
        if self.parse_status == "clean" and not self.think:
            raise InvalidInputError("a clean parse requires a non-empty think field")

    @property
    def abstained(self) -> bool:
        return self.answer_index is None

    def to_dict(self) -> dict:
        return {
            "think": self.think,
            "answer_index": self.answer_index,
            "parse_status": self.parse_status,
            "raw_text": self.raw_text,
        }


@dataclass(frozen=True)
class CandidatePage:
    """A retrieved page as it moves through filtering, refinement and answering."""

    hit: RetrievalHit
    image: ImagePart
    region: Any = None  # AnswerRegion once a crop has replaced the page image
    replaced: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def doc_id(self) -> str:
        return self.hit.doc_id

    @property
    def page_no(self) -> int:
        return self.hit.page_no

    @property
    def rank(self) -> int:
        return self.hit.rank

    @property
    def score(self) -> float:
        return self.hit.score

    def with_crop(self, image: ImagePart, score: float, region) -> "CandidatePage":
        return replace(self, hit=replace(self.hit, score=score), image=image, region=region, replaced=True)

    def to_dict(self) -> dict:
        d = self.hit.to_dict()
        d["image"] = self.image.ref
        d["replaced"] = self.replaced
        if self.region is not None:
            d["region"] = self.region.to_dict()
        return d
