"""Page filtering, two-stage sub-question decomposition, and answering."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from ..errors import InvalidInputError
from ..gateway import ChatRequest, Gateway
from .parsing import parse_decomposition, parse_page_selection, parse_structured_answer
from .templates import TemplateSet, default_templates
from .types import CandidatePage, DecompositionTrace, StructuredAnswer

logger = logging.getLogger(__name__)

N_OPTIONS = 10
MAX_PAGES = 3
_NONE_JA = "（なし）"


def render_options(options: Sequence[str]) -> str:
    return "\n".join(f"{i}. {opt}" for i, opt in enumerate(options, start=1))


def render_references(trace: DecompositionTrace | None) -> str:
    if trace is None or not trace.references:
        return _NONE_JA
    return "\n".join(f"- {r.text}" for r in trace.references)


def render_sub_qas(trace: DecompositionTrace | None) -> str:
    if trace is None:
        return _NONE_JA
    return "\n".join(f"Q{i}: {s.question}\nA{i}: {s.answer}" for i, s in enumerate(trace.sub_qas, start=1))


def _check_pages(pages: Sequence[CandidatePage]) -> list[CandidatePage]:
    if not 1 <= len(pages) <= MAX_PAGES:
        raise InvalidInputError(f"expected 1..{MAX_PAGES} pages, got {len(pages)}")
    return sorted(pages, key=lambda p: p.rank)


def _image_parts(pages: Sequence[CandidatePage], labelled: bool) -> list:
    parts = []
    for i, p in enumerate(pages, start=1):
        if labelled:
            parts.append(f"Page {i}:")
        parts.append(p.image)
    return parts


@dataclass(frozen=True)
class FilterResult:
    pages: tuple[CandidatePage, ...]
    fallback: bool
    raw_text: str

    def to_dict(self) -> dict:
        return {
            "kept": [[p.doc_id, p.page_no] for p in self.pages],
            "fallback": self.fallback,
            "raw_text": self.raw_text,
        }


def build_filter_request(question: str, pages: Sequence[CandidatePage], templates: TemplateSet | None = None) -> ChatRequest:
    tpl = (templates or default_templates()).get("filter", "english")
    body = tpl.render(question=question, n_pages=len(pages))
    return ChatRequest(tpl.system, [body, *_image_parts(pages, labelled=True)], "json", stage="filter")


def filter_pages(
    gateway: Gateway, question: str, pages: Sequence[CandidatePage], templates: TemplateSet | None = None
) -> FilterResult:
    """Keep the pages the filter model marks relevant.

    Never returns an empty set: if the reply names no valid page (or cannot be
    parsed at all) the rank-1 page is kept on its own.
    """
    pages = _check_pages(pages)
    response = gateway.chat(build_filter_request(question, pages, templates))
    picked = parse_page_selection(response.text, len(pages))
    if not picked:
        logger.info("filter reply named no valid page; keeping rank-1 page. reply=%r", response.text[:200])
        return FilterResult((pages[0],), True, response.text)
    return FilterResult(tuple(pages[i - 1] for i in picked), False, response.text)


def build_first_request(
    question: str,
    pages: Sequence[CandidatePage],
    language_mode: str = "bilingual",
    templates: TemplateSet | None = None,
) -> ChatRequest:
    tpl = (templates or default_templates()).get("first", language_mode)
    body = tpl.render(question=question)
    return ChatRequest(tpl.system, [*_image_parts(pages, labelled=False), body], "json", stage="decompose")


def decompose_first_step(
    gateway: Gateway,
    pages: Sequence[CandidatePage],
    question: str,
    language_mode: str = "bilingual",
    templates: TemplateSet | None = None,
) -> DecompositionTrace:
    """Ask for sub-questions, their answers and reference notes.

    Raises :class:`~lateqa.errors.DecompositionFailedError` when the reply has
    no usable sub-question; callers may continue without a trace.
    """
    pages = _check_pages(pages)
    response = gateway.chat(build_first_request(question, pages, language_mode, templates))
    return parse_decomposition(response.text)


def build_second_request(
    question: str,
    options: Sequence[str],
    pages: Sequence[CandidatePage],
    trace: DecompositionTrace | None = None,
    templates: TemplateSet | None = None,
) -> ChatRequest:
    tpl = (templates or default_templates()).get("second", "japanese")
    body = tpl.render(
        question=question,
        options=render_options(options),
        references=render_references(trace),
        sub_qas=render_sub_qas(trace),
    )
    return ChatRequest(tpl.system, [*_image_parts(pages, labelled=False), body], "json", stage="answer")


def answer_second_step(
    gateway: Gateway,
    pages: Sequence[CandidatePage],
    question: str,
    options: Sequence[str],
    trace: DecompositionTrace | None = None,
    templates: TemplateSet | None = None,
) -> StructuredAnswer:
    """Answer the ten-choice question. ``answer_index`` refers to ``options`` as given."""
    if len(options) != N_OPTIONS:
        raise InvalidInputError(f"expected exactly {N_OPTIONS} options, got {len(options)}")
    pages = _check_pages(pages)
    response = gateway.chat(build_second_request(question, options, pages, trace, templates))
    return parse_structured_answer(response.text, len(options), options)
