"""Filter, decompose and answer over retrieved page images."""

from .parsing import coerce_option, parse_decomposition, parse_page_selection, parse_structured_answer
from .pipeline import (
    FilterResult,
    answer_second_step,
    build_filter_request,
    build_first_request,
    build_second_request,
    decompose_first_step,
    filter_pages,
    render_options,
)
from .templates import PromptTemplate, TemplateSet, default_templates
from .types import CandidatePage, DecompositionTrace, ReferenceNote, StructuredAnswer, SubQA

__all__ = [
    "CandidatePage",
    "DecompositionTrace",
    "FilterResult",
    "PromptTemplate",
    "ReferenceNote",
    "StructuredAnswer",
    "SubQA",
    "TemplateSet",
    "answer_second_step",
    "build_filter_request",
    "build_first_request",
    "build_second_request",
    "coerce_option",
    "decompose_first_step",
    "default_templates",
    "filter_pages",
    "parse_decomposition",
    "parse_page_selection",
    "parse_structured_answer",
    "render_options",
]
