"""Lenient-but-honest parsing of model replies.

Every parser tries a strict ``json.loads`` first and falls back to a repair
pass (strip markdown fences, take the first balanced JSON value). Nothing here
guesses: when a reply does not map to exactly one valid value, it fails.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from typing import Iterator, Sequence

from ..errors import DecompositionFailedError, InvalidInputError
from .types import MAX_REFERENCES, MAX_SUB_QAS, DecompositionTrace, ReferenceNote, StructuredAnswer, SubQA

logger = logging.getLogger(__name__)

_FENCE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)
_LETTER = re.compile(r"\(?([A-Za-z])[).:]?")
_NUMBERED = re.compile(r"(\d+)\s*[.):]\s*(.*)", re.DOTALL)
_CLOSER = {"{": "}", "[": "]"}
_MAX_ATTEMPTS = 256


def strip_code_fences(text: str) -> str:
    blocks = _FENCE.findall(text)
    return "\n".join(blocks) if blocks else text


def iter_json_values(text: str, opener: str = "{") -> Iterator[object]:
    """Yield every balanced ``{...}`` (or ``[...]``) segment of ``text`` that parses as JSON."""
    closer = _CLOSER[opener]
    i = text.find(opener)
    attempts = 0
    while i != -1 and attempts < _MAX_ATTEMPTS:
        attempts += 1
        depth, in_str, esc, end = 0, False, False, -1
        for j in range(i, len(text)):
            c = text[j]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c in "{[":
                depth += 1
            elif c in "}]":
                depth -= 1
                if depth == 0:
                    end = j
                    break
        if end != -1 and text[end] == closer:
            try:
                yield json.loads(text[i:end + 1])
                i = text.find(opener, end + 1)
                continue
            except ValueError:
                pass
        i = text.find(opener, i + 1)


def load_json(raw: str, kind: type) -> tuple[object | None, bool]:
    """Return ``(value, strict)`` where ``strict`` means the whole reply was valid JSON of ``kind``."""
    try:
        value = json.loads(raw)
    except ValueError:
        pass
    else:
        if isinstance(value, kind):
            return value, True
    opener = "{" if kind is dict else "["
    for candidate in (strip_code_fences(raw), raw):
        for value in iter_json_values(candidate, opener):
            if isinstance(value, kind):
                return value, False
    return None, False


def coerce_option(value, n_options: int, options: Sequence[str] | None = None) -> tuple[int | None, bool]:
    """Map an ``answer`` field to a 1-based option index.

    Returns ``(index, exact)``; ``exact`` is true only for a plain integer or
    ASCII digit string. Anything ambiguous or out of range gives ``None``.
    """
    if isinstance(value, bool) or value is None:
        return None, False
    if isinstance(value, int):
        return (value, True) if 1 <= value <= n_options else (None, False)
    if isinstance(value, float):
        if value.is_integer() and 1 <= value <= n_options:
            return int(value), False
        return None, False
    if not isinstance(value, str):
        return None, False

    s = value.strip()
    if s.isascii() and s.isdigit():
        n = int(s)
        return (n, True) if 1 <= n <= n_options else (None, False)
    s = unicodedata.normalize("NFKC", s).strip()
    if s.isdigit():
        n = int(s)
        return (n, False) if 1 <= n <= n_options else (None, False)

    found = set()
    if options is not None:
        found.update(i for i, opt in enumerate(options, start=1) if opt.strip() == s)
    m = _LETTER.fullmatch(s)
    if m:
        n = ord(m.group(1).upper()) - ord("A") + 1
        if n <= n_options:
            found.add(n)
    m = _NUMBERED.fullmatch(s)
    if m:
        n, rest = int(m.group(1)), m.group(2).strip()
        if 1 <= n <= n_options and (not rest or (options is not None and options[n - 1].strip() == rest)):
            found.add(n)
    if len(found) == 1:
        return found.pop(), False
    return None, False


def parse_structured_answer(raw: str, n_options: int, options: Sequence[str] | None = None) -> StructuredAnswer:
    """Parse a ``{"think": ..., "answer": ...}`` reply. Never raises on bad replies."""
    if n_options < 2:
        raise InvalidInputError(f"n_options must be >= 2, got {n_options}")
    obj, strict = load_json(raw, dict)
    if obj is None or "answer" not in obj:
        return StructuredAnswer("", None, raw, "failed")
    index, exact = coerce_option(obj["answer"], n_options, options)
    think = obj.get("think")
    if think is None:
        think = ""
    elif not isinstance(think, str):
        think = json.dumps(think, ensure_ascii=False)
        exact = False
    if index is None:
        return StructuredAnswer(think, None, raw, "failed")
    status = "clean" if strict and exact and think.strip() else "repaired"
    return StructuredAnswer(think, index, raw, status)


def parse_page_selection(raw: str, n_pages: int) -> list[int]:
    """Valid, de-duplicated page ranks from a JSON-array reply; ``[]`` when none."""
    arr, _ = load_json(raw, list)
    if arr is None:
        return []
    picked = set()
    for v in arr:
        if isinstance(v, bool):
            continue
        if isinstance(v, str) and v.strip().isascii() and v.strip().isdigit():
            v = int(v.strip())
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        if isinstance(v, int) and 1 <= v <= n_pages:
            picked.add(v)
    return sorted(picked)


def _first_key(obj: dict, *keys):
    for k in keys:
        if k in obj:
            return obj[k]
    return None


def _text(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return str(v)
    return ""


def parse_decomposition(raw: str) -> DecompositionTrace:
    obj, _ = load_json(raw, dict)
    if obj is None:
        raise DecompositionFailedError("decomposition reply contains no JSON object", raw)
    items = _first_key(obj, "sub_questions", "sub_qas", "subquestions")
    sub_qas = []
    for item in items if isinstance(items, list) else []:
        if not isinstance(item, dict):
            continue
        q = _text(_first_key(item, "question", "sub_question")).strip()
        a = _text(item.get("answer")).strip()
        if q and a:
            sub_qas.append(SubQA(q, a))
    if not sub_qas:
        raise DecompositionFailedError("decomposition reply has no usable sub-questions", raw)
    if len(sub_qas) > MAX_SUB_QAS:
        logger.warning("decomposition produced %d sub-questions; keeping the first %d", len(sub_qas), MAX_SUB_QAS)
        sub_qas = sub_qas[:MAX_SUB_QAS]

    refs_raw = _first_key(obj, "references", "reference")
    if isinstance(refs_raw, (str, dict)):
        refs_raw = [refs_raw]
    refs = []
    for r in refs_raw if isinstance(refs_raw, list) else []:
        t = _text(r.get("text") if isinstance(r, dict) else r).strip()
        if t:
            refs.append(ReferenceNote(t))
    if len(refs) > MAX_REFERENCES:
        logger.warning("decomposition produced %d references; keeping the first %d", len(refs), MAX_REFERENCES)
        refs = refs[:MAX_REFERENCES]
    return DecompositionTrace(tuple(sub_qas), tuple(refs), raw)
