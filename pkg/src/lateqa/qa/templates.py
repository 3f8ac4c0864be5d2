"""Prompt templates.

A template directory holds ``{stage}_{lang}.txt`` files (stage is one of
``first``, ``second``, ``filter``, ``region``; lang is ``en`` or ``ja``) and a
``VERSION`` file. Each template is UTF-8 text: the system prompt, a line
containing only ``---``, then the user body. Placeholders are ``{question}``,
``{options}``, ``{references}``, ``{sub_qas}`` and ``{n_pages}``; any other
braces are literal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal

from ..errors import ConfigError

DEFAULT_DIR = Path(__file__).with_name("prompts")

Stage = Literal["first", "second", "filter", "region"]
LanguageMode = Literal["english", "japanese", "bilingual"]

PLACEHOLDERS = ("question", "options", "references", "sub_qas", "n_pages")
REQUIRED = {
    "first": {"question"},
    "second": {"question", "options", "references", "sub_qas"},
    "filter": {"question", "n_pages"},
    "region": {"question"},
}
_PLACEHOLDER = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")
_LANG_FILES = {"english": ("en",), "japanese": ("ja",), "bilingual": ("en", "ja")}


@dataclass(frozen=True)
class PromptTemplate:
    stage: str
    language_mode: str
    system: str
    body: str
    version: str = ""

    def __post_init__(self):
        if self.stage not in REQUIRED:
            raise ConfigError(f"unknown template stage {self.stage!r}")
        present = set(_PLACEHOLDER.findall(self.body))
        missing = REQUIRED[self.stage] - present
        if missing:
            raise ConfigError(f"{self.stage} template is missing placeholders {sorted(missing)}")

    def render(self, **values) -> str:
        def sub(m):
            key = m.group(1)
            if key not in values:
                raise ConfigError(f"no value supplied for placeholder {{{key}}}")
            return str(values[key])

        return _PLACEHOLDER.sub(sub, self.body)


def _split(text: str, path: Path) -> tuple[str, str]:
    lines = text.splitlines()
    try:
        cut = lines.index("---")
    except ValueError:
        raise ConfigError(f"{path} has no '---' line separating system prompt and body") from None
    return "\n".join(lines[:cut]).strip(), "\n".join(lines[cut + 1:]).strip()


class TemplateSet:
    def __init__(self, directory: Path | str | None = None):
        self.directory = Path(directory) if directory else DEFAULT_DIR
        version_file = self.directory / "VERSION"
        self.version = version_file.read_text().strip() if version_file.exists() else ""

    def get(self, stage: str, language_mode: str) -> PromptTemplate:
        return _load(self.directory, stage, language_mode, self.version)


@lru_cache(maxsize=64)
def _load(directory: Path, stage: str, language_mode: str, version: str) -> PromptTemplate:
    if language_mode not in _LANG_FILES:
        raise ConfigError(f"unknown language mode {language_mode!r}")
    systems, bodies = [], []
    for lang in _LANG_FILES[language_mode]:
        path = directory / f"{stage}_{lang}.txt"
        if not path.exists():
            raise ConfigError(f"template not found: {path}")
        system, body = _split(path.read_text(encoding="utf-8"), path)
        systems.append(system)
        bodies.append(body)
    # bilingual: English block first, then Japanese
    return PromptTemplate(stage, language_mode, "\n\n".join(systems), "\n\n".join(bodies), version)


@lru_cache(maxsize=1)
def default_templates() -> TemplateSet:
    return TemplateSet()
