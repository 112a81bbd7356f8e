"""Baseline, RAG and C-RAG prompt rendering.

Templates live as plain-text assets next to this module; a directory with
files of the same names (``baseline.txt``, ``rag.txt``, ``crag.txt``) can
replace them. Slots are ``{question}`` and ``{documents}``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .corpus import Document

FAMILIES = ("baseline", "rag", "crag")
DEFAULT_DOC_CHAR_CAP = 1500

_SLOT_RE = re.compile(r"\{(question|documents)\}")
_WS_RE = re.compile(r"\s+")
_DOC_LINE_RE = re.compile(r"^\[(\d+)\] (.*)$")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class RenderedPrompt:
    family: str
    text: str
    doc_order: tuple[str, ...] = ()


def _load_builtin(family: str) -> str:
    return resources.files("crag").joinpath("templates", f"{family}.txt").read_text(encoding="utf-8")


def load_templates(directory: str | Path | None = None) -> dict[str, str]:
    """Built-in templates, with any same-named files in ``directory`` taking precedence."""
    templates = {family: _load_builtin(family) for family in FAMILIES}
    if directory is not None:
        directory = Path(directory)
        if not directory.is_dir():
            raise PromptError(f"template directory {directory} does not exist")
        for family in FAMILIES:
            candidate = directory / f"{family}.txt"
            if candidate.exists():
                templates[family] = candidate.read_text(encoding="utf-8")
    for family, text in templates.items():
        slots = set(_SLOT_RE.findall(text))
        needed = {"question"} if family == "baseline" else {"question", "documents"}
        if slots != needed:
            raise PromptError(f"{family} template must have slots {sorted(needed)}, found {sorted(slots)}")
    return templates


def format_document(doc: Document, char_cap: int | None = DEFAULT_DOC_CHAR_CAP) -> str:
    # One line per document keeps the [n] markers unambiguous.
    content = f"{doc.title}: {doc.body}" if doc.title else doc.body
    content = _WS_RE.sub(" ", content).strip()
    if char_cap is not None and len(content) > char_cap:
        content = content[:char_cap].rstrip()
    return content


class PromptKit:
    def __init__(self, template_dir: str | Path | None = None, doc_char_cap: int | None = DEFAULT_DOC_CHAR_CAP):
        self.templates = load_templates(template_dir)
        self.doc_char_cap = doc_char_cap

    def reference_block(self, docs: Sequence[Document]) -> str:
        return "\n".join(f"[{i}] {format_document(d, self.doc_char_cap)}" for i, d in enumerate(docs, start=1))

    def _fill(self, family: str, question: str, documents: str = "") -> str:
        values = {"question": question, "documents": documents}
        return _SLOT_RE.sub(lambda m: values[m.group(1)], self.templates[family])

    def render_baseline(self, question: str) -> RenderedPrompt:
        if not question.strip():
            raise PromptError("question is empty")
        return RenderedPrompt("baseline", self._fill("baseline", question))

    def _render_with_docs(self, family: str, question: str, docs: Sequence[Document]) -> RenderedPrompt:
        if not question.strip():
            raise PromptError("question is empty")
        if not docs:
            raise PromptError(f"{family} prompt needs at least one document")
        text = self._fill(family, question, self.reference_block(docs))
        return RenderedPrompt(family, text, tuple(d.id for d in docs))

    def render_rag(self, question: str, docs: Sequence[Document]) -> RenderedPrompt:
        return self._render_with_docs("rag", question, docs)

    def render_crag(self, question: str, docs: Sequence[Document]) -> RenderedPrompt:
        return self._render_with_docs("crag", question, docs)

    def render(self, family: str, question: str, docs: Sequence[Document] = ()) -> RenderedPrompt:
        if family == "baseline":
            return self.render_baseline(question)
        if family == "rag":
            return self.render_rag(question, docs)
        if family == "crag":
            return self.render_crag(question, docs)
        raise PromptError(f"unknown prompt family {family!r}")


_default_kit: PromptKit | None = None


def default_kit() -> PromptKit:
    global _default_kit
    if _default_kit is None:
        _default_kit = PromptKit()
    return _default_kit


def render_baseline(question: str) -> RenderedPrompt:
    return default_kit().render_baseline(question)


def render_rag(question: str, docs: Sequence[Document]) -> RenderedPrompt:
    return default_kit().render_rag(question, docs)


def render_crag(question: str, docs: Sequence[Document]) -> RenderedPrompt:
    return default_kit().render_crag(question, docs)


def reference_block_of(text: str) -> str:
    """The body of the ``#Reference Documents`` section of a rendered prompt."""
    lines = text.split("\n")
    try:
        start = lines.index("#Reference Documents") + 1
    except ValueError:
        return ""
    end = start
    while end < len(lines) and lines[end].strip() and not lines[end].startswith("#"):
        end += 1
    return "\n".join(lines[start:end])


def scan_doc_slots(text: str) -> list[tuple[int, str]]:
    """Recover ``(slot number, rendered content)`` pairs from a rendered prompt."""
    slots = []
    for line in reference_block_of(text).split("\n"):
        m = _DOC_LINE_RE.match(line)
        if m:
            slots.append((int(m.group(1)), m.group(2)))
    return slots
