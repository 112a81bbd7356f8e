"""Parsing of four-stage contrastive traces.

A trace is free text with up to four marked sections, in this order::

    #Reference Evidence:      (``#Reference Documents`` is accepted too)
    [1] "passage ..."
    #Analysis:
    [1] Passage claims: "..." Relevance: this is relevant because ...
    #Explanation: one consolidated contrastive rationale
    #Answer: short answer

Only ``#Explanation:`` and ``#Answer:`` are mandatory. When there is no
``#Analysis`` header, whatever precedes the explanation (after the evidence
block, if any) is read as the analysis. Whitespace after ``#`` is tolerated,
so ``# Answer:`` works as well.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

RELEVANT = "relevant"
IRRELEVANT = "irrelevant"

_EVIDENCE_RE = re.compile(r"#[ \t]*Reference[ \t]+(?:Evidence|Documents)[ \t]*:?", re.IGNORECASE)
_ANALYSIS_RE = re.compile(r"#[ \t]*Analysis[ \t]*:?", re.IGNORECASE)
_EXPLANATION_RE = re.compile(r"#[ \t]*Explanation[ \t]*:", re.IGNORECASE)
_ANSWER_RE = re.compile(r"#[ \t]*Answer[ \t]*:", re.IGNORECASE)
# Anything that looks like a section header ends the answer.
_ANY_MARKER_RE = re.compile(
    r"#[ \t]*[A-Za-z][A-Za-z \t]{0,40}?:|^[ \t]*#[ \t]*[A-Za-z][A-Za-z \t]{0,40}$",
    re.MULTILINE,
)

_LINE_ENTRY_RE = re.compile(r"^[ \t]*(?:[-*•][ \t]*)?\[(\d+)\][ \t]*:?", re.MULTILINE)
_INLINE_ENTRY_RE = re.compile(r"\[(\d+)\][ \t]*:?")
_PASSAGE_LABEL_RE = re.compile(r"passage[ \t]+claims[ \t]*:?", re.IGNORECASE)
_RELEVANCE_LABEL_RE = re.compile(r"relevance[ \t]*:", re.IGNORECASE)
_WORD_RE = re.compile(r"[a-z]+(?:'[a-z]+)?")

_POSITIVE = {"relevant", "helpful", "supports"}
_NEGATIONS = {"not", "no", "never", "neither", "nor", "without", "hardly", "barely", "cannot"}
_NEGATIVE_WORDS = {"irrelevant", "unrelated"}
_NEGATION_WINDOW = 3


@dataclass(frozen=True)
class Evidence:
    doc_index: int
    passage: str


@dataclass(frozen=True)
class Analysis:
    doc_index: int
    passage: str
    verdict: str
    rationale: str


@dataclass(frozen=True)
class CragTrace:
    reference_evidence: tuple[Evidence, ...]
    analyses: tuple[Analysis, ...]
    explanation: str
    answer: str
    raw: str

    def to_dict(self, question_id: str | None = None) -> dict:
        return {
            "question_id": question_id,
            "reference_evidence": [{"doc_index": e.doc_index, "passage": e.passage} for e in self.reference_evidence],
            "analyses": [
                {"doc_index": a.doc_index, "passage": a.passage, "verdict": a.verdict, "rationale": a.rationale}
                for a in self.analyses
            ],
            "explanation": self.explanation,
            "answer": self.answer,
            "raw": self.raw,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CragTrace":
        return cls(
            tuple(Evidence(int(e["doc_index"]), e["passage"]) for e in data["reference_evidence"]),
            tuple(
                Analysis(int(a["doc_index"]), a["passage"], a["verdict"], a["rationale"]) for a in data["analyses"]
            ),
            data["explanation"],
            data["answer"],
            data["raw"],
        )


@dataclass(frozen=True)
class ContrastivePartition:
    relevant: frozenset[int]
    irrelevant: frozenset[int]
    warnings: tuple[str, ...] = field(default=(), compare=False)


class TraceParseError(ValueError):
    """A completion that does not follow the trace format.

    ``stage`` is one of ``evidence``, ``analysis``, ``explanation``, ``answer``;
    ``span`` is a ``(start, end)`` character range in the raw text.
    """

    def __init__(self, stage: str, message: str, span: tuple[int, int]):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message
        self.span = span

    def to_dict(self) -> dict:
        return {"stage": self.stage, "message": self.message, "span": list(self.span)}


def _strip_section(text: str) -> str:
    """Trim whitespace and any markdown emphasis wrapping the whole text."""
    text = text.strip()
    changed = True
    while changed:
        changed = False
        for wrap in ("**", "__", "*", "_"):
            if len(text) > 2 * len(wrap) and text.startswith(wrap) and text.endswith(wrap):
                text = text[len(wrap) : -len(wrap)].strip()
                changed = True
                break
    return text


def extract_answer(completion: str) -> str:
    """Text after the last ``#Answer:`` marker, cut at the next section marker."""
    matches = list(_ANSWER_RE.finditer(completion))
    if not matches:
        raise TraceParseError("answer", "no #Answer: marker", (0, len(completion)))
    start = matches[-1].end()
    tail = completion[start:]
    nxt = _ANY_MARKER_RE.search(tail)
    if nxt is not None:
        tail = tail[: nxt.start()]
    return tail.strip()


def _split_entries(region: str, offset: int) -> list[tuple[int, str, int]]:
    """``(doc_index, entry text, absolute offset)`` for each ``[n]``-led entry."""
    marks = list(_LINE_ENTRY_RE.finditer(region))
    if not marks:
        marks = list(_INLINE_ENTRY_RE.finditer(region))
    entries = []
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(region)
        entries.append((int(m.group(1)), region[m.end() : end].strip(), offset + m.start()))
    return entries


def _unquote(text: str) -> str:
    text = text.strip()
    for open_q, close_q in (('"', '"'), ("“", "”")):
        first = text.find(open_q)
        last = text.rfind(close_q)
        if first != -1 and last > first:
            return text[first + 1 : last]
    return text


def classify_relevance(sentence: str) -> str | None:
    """``relevant``, ``irrelevant`` or None when the sentence commits to neither.

    A positive cue (relevant/helpful/supports) counts unless a negation sits
    within the three preceding words; a negated cue reads as irrelevant.
    """
    words = _WORD_RE.findall(sentence.lower())
    negated = False
    for i, word in enumerate(words):
        if word in _POSITIVE:
            window = words[max(0, i - _NEGATION_WINDOW) : i]
            if any(w in _NEGATIONS or w.endswith("n't") for w in window):
                negated = True
            else:
                return RELEVANT
    if negated or any(w in _NEGATIVE_WORDS for w in words):
        return IRRELEVANT
    return None


def _parse_analysis_entry(text: str) -> tuple[str, str, str | None]:
    """Split an analysis entry into passage, rationale and verdict."""
    rel = _RELEVANCE_LABEL_RE.search(text)
    if rel is not None:
        head, rationale = text[: rel.start()], text[rel.end() :]
    else:
        head, rationale = "", text
    label = _PASSAGE_LABEL_RE.search(head)
    passage = _unquote(head[label.end() :] if label else head)
    rationale = _strip_section(rationale)
    return passage.strip(), rationale, classify_relevance(rationale)


def parse_trace(completion: str, k: int) -> CragTrace:
    """Parse a completion into a :class:`CragTrace`, or raise :class:`TraceParseError`.

    Document indexes must fall within ``1..k``. The last ``#Answer:`` wins and
    must be preceded by an ``#Explanation:``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(completion)

    answers = list(_ANSWER_RE.finditer(completion))
    if not answers:
        raise TraceParseError("answer", "no #Answer: marker", (0, n))
    answer_mark = answers[-1]

    explanations = [m for m in _EXPLANATION_RE.finditer(completion) if m.start() < answer_mark.start()]
    if not explanations:
        later = _EXPLANATION_RE.search(completion, answer_mark.end())
        if later is not None:
            raise TraceParseError("explanation", "#Explanation: appears after #Answer:", (later.start(), later.end()))
        raise TraceParseError("explanation", "no #Explanation: marker", (0, answer_mark.start()))
    expl_mark = explanations[-1]

    explanation_end = answer_mark.start()
    for m in _ANY_MARKER_RE.finditer(completion, expl_mark.end(), answer_mark.start()):
        explanation_end = m.start()
        break
    explanation = _strip_section(completion[expl_mark.end() : explanation_end])
    if not explanation:
        raise TraceParseError("explanation", "explanation is empty", (expl_mark.start(), explanation_end))

    answer = extract_answer(completion[answer_mark.start() :])
    answer = _strip_section(answer)
    if not answer:
        raise TraceParseError("answer", "answer is empty", (answer_mark.start(), n))

    body_end = expl_mark.start()
    ev_mark = _EVIDENCE_RE.search(completion, 0, body_end)
    an_mark = _ANALYSIS_RE.search(completion, ev_mark.end() if ev_mark else 0, body_end)

    evidence_region: tuple[int, int] | None = None
    if ev_mark is not None:
        evidence_region = (ev_mark.end(), an_mark.start() if an_mark else body_end)
    if an_mark is not None:
        analysis_region = (an_mark.end(), body_end)
    elif ev_mark is not None:
        analysis_region = None
    else:
        analysis_region = (0, body_end)

    evidence: list[Evidence] = []
    if evidence_region is not None:
        lo, hi = evidence_region
        for idx, text, pos in _split_entries(completion[lo:hi], lo):
            if not 1 <= idx <= k:
                raise TraceParseError("evidence", f"document [{idx}] outside 1..{k}", (pos, min(n, pos + len(str(idx)) + 2)))
            evidence.append(Evidence(idx, _unquote(text)))

    analyses: list[Analysis] = []
    if analysis_region is not None:
        lo, hi = analysis_region
        for idx, text, pos in _split_entries(completion[lo:hi], lo):
            if not 1 <= idx <= k:
                raise TraceParseError("analysis", f"document [{idx}] outside 1..{k}", (pos, min(n, pos + len(str(idx)) + 2)))
            passage, rationale, verdict = _parse_analysis_entry(text)
            if verdict is None:
                raise TraceParseError("analysis", f"no relevance verdict for document [{idx}]", (pos, min(n, pos + len(text) + 3)))
            analyses.append(Analysis(idx, passage, verdict, rationale))

    if not evidence and not analyses:
        raise TraceParseError("evidence", "no document is cited before the explanation", (0, body_end))

    return CragTrace(tuple(evidence), tuple(analyses), explanation, answer, completion)


def extract_partition(trace: CragTrace) -> ContrastivePartition:
    """Split analysed documents into relevant and irrelevant sets.

    A document judged both ways is placed in ``relevant`` and reported in
    ``warnings``.
    """
    verdicts: dict[int, set[str]] = {}
    for a in trace.analyses:
        verdicts.setdefault(a.doc_index, set()).add(a.verdict)
    relevant, irrelevant, warnings = set(), set(), []
    for idx in sorted(verdicts):
        seen = verdicts[idx]
        if RELEVANT in seen:
            relevant.add(idx)
            if IRRELEVANT in seen:
                warnings.append(f"document [{idx}] has conflicting verdicts; kept as relevant")
        else:
            irrelevant.add(idx)
    return ContrastivePartition(frozenset(relevant), frozenset(irrelevant), tuple(warnings))


def cited_documents(trace: CragTrace) -> set[int]:
    return {e.doc_index for e in trace.reference_evidence} | {a.doc_index for a in trace.analyses}


def serialize_trace(trace: CragTrace) -> str:
    """Render the structured stages back to text, in evidence/analysis/explanation/answer order."""
    parts = []
    if trace.reference_evidence:
        lines = [f'[{e.doc_index}] "{e.passage}"' for e in trace.reference_evidence]
        parts.append("#Reference Evidence:\n" + "\n".join(lines))
    if trace.analyses:
        lines = [f'[{a.doc_index}] Passage claims: "{a.passage}"\nRelevance: {a.rationale}' for a in trace.analyses]
        parts.append("#Analysis:\n" + "\n".join(lines))
    parts.append(f"#Explanation: {trace.explanation}")
    parts.append(f"#Answer: {trace.answer}")
    return "\n\n".join(parts)
