"""Answer matching: strict equality, flexible containment and FEVER labels."""

from __future__ import annotations

import re
import unicodedata
from typing import Iterable

FEVER_LABELS = ("SUPPORTS", "REFUTES", "NOT ENOUGH INFO")

_WS_RE = re.compile(r"\s+")
_ARTICLE_RE = re.compile(r"^(?:a|an|the)\s+")
_APOSTROPHE_RE = re.compile("['\u2019]")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _collapse(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


def strict_normalize(text: str) -> str:
    """Lowercase, collapse whitespace, strip terminal punctuation. Nothing else."""
    text = _collapse(text.lower())
    while text and _is_punct(text[-1]):
        text = text[:-1].rstrip()
    return text


def strict_match(answer: str, gold_answers: Iterable[str]) -> bool:
    norm = strict_normalize(answer)
    if not norm:
        return False
    return any(norm == strict_normalize(g) for g in gold_answers)


def flexible_normalize(text: str) -> str:
    text = "".join(" " if _is_punct(ch) else ch for ch in text.lower())
    return _collapse(text)


def _normalize_gold(gold: str) -> str:
    norm = flexible_normalize(gold)
    return _ARTICLE_RE.sub("", norm)


def flexible_exact_match(prediction: str, gold_answers: Iterable[str]) -> bool:
    """True iff some normalized gold answer occurs inside the normalized prediction.

    Leading articles are dropped from gold answers only. Gold answers that
    normalize to nothing are ignored.
    """
    pred = flexible_normalize(prediction)
    for gold in gold_answers:
        g = _normalize_gold(gold)
        if g and g in pred:
            return True
    return False


_NEI_PHRASES = (
    "not enough info",
    "not enough information",
    "not enough evidence",
    "insufficient information",
    "insufficient evidence",
    "cannot be verified",
    "can not be verified",
)
_NEI_WORDS = {"nei", "unverifiable", "insufficient", "unknowable"}
_REFUTE_WORDS = {"refutes", "refute", "refuted", "refuting", "false", "no", "incorrect", "contradict", "contradicts", "contradicted"}
_SUPPORT_WORDS = {"supports", "support", "supported", "supporting", "true", "yes", "correct"}
# Apostrophes are removed before matching, so contractions appear without them.
_NEGATIONS = {"not", "no", "never", "neither", "nor", "cannot", "isnt", "doesnt", "dont", "wasnt", "arent", "didnt"}


def fever_label(prediction: str) -> str | None:
    """Map free text onto a FEVER label, or None when it is ambiguous or unmappable."""
    text = " " + flexible_normalize(_APOSTROPHE_RE.sub("", prediction)) + " "
    labels = set()
    for phrase in _NEI_PHRASES:
        padded = f" {phrase} "
        if padded in text:
            labels.add("NOT ENOUGH INFO")
            text = text.replace(padded, " ")
    words = text.split()
    for i, w in enumerate(words):
        if w in _SUPPORT_WORDS:
            negated = any(p in _NEGATIONS for p in words[max(0, i - 2) : i])
            # "not supported" is ambiguous between REFUTES and NOT ENOUGH INFO
            labels.add("AMBIGUOUS" if negated else "SUPPORTS")
        elif w in _REFUTE_WORDS:
            labels.add("REFUTES")
        elif w in _NEI_WORDS:
            labels.add("NOT ENOUGH INFO")
    if len(labels) != 1 or "AMBIGUOUS" in labels:
        return None
    return labels.pop()


def fever_match(prediction: str, gold_label: str) -> bool:
    if gold_label not in FEVER_LABELS:
        raise ValueError(f"unknown FEVER label {gold_label!r}")
    return fever_label(prediction) == gold_label
