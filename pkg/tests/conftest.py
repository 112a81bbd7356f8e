import json
from pathlib import Path

import pytest

from crag.corpus import Corpus, Document

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"
GOLDEN = Path(__file__).resolve().parent / "golden"


def make_corpus(texts):
    """Corpus from ``{id: body}`` with empty titles."""
    return Corpus(Document(doc_id, "", body) for doc_id, body in texts.items())


def crag_trace(k=5, answer="Paris", cite=None, relevant=(1,), explanation="Document [1] names the capital."):
    cite = list(range(1, k + 1)) if cite is None else cite
    lines = ["#Reference Evidence:"]
    lines += [f'[{i}] "passage {i}"' for i in cite]
    lines += ["", "#Analysis:"]
    for i in cite:
        verdict = "Relevant, it answers the question." if i in relevant else "Irrelevant, it is about something else."
        lines += [f'[{i}] Passage claims: "passage {i}"', f"Relevance: {verdict}"]
    lines += ["", f"#Explanation: {explanation}", "", f"#Answer: {answer}"]
    return "\n".join(lines)


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


@pytest.fixture
def small_corpus():
    return make_corpus({
        "d1": "Paris is the capital of France.",
        "d2": "Berlin is the capital of Germany.",
        "d3": "The Seine flows through Paris.",
        "d4": "Bananas are yellow.",
        "d5": "France borders Spain and Germany.",
        "d6": "Rome is the capital of Italy.",
    })


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
