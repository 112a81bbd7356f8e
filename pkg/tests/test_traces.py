import random

import pytest
from hypothesis import given, settings, strategies as st

from crag.metrics import flexible_exact_match
from crag.traces import (
    IRRELEVANT,
    RELEVANT,
    Analysis,
    CragTrace,
    Evidence,
    TraceParseError,
    cited_documents,
    classify_relevance,
    extract_answer,
    extract_partition,
    parse_trace,
    serialize_trace,
)

from conftest import FIXTURES, crag_trace


def test_worked_example_generation():
    trace = parse_trace((FIXTURES / "worked_example_crag.txt").read_text(encoding="utf-8"), 3)
    verdicts = {a.doc_index: a.verdict for a in trace.analyses}
    assert verdicts == {1: RELEVANT, 2: RELEVANT, 3: IRRELEVANT}
    assert [e.doc_index for e in trace.reference_evidence] == [1, 2, 3]
    assert trace.analyses[0].passage.startswith("The original start date was January 2002")
    assert trace.answer.startswith("*Catch Me If You Can* was made in early 2002")
    assert flexible_exact_match(trace.answer, ["2002"])
    assert trace.explanation.startswith("Document #1 provides the direct answer")
    part = extract_partition(trace)
    assert part.relevant == {1, 2} and part.irrelevant == {3} and part.warnings == ()


def test_minimal_inline_trace():
    trace = parse_trace("[1] relevant #Explanation: e #Answer: a", 1)
    assert trace.answer == "a" and trace.explanation == "e"
    assert trace.analyses[0].verdict == RELEVANT


def test_generated_trace_fields():
    trace = parse_trace(crag_trace(k=5, relevant=(1, 4)), 5)
    assert cited_documents(trace) == {1, 2, 3, 4, 5}
    assert [e.passage for e in trace.reference_evidence] == [f"passage {i}" for i in range(1, 6)]
    assert extract_partition(trace).relevant == {1, 4}
    assert trace.answer == "Paris"


@pytest.mark.parametrize(
    "text, stage",
    [
        ("[1] relevant #Explanation: because", "answer"),
        ("[1] relevant\n#Answer: x", "explanation"),
        ("[1] relevant #Answer: x #Explanation: late", "explanation"),
        ("[1] relevant #Explanation:   #Answer: x", "explanation"),
        ("[1] relevant #Explanation: e #Answer:   ", "answer"),
        ("#Explanation: nothing cited #Answer: x", "evidence"),
        ("#Reference Evidence:\n[9] \"p\"\n#Explanation: e\n#Answer: a", "evidence"),
        ("#Analysis:\n[7] Relevance: relevant\n#Explanation: e\n#Answer: a", "analysis"),
        ("#Analysis:\n[1] Passage claims: \"p\"\nRelevance: maybe\n#Explanation: e\n#Answer: a", "analysis"),
    ],
)
def test_errors_name_their_stage(text, stage):
    with pytest.raises(TraceParseError) as info:
        parse_trace(text, 5)
    assert info.value.stage == stage
    start, end = info.value.span
    assert 0 <= start <= end <= len(text)
    assert info.value.to_dict()["stage"] == stage


def test_last_answer_wins():
    text = crag_trace(answer="first") + "\n\n#Explanation: reconsidered.\n#Answer: second"
    assert parse_trace(text, 5).answer == "second"
    assert extract_answer("#Answer: a\n#Answer: b") == "b"


def test_answer_stops_at_next_marker():
    assert extract_answer("#Answer: Paris\n#Note: trailing") == "Paris"
    assert extract_answer("# Answer :  Lyon ") == "Lyon"


@pytest.mark.parametrize(
    "sentence, verdict",
    [
        ("Relevant, it names the capital.", RELEVANT),
        ("This is directly relevant.", RELEVANT),
        ("Helpful background.", RELEVANT),
        ("It supports the claim.", RELEVANT),
        ("Irrelevant to the question.", IRRELEVANT),
        ("Unrelated film.", IRRELEVANT),
        ("Not relevant here.", IRRELEVANT),
        ("This isn't relevant.", IRRELEVANT),
        ("It does not really help, not helpful at all.", IRRELEVANT),
        ("Partly; it gives context.", None),
    ],
)
def test_relevance_verdicts(sentence, verdict):
    assert classify_relevance(sentence) == verdict


def test_conflicting_verdicts_resolve_to_relevant_with_warning():
    trace = CragTrace(
        (Evidence(1, "p"),),
        (Analysis(1, "p", RELEVANT, "r"), Analysis(1, "p", IRRELEVANT, "r"), Analysis(2, "q", IRRELEVANT, "r")),
        "e",
        "a",
        "",
    )
    part = extract_partition(trace)
    assert part.relevant == {1} and part.irrelevant == {2}
    assert len(part.warnings) == 1


def test_serialize_round_trip_on_worked_example():
    trace = parse_trace((FIXTURES / "worked_example_crag.txt").read_text(encoding="utf-8"), 3)
    again = parse_trace(serialize_trace(trace), 3)
    assert again.explanation == trace.explanation
    assert again.answer == trace.answer
    assert [(a.doc_index, a.verdict) for a in again.analyses] == [(a.doc_index, a.verdict) for a in trace.analyses]
    assert serialize_trace(again) == serialize_trace(trace)


def test_dict_round_trip():
    trace = parse_trace(crag_trace(), 5)
    assert CragTrace.from_dict(trace.to_dict("q1")) == trace


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        parse_trace("x", 0)


SNIPPETS = [
    "#Reference Evidence:", "# Reference Documents:", "#Analysis:", "#Explanation:", "#Answer:", "# Answer :",
    "[1]", "[2]", "[3]", "[5]", "[0]", "[99]", "Passage claims:", "Relevance:", "relevant", "irrelevant",
    "not relevant", "**", "*", "\"", "“", "\n", " ", "Paris", "2002", "#", ":", "[", "]",
]


@settings(max_examples=400, deadline=None)
@given(st.lists(st.sampled_from(SNIPPETS) | st.text(max_size=12), max_size=40), st.integers(1, 6))
def test_parser_is_total(parts, k):
    text = "".join(parts)
    try:
        trace = parse_trace(text, k)
    except TraceParseError as exc:
        assert exc.stage in ("evidence", "analysis", "explanation", "answer")
        return
    assert trace.answer and trace.explanation
    assert all(1 <= i <= k for i in cited_documents(trace))


answers = st.text(st.characters(blacklist_categories=("Cs", "Cc")), min_size=1, max_size=30).filter(lambda s: s.strip())


@settings(max_examples=200, deadline=None)
@given(answer=answers, explanation=answers, k=st.integers(1, 5), seed=st.integers(0, 1000))
def test_parse_of_serialized_trace_is_stable(answer, explanation, k, seed):
    text = crag_trace(k=k, answer=answer, explanation=explanation, relevant=set(random.Random(seed).sample(range(1, k + 1), 1)))
    try:
        trace = parse_trace(text, k)
    except TraceParseError:
        return  # free text can contain markers of its own
    again = parse_trace(serialize_trace(trace), k)
    assert (again.explanation, again.answer) == (trace.explanation, trace.answer)
