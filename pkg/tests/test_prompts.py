import pytest
from hypothesis import given, settings, strategies as st

from crag.corpus import Document
from crag.prompts import (
    FAMILIES,
    PromptError,
    PromptKit,
    format_document,
    load_templates,
    reference_block_of,
    render_baseline,
    render_crag,
    render_rag,
    scan_doc_slots,
)

from conftest import GOLDEN

QUESTION = "Who wrote the novel {documents} in 1851?"
DOCS = [
    Document("md", "Moby-Dick", "Moby-Dick is an 1851 novel by Herman Melville."),
    Document("hm", "Herman Melville", "Melville was an American novelist.\n\n  He wrote {question} style prose."),
]


@pytest.mark.parametrize("family", FAMILIES)
def test_matches_golden_rendering(family):
    prompt = PromptKit().render(family, QUESTION, DOCS)
    assert prompt.text == (GOLDEN / f"{family}.txt").read_text(encoding="utf-8")
    assert prompt.family == family


def test_crag_prompt_carries_the_four_stage_instructions():
    text = render_crag("q?", DOCS).text
    for marker in ("#Role", "#Task", "#Reference Documents", "#Requirements", "#Question"):
        assert f"\n{marker}\n" in f"\n{text}\n"
    assert "Do not forget any documents, and be as precise as possible." in text
    assert "“#Explanation:”" in text and "“#Answer:”" in text
    assert [line[:2] for line in text.splitlines() if line[:2] in ("1)", "2)", "3)", "4)")] == ["1)", "2)", "3)", "4)"]


def test_rag_and_baseline_ask_for_answer_marker_only():
    for text in (render_rag("q?", DOCS).text, render_baseline("q?").text):
        assert "“#Answer:”" in text
        assert "#Explanation" not in text
    assert "#Reference Documents\n" not in render_baseline("q?").text


def test_documents_appear_in_retrieval_order_with_one_based_slots():
    prompt = render_crag("q?", DOCS)
    assert prompt.doc_order == ("md", "hm")
    slots = scan_doc_slots(prompt.text)
    assert [n for n, _ in slots] == [1, 2]
    assert slots[0][1] == format_document(DOCS[0])


def test_slot_text_inside_content_is_not_substituted():
    text = render_rag(QUESTION, DOCS).text
    assert "{question} style prose" in text
    assert text.rstrip().endswith("Who wrote the novel {documents} in 1851?")


def test_long_documents_are_capped():
    doc = Document("x", "T", "word " * 1000)
    assert len(format_document(doc, 1500)) <= 1500
    assert len(PromptKit(doc_char_cap=40).reference_block([doc])) <= len("[1] ") + 40
    assert format_document(doc, None).endswith("word")


def test_rejects_empty_question_and_missing_docs():
    with pytest.raises(PromptError):
        render_baseline("  ")
    with pytest.raises(PromptError):
        render_crag("q?", [])
    with pytest.raises(PromptError):
        PromptKit().render("other", "q?", DOCS)


def test_template_override_directory(tmp_path):
    (tmp_path / "rag.txt").write_text("Q: {question}\nD:\n{documents}\n", encoding="utf-8")
    kit = PromptKit(tmp_path)
    assert kit.render_rag("why?", DOCS[:1]).text == "Q: why?\nD:\n[1] Moby-Dick: Moby-Dick is an 1851 novel by Herman Melville.\n"
    assert kit.templates["crag"] == load_templates()["crag"]


def test_template_with_wrong_slots_is_rejected(tmp_path):
    (tmp_path / "crag.txt").write_text("{question} only\n", encoding="utf-8")
    with pytest.raises(PromptError):
        PromptKit(tmp_path)
    with pytest.raises(PromptError):
        PromptKit(tmp_path / "missing")


text_st = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=80).filter(lambda s: s.strip())


@settings(max_examples=150, deadline=None)
@given(bodies=st.lists(text_st, min_size=1, max_size=8), question=text_st)
def test_doc_slots_round_trip(bodies, question):
    docs = [Document(f"d{i}", "", b) for i, b in enumerate(bodies)]
    prompt = render_crag(question, docs)
    slots = scan_doc_slots(prompt.text)
    assert [n for n, _ in slots] == list(range(1, len(docs) + 1))
    assert [c for _, c in slots] == [format_document(d) for d in docs]
    assert reference_block_of(prompt.text).count("\n") == len(docs) - 1
