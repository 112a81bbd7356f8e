import json
import random

import pytest

from crag.corpus import Document, Corpus, RetrievalConfig, build_index
from crag.demos import (
    DEFAULT_TASK_CAPS,
    TRAINER_DEFAULTS,
    Demonstration,
    ExportError,
    FunnelStats,
    QaInstance,
    balance_and_cap,
    build_demonstration,
    corrupt_to_misleading,
    export_sft,
    filter_citation_coverage,
    filter_exact_match,
    funnel_report,
    generate_demonstrations,
    load_dataset,
    read_demonstrations,
    write_demonstrations,
)
from crag.gateway import MockBackend, fingerprint
from crag.metrics import strict_match
from crag.prompts import render_crag
from crag.traces import parse_trace

from conftest import crag_trace


def world(n=10):
    """n questions, each with 6 documents that only it retrieves."""
    docs, items = [], []
    for i in range(n):
        for j in range(6):
            docs.append(Document(f"q{i}-d{j}", f"topic{i}", f"topic{i} fact{j} answer{i}"))
        items.append(QaInstance(f"q{i}", f"What about topic{i}?", (f"answer{i}",), "nq"))
    return Corpus(docs), items


def scripted(corpus, items, responses):
    index = build_index(corpus)
    script = {}
    for inst, response in zip(items, responses):
        docs = [corpus[d] for d in index.rank(inst.question, 5).doc_ids]
        script[fingerprint(render_crag(inst.question, docs))] = response
    return index, MockBackend(script, default="garbage")


def filtered(demos):
    return filter_citation_coverage(filter_exact_match(demos))


def test_sixty_percent_correct_seventy_percent_citing():
    corpus, items = world(10)
    responses = []
    for i, inst in enumerate(items):
        correct = i < 6
        full = i < 4  # 4 of 6 correct ones cite all five documents
        responses.append(crag_trace(answer=inst.gold_answers[0] if correct else "wrong", cite=None if full or not correct else [1, 2, 3]))
    index, backend = scripted(corpus, items, responses)
    demos = filtered(generate_demonstrations(items, index, backend))
    assert sum(d.stage1_pass for d in demos) == 6
    assert sum(d.stage2_pass for d in demos) == 4
    stats = funnel_report(demos)
    assert (stats.total, stats.stage1_survivors, stats.stage2_survivors, stats.used) == (10, 6, 4, 4)


def test_unparsed_completions_are_kept_and_flagged():
    corpus, items = world(3)
    index, backend = scripted(corpus, items, [crag_trace(answer="answer0"), "no markers at all"])
    demos = generate_demonstrations(items, index, backend)
    assert [d.parsed for d in demos] == [True, False, False]
    assert demos[1].error["stage"] == "answer"
    assert not any(d.stage1_pass for d in filtered(demos)[1:])


def test_stage_one_is_strict_and_stage_two_needs_every_document():
    inst = QaInstance("x", "q?", ("Paris",), "nq")
    order = tuple(f"d{i}" for i in range(5))
    loose = build_demonstration(inst, order, crag_trace(answer="It is Paris"))
    exact = build_demonstration(inst, order, crag_trace(answer="paris."))
    partial = build_demonstration(inst, order, crag_trace(answer="Paris", cite=[1, 2, 3, 4]))
    out = filtered([loose, exact, partial])
    assert [(d.stage1_pass, d.stage2_pass) for d in out] == [(False, False), (True, True), (True, False)]
    assert filter_citation_coverage(filter_exact_match([partial]), k=4)[0].stage2_pass


def test_demonstration_invariants():
    inst = QaInstance("x", "q?", ("a",), "nq")
    with pytest.raises(ValueError):
        Demonstration(inst, (), None, stage1_pass=False, stage2_pass=True)
    with pytest.raises(ValueError):
        Demonstration(inst, (), None, stage1_pass=True, provenance="misleading")


def test_fever_instances_need_a_known_label():
    with pytest.raises(ValueError):
        QaInstance("f", "claim", ("MAYBE",), "fever")


def _passing(task, n):
    order = tuple(f"d{i}" for i in range(5))
    gold = "SUPPORTS" if task == "fever" else "x"
    return [
        build_demonstration(QaInstance(f"{task}-{i}", "q?", (gold,), task), order, crag_trace(answer=gold))
        for i in range(n)
    ]


def test_balance_and_cap():
    demos = filtered(_passing("nq", 30) + _passing("fever", 5) + _passing("popqa", 12))
    used = balance_and_cap(demos, {"nq": 10, "fever": 8}, seed=3)
    counts = {t: sum(d.instance.task == t for d in used) for t in ("nq", "fever", "popqa")}
    assert counts == {"nq": 10, "fever": 5, "popqa": 12}
    positions = [demos.index(d) for d in used]
    assert positions == sorted(positions)
    assert used == balance_and_cap(demos, {"nq": 10, "fever": 8}, seed=3)
    assert used != balance_and_cap(demos, {"nq": 10, "fever": 8}, seed=4)


def test_default_caps_and_trainer_settings():
    assert DEFAULT_TASK_CAPS == {"nq": 515, "popqa": 500, "triviaqa": 500, "fever": 485}
    assert sum(DEFAULT_TASK_CAPS.values()) == 2000
    assert TRAINER_DEFAULTS == {
        "epochs": 3, "batch_size": 32, "learning_rate": 3e-5, "weight_decay": 0.001,
        "lr_scheduler": "cosine", "warmup_ratio": 0.03,
    }


def test_export_round_trip(tmp_path):
    corpus, items = world(4)
    index, backend = scripted(corpus, items, [crag_trace(answer=i.gold_answers[0], explanation=f"Because {i.id}.") for i in items])
    demos = filtered(generate_demonstrations(items, index, backend))
    summary = export_sft(demos, tmp_path / "sft.jsonl", corpus, student_model="llama-2-7b")
    records = [json.loads(line) for line in (tmp_path / "sft.jsonl").read_text().splitlines()]
    assert summary.records == len(records) == 4 and summary.forced == 0
    for rec, demo in zip(records, demos):
        trace = parse_trace(rec["target"], 5)
        assert (trace.explanation, trace.answer) == (demo.trace.explanation, demo.trace.answer)
        assert rec["target"].rstrip().splitlines()[-1].startswith("#Answer:")
        assert rec["input"] == render_crag(demo.instance.question, [corpus[d] for d in demo.doc_order]).text
        assert rec["meta"]["trainer_defaults"]["learning_rate"] == 3e-5
        assert rec["meta"]["student_model"] == "llama-2-7b"


def test_export_refuses_unfiltered_unless_forced(tmp_path):
    corpus, items = world(2)
    index, backend = scripted(corpus, items, [crag_trace(answer="nope")] * 2)
    demos = filtered(generate_demonstrations(items, index, backend))
    with pytest.raises(ExportError):
        export_sft(demos, tmp_path / "a.jsonl", corpus)
    assert export_sft(demos, tmp_path / "a.jsonl", corpus, force=True).forced == 2


def test_misleading_set_has_no_strict_correct_answers():
    demos = filtered(_passing("nq", 7) + _passing("fever", 3))
    bad = corrupt_to_misleading(demos, "misleading", seed=0)
    assert all(d.provenance == "misleading" for d in bad)
    assert not any(strict_match(d.trace.answer, d.instance.gold_answers) for d in bad)
    assert not any(d.stage1_pass for d in filter_exact_match(bad))


def test_misleading_borrows_answers_from_the_same_task():
    insts = [QaInstance(f"q{i}", "q?", (f"gold{i}",), "nq") for i in range(5)]
    order = tuple(f"d{i}" for i in range(5))
    demos = [build_demonstration(inst, order, crag_trace(answer=inst.gold_answers[0])) for inst in insts]
    bad = corrupt_to_misleading(demos, "misleading", seed=2)
    golds = {f"gold{i}" for i in range(5)}
    assert all(d.trace.answer in golds - set(d.instance.gold_answers) for d in bad)


def test_mixed_corrupts_exactly_half():
    demos = filtered(_passing("nq", 101))
    mixed = corrupt_to_misleading(demos, "mixed", seed=9)
    assert sum(d.provenance == "misleading" for d in mixed) == 50
    assert [d.instance.id for d in mixed] == [d.instance.id for d in demos]
    assert mixed == corrupt_to_misleading(demos, "mixed", seed=9)


def test_funnel_stats_are_monotone():
    with pytest.raises(ValueError):
        FunnelStats(10, 6, 7, 2)


def test_demonstrations_survive_jsonl(tmp_path):
    demos = filtered(_passing("nq", 3))
    write_demonstrations(demos, tmp_path / "d.jsonl", extra={"config_fingerprint": "abc"})
    assert read_demonstrations(tmp_path / "d.jsonl") == demos


def test_dataset_loader(tmp_path):
    p = tmp_path / "ds.jsonl"
    p.write_text('{"id": "1", "question": "q", "answers": "a", "task": "nq"}\n{"id": "1", "question": "q", "answers": ["a"], "task": "nq"}\n')
    with pytest.raises(ValueError, match=":2: duplicate"):
        load_dataset(p)
