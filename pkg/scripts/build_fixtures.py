"""Regenerate the checked-in fixtures under ``fixtures/``.

Everything here is seeded, so running it twice yields byte-identical files:

    python scripts/build_fixtures.py [--out fixtures]

``eval50/``  a 50-item question set (40 open-domain, 10 claims) with a synthetic
             corpus and a mock script whose correct/incorrect split is fixed by
             construction and recorded in ``expected.json``.
``annotation_funnel.jsonl.gz``  10,000 recorded teacher completions whose
             filter funnel is fixed by construction; counts in ``funnel_expected.json``.
"""

from __future__ import annotations

import argparse
import gzip
import io
import json
import random
from pathlib import Path

SEED = 20240917

_SYL = ["ka", "lo", "vem", "dar", "ith", "ur", "sel", "mo", "ran", "tev", "qua", "bri", "zol", "ney", "fa", "gor", "pel", "shi", "tam", "wex"]
_KINDS = ["bridge", "observatory", "canal", "lighthouse", "monastery", "railway", "theatre", "library", "fortress", "mill"]
_FILLER = [
    "The region is known for its mild winters and long agricultural history.",
    "Local records describe several renovations during the following decades.",
    "Visitors often arrive by the coastal road that runs along the valley.",
    "Historians disagree about the role of regional guilds in its upkeep.",
    "A small museum nearby displays tools and drawings from the period.",
]


def _name(rng: random.Random, used: set[str]) -> str:
    while True:
        name = "".join(rng.choice(_SYL) for _ in range(3)).capitalize()
        if name not in used:
            used.add(name)
            return name


def _jsonl(records) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def _trace(passages: list[str], relevant: set[int], answer: str | None, explanation: str, rng: random.Random,
           cite: list[int] | None = None) -> str:
    """A teacher-style trace with some formatting variety."""
    cite = cite if cite is not None else list(range(1, len(passages) + 1))
    ev_header = rng.choice(["#Reference Evidence:", "# Reference Documents:", "#Reference Evidence:"])
    an_header = rng.choice(["#Analysis:", "# Analysis:"])
    lines = [ev_header]
    for i in cite:
        lines.append(f'[{i}] "{passages[i - 1]}"')
    lines += ["", an_header]
    for i in cite:
        lines.append(f'[{i}] Passage claims: "{passages[i - 1]}"')
        if i in relevant:
            verdict = rng.choice(["Relevant, it states the fact asked about.", "**Relevant.** It answers the question directly."])
        else:
            verdict = rng.choice(["Irrelevant, it discusses a different subject.", "Not relevant to the question."])
        lines.append(f"Relevance: {verdict}")
    lines += ["", f"#Explanation: {explanation}"]
    if answer is not None:
        lines += ["", f"#Answer: {answer}"]
    return "\n".join(lines) + "\n"


def build_eval50(out: Path) -> None:
    from crag.corpus import BM25Index, Corpus, Document, RetrievalConfig, retrieve
    from crag.gateway import fingerprint
    from crag.prompts import PromptKit

    rng = random.Random(SEED)
    used: set[str] = set()
    docs: list[Document] = []
    items: list[dict] = []
    expected: dict[str, bool] = {}

    # 40 open-domain questions: 32 answered correctly, 8 not.
    # Each wrong case is a different kind of failure.
    wrong_kinds = {3: "other_year", 9: "other_year", 14: "off_by_one", 18: "no_marker", 22: "other_year",
                   27: "refusal", 31: "other_place", 36: "other_year"}
    for i in range(40):
        entity = _name(rng, used)
        kind = _KINDS[i % len(_KINDS)]
        year = str(rng.randint(1650, 1990))
        town = _name(rng, used)
        qid = f"nq-{i:03d}"
        if i % 4 == 1:
            question = f"In which town is the {entity} {kind} located?"
            gold = [town, f"{town} town"]
            right = rng.choice([f"The {entity} {kind} is in {town}.", town, f"It stands in {town.lower()}"])
        else:
            question = f"In what year was the {entity} {kind} completed?"
            gold = [year]
            right = rng.choice([year, f"The {entity} {kind} was completed in {year}.", f"{year}."])
        passages = [
            f"The {entity} {kind} was completed in {year} in the town of {town}.",
            f"{town} is a small town whose best known landmark is the {entity} {kind}.",
            f"Engineers who worked on the {entity} {kind} later built other {kind}s.",
            f"Paintings of the {entity} {kind} were popular in the nineteenth century.",
            f"The {entity} family name appears in several old registers.",
        ]
        for j, text in enumerate(passages):
            docs.append(Document(f"{qid}-d{j}", f"{entity} {kind}", f"{text} {_FILLER[j]}"))
        wrong = wrong_kinds.get(i)
        if wrong is None:
            answer, ok = right, True
        elif wrong == "other_year" or wrong == "other_place":
            answer, ok = (str(int(year) + rng.randint(5, 40)) if i % 4 != 1 else _name(rng, used)), False
        elif wrong == "off_by_one":
            answer, ok = (str(int(year) + 1) if i % 4 != 1 else town[:-1]), False
        elif wrong == "refusal":
            answer, ok = "The documents do not say.", False
        else:
            answer, ok = None, False
        items.append({"id": qid, "question": question, "answers": gold, "task": "nq", "_answer": answer})
        expected[qid] = ok

    # 10 claims: 8 labelled correctly, 2 not.
    claim_plan = [
        ("SUPPORTS", "SUPPORTS", True),
        ("SUPPORTS", "The claim is supported by the documents.", True),
        ("SUPPORTS", "True", True),
        ("REFUTES", "REFUTES", True),
        ("REFUTES", "The claim is false.", True),
        ("REFUTES", "It is not supported.", False),
        ("NOT ENOUGH INFO", "NOT ENOUGH INFO", True),
        ("NOT ENOUGH INFO", "There is not enough information to verify it.", True),
        ("NOT ENOUGH INFO", "SUPPORTS", False),
        ("SUPPORTS", "Supported.", True),
    ]
    for i, (label, answer, ok) in enumerate(claim_plan):
        entity = _name(rng, used)
        kind = _KINDS[(i + 3) % len(_KINDS)]
        year = rng.randint(1700, 1980)
        qid = f"fever-{i:03d}"
        claimed = year if label == "SUPPORTS" else year + 17
        question = f"The {entity} {kind} opened in {claimed}."
        passages = [
            f"The {entity} {kind} opened to the public in {year}." if label != "NOT ENOUGH INFO"
            else f"The {entity} {kind} has an uncertain early history.",
            f"Records of the {entity} {kind} list its first keeper.",
            f"The {entity} {kind} was restored twice.",
            f"Several towns claim a link to the {entity} {kind}.",
            f"The {entity} estate owned land nearby.",
        ]
        for j, text in enumerate(passages):
            docs.append(Document(f"{qid}-d{j}", f"{entity} {kind}", f"{text} {_FILLER[j]}"))
        items.append({"id": qid, "question": question, "answers": [label], "task": "fever", "_answer": answer})
        expected[qid] = ok

    # Unrelated filler so noise distractors can come from outside every top-100.
    for i in range(120):
        docs.append(Document(f"filler-{i:03d}", f"Note {i}", f"{_FILLER[i % 5]} {_FILLER[(i * 3 + 1) % 5]} Item {i}."))

    corpus = Corpus(docs)
    index = BM25Index(corpus)
    kit = PromptKit()
    script = []
    for item in items:
        ranked = retrieve(index, item["question"], RetrievalConfig(top_k=5), query_id=item["id"])
        shown = [corpus[d] for d in ranked.doc_ids]
        prompt = kit.render_crag(item["question"], shown)
        passages = [d.body.split(". ")[0].rstrip(".") + "." for d in shown]
        relevant = {1, 2} if item["task"] == "nq" else {1}
        response = _trace(passages, relevant, item["_answer"], "Documents [1] and [2] state the fact; the rest do not.", rng)
        script.append({"id": item["id"], "fingerprint": fingerprint(prompt.text), "response": response})

    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.jsonl").write_text(_jsonl({"id": d.id, "title": d.title, "text": d.body} for d in docs), encoding="utf-8")
    (out / "dataset.jsonl").write_text(
        _jsonl({k: v for k, v in item.items() if not k.startswith("_")} for item in items), encoding="utf-8"
    )
    (out / "mock_script.jsonl").write_text(_jsonl(script), encoding="utf-8")
    (out / "expected.json").write_text(
        json.dumps({"n": len(items), "correct": sum(expected.values()), "per_item": expected}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (out / "config.yaml").write_text(
        "corpus: corpus.jsonl\n"
        "dataset: dataset.jsonl\n"
        "output_dir: ../../runs/eval50\n"
        "retrieval:\n  top_k: 5\n"
        "prompt:\n  family: crag\n"
        "generation:\n  decoding: greedy\n"
        "backend:\n  kind: mock\n  script: mock_script.jsonl\n"
        "  default_response: \"#Explanation: no scripted reply.\\n#Answer: unknown\"\n"
        "perturbation:\n  seed: 7\n",
        encoding="utf-8",
    )


# Funnel plan per task: (total, stage-1 survivors, stage-2 survivors).
FUNNEL_PLAN = {
    "nq": (2500, 2111, 1100),
    "popqa": (2500, 1222, 750),
    "triviaqa": (2500, 1667, 510),
    "fever": (2500, 1000, 485),
}


def build_funnel(out: Path) -> None:
    rng = random.Random(SEED + 1)
    used: set[str] = set()
    records = []
    for task, (total, s1, s2) in FUNNEL_PLAN.items():
        n_wrong = (total - s1) * 4 // 5
        outcomes = ["full"] * s2 + ["partial"] * (s1 - s2) + ["wrong"] * n_wrong + ["broken"] * (total - s1 - n_wrong)
        rng.shuffle(outcomes)
        for i, outcome in enumerate(outcomes):
            entity = _name(rng, used) if len(used) < 6000 else f"{rng.choice(_SYL).capitalize()}{i}"
            kind = rng.choice(_KINDS)
            year = rng.randint(1600, 1999)
            if task == "fever":
                label = rng.choice(["SUPPORTS", "REFUTES", "NOT ENOUGH INFO"])
                question = f"The {entity} {kind} opened in {year}."
                gold = [label]
                right = label
                wrong = rng.choice([l for l in ("SUPPORTS", "REFUTES", "NOT ENOUGH INFO") if l != label])
            else:
                question = f"When was the {entity} {kind} finished?"
                gold = [str(year)]
                right = rng.choice([str(year), f"{year}."])
                # some wrong answers still contain the gold: they pass flexible but not strict match
                wrong = rng.choice([str(year + rng.randint(1, 50)), f"It was finished in {year}."])
            doc_order = [f"{task}-{i:04d}-d{j}" for j in range(5)]
            passages = [f"Passage {j + 1} about the {entity} {kind}." for j in range(5)]
            relevant = {1, 2}
            if outcome == "full":
                response = _trace(passages, relevant, right, f"Documents [1] and [2] settle it: {right}", rng)
            elif outcome == "partial":
                cite = sorted(rng.sample(range(1, 6), rng.randint(1, 4)))
                response = _trace(passages, relevant & set(cite) or {cite[0]}, right, f"The cited passages give {right}", rng, cite)
            elif outcome == "wrong":
                response = _trace(passages, relevant, wrong, "The passages point elsewhere.", rng)
            else:
                response = rng.choice([
                    _trace(passages, relevant, None, "No conclusion was reached.", rng),
                    f"I think the answer is {right}.",
                    "",
                ])
            records.append({
                "id": f"{task}-{i:04d}",
                "task": task,
                "question": question,
                "answers": gold,
                "doc_order": doc_order,
                "response": response,
            })
    buf = io.BytesIO()
    with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
        gz.write(_jsonl(records).encode("utf-8"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "annotation_funnel.jsonl.gz").write_bytes(buf.getvalue())
    expected = {
        "total": sum(t for t, _, _ in FUNNEL_PLAN.values()),
        "stage1": sum(s for _, s, _ in FUNNEL_PLAN.values()),
        "stage2": sum(s for _, _, s in FUNNEL_PLAN.values()),
        "per_task": {t: {"total": a, "stage1": b, "stage2": c} for t, (a, b, c) in FUNNEL_PLAN.items()},
    }
    (out / "funnel_expected.json").write_text(json.dumps(expected, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_all(out: Path) -> None:
    build_eval50(out / "eval50")
    build_funnel(out)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "fixtures"))
    args = parser.parse_args()
    build_all(Path(args.out))


if __name__ == "__main__":
    main()
