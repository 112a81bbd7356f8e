"""Teacher demonstrations: generation, two-stage filtering, balancing and SFT export."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Corpus, EmptyQueryError, RetrievalConfig, Retriever, retrieve
from .gateway import Backend, GenerationParams, RetryPolicy, batch_generate
from .metrics import FEVER_LABELS, strict_match
from .prompts import PromptKit, default_kit
from .traces import CragTrace, TraceParseError, cited_documents, parse_trace, serialize_trace

TASKS = ("nq", "popqa", "triviaqa", "fever")

# Per-task "used" column of the published annotation funnel.
DEFAULT_TASK_CAPS = {"nq": 515, "popqa": 500, "triviaqa": 500, "fever": 485}

TRAINER_DEFAULTS = {
    "epochs": 3,
    "batch_size": 32,
    "learning_rate": 3e-5,
    "weight_decay": 0.001,
    "lr_scheduler": "cosine",
    "warmup_ratio": 0.03,
}


class DatasetError(ValueError):
    pass


class ExportError(ValueError):
    pass


@dataclass(frozen=True)
class QaInstance:
    id: str
    question: str
    gold_answers: tuple[str, ...]
    task: str

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise DatasetError(f"{self.id}: unknown task {self.task!r}")
        if not self.gold_answers:
            raise DatasetError(f"{self.id}: gold_answers must be non-empty")
        if self.task == "fever" and (len(self.gold_answers) != 1 or self.gold_answers[0] not in FEVER_LABELS):
            raise DatasetError(f"{self.id}: FEVER gold must be one of {FEVER_LABELS}")

    def to_dict(self) -> dict:
        return {"id": self.id, "question": self.question, "answers": list(self.gold_answers), "task": self.task}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "QaInstance":
        answers = obj["answers"]
        if isinstance(answers, str):
            answers = [answers]
        return cls(str(obj["id"]), obj["question"], tuple(answers), obj["task"])


def load_dataset(path: str | Path) -> list[QaInstance]:
    """Read ``{"id", "question", "answers", "task"}`` records, one per line."""
    instances = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                inst = QaInstance.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad record ({exc})") from exc
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if inst.id in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {inst.id!r}")
            seen.add(inst.id)
            instances.append(inst)
    return instances


@dataclass(frozen=True)
class Demonstration:
    instance: QaInstance
    doc_order: tuple[str, ...]
    trace: CragTrace | None
    stage1_pass: bool = False
    stage2_pass: bool = False
    provenance: str = "clean"  # "clean" | "misleading"
    raw: str = ""
    error: dict | None = None

    def __post_init__(self) -> None:
        if self.stage2_pass and not self.stage1_pass:
            raise ValueError(f"{self.instance.id}: stage2_pass requires stage1_pass")
        if self.provenance == "misleading" and self.stage1_pass:
            raise ValueError(f"{self.instance.id}: misleading demonstrations cannot pass stage 1")
        if self.provenance not in ("clean", "misleading"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def parsed(self) -> bool:
        return self.trace is not None

    def to_dict(self) -> dict:
        return {
            **self.instance.to_dict(),
            "doc_order": list(self.doc_order),
            "trace": self.trace.to_dict(self.instance.id) if self.trace else None,
            "raw": self.raw,
            "error": self.error,
            "stage1_pass": self.stage1_pass,
            "stage2_pass": self.stage2_pass,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Demonstration":
        return cls(
            QaInstance.from_dict(obj),
            tuple(obj["doc_order"]),
            CragTrace.from_dict(obj["trace"]) if obj.get("trace") else None,
            bool(obj["stage1_pass"]),
            bool(obj["stage2_pass"]),
            obj.get("provenance", "clean"),
            obj.get("raw", ""),
            obj.get("error"),
        )


def build_demonstration(
    instance: QaInstance, doc_order: Sequence[str], completion: str, error: dict | None = None
) -> Demonstration:
    """Parse one teacher completion; parse failures are kept, flagged, with no trace."""
    doc_order = tuple(doc_order)
    if error is not None:
        return Demonstration(instance, doc_order, None, raw=completion, error=error)
    if not doc_order:
        return Demonstration(instance, doc_order, None, raw=completion, error={"stage": "evidence", "message": "no documents shown"})
    try:
        trace = parse_trace(completion, len(doc_order))
    except TraceParseError as exc:
        return Demonstration(instance, doc_order, None, raw=completion, error=exc.to_dict())
    return Demonstration(instance, doc_order, trace, raw=completion)


def generate_demonstrations(
    dataset: Sequence[QaInstance],
    index: Retriever,
    backend: Backend,
    params: GenerationParams = GenerationParams(),
    cfg: RetrievalConfig = RetrievalConfig(),
    kit: PromptKit | None = None,
    parallelism: int = 1,
    retry: RetryPolicy = RetryPolicy(),
) -> list[Demonstration]:
    """Retrieve, render the C-RAG prompt and collect one teacher trace per instance."""
    if not dataset:
        raise DatasetError("dataset is empty")
    kit = kit or default_kit()
    prompts, doc_orders, failures = [], [], {}
    for i, inst in enumerate(dataset):
        try:
            ranked = retrieve(index, inst.question, cfg, query_id=inst.id)
            docs = [index.corpus[d] for d in ranked.doc_ids]
            prompt = kit.render_crag(inst.question, docs)
        except (EmptyQueryError, ValueError, KeyError) as exc:
            failures[i] = {"stage": "retrieval", "message": str(exc)}
            doc_orders.append(())
            continue
        prompts.append(prompt)
        doc_orders.append(prompt.doc_order)

    completions = iter(batch_generate(prompts, params, backend, parallelism=parallelism, retry=retry))
    demos = []
    for i, inst in enumerate(dataset):
        if i in failures:
            demos.append(build_demonstration(inst, (), "", error=failures[i]))
            continue
        comp = next(completions)
        error = None if comp.ok else {"stage": "generation", "message": f"{comp.error.kind}: {comp.error}"}
        demos.append(build_demonstration(inst, doc_orders[i], comp.text, error=error))
    return demos


def filter_exact_match(demos: Iterable[Demonstration]) -> list[Demonstration]:
    """Stage 1: the trace's answer must equal a gold answer after strict normalization."""
    out = []
    for d in demos:
        ok = d.trace is not None and d.provenance == "clean" and strict_match(d.trace.answer, d.instance.gold_answers)
        out.append(replace(d, stage1_pass=ok, stage2_pass=d.stage2_pass and ok))
    return out


def covers_all_documents(trace: CragTrace, k: int) -> bool:
    return bool(trace.reference_evidence) and set(range(1, k + 1)) <= cited_documents(trace)


def filter_citation_coverage(demos: Iterable[Demonstration], k: int | None = None) -> list[Demonstration]:
    """Stage 2: stage-1 survivors whose trace considers every one of the ``k`` shown documents.

    ``k`` defaults to the number of documents each demonstration was shown.
    """
    out = []
    for d in demos:
        kk = len(d.doc_order) if k is None else k
        ok = d.stage1_pass and d.trace is not None and covers_all_documents(d.trace, kk)
        out.append(replace(d, stage2_pass=ok))
    return out


def balance_and_cap(
    demos: Sequence[Demonstration], per_task_caps: Mapping[str, int] = DEFAULT_TASK_CAPS, seed: int = 0
) -> list[Demonstration]:
    """Seeded per-task subsample of the stage-2 survivors, in input order.

    Tasks absent from ``per_task_caps`` are kept whole.
    """
    by_task: dict[str, list[int]] = {}
    for i, d in enumerate(demos):
        if d.stage2_pass:
            by_task.setdefault(d.instance.task, []).append(i)
    keep: set[int] = set()
    for task in sorted(by_task):
        idxs = by_task[task]
        cap = per_task_caps.get(task)
        if cap is None or len(idxs) <= cap:
            keep.update(idxs)
        else:
            rng = random.Random(f"{seed}:{task}")
            keep.update(rng.sample(idxs, cap))
    return [d for i, d in enumerate(demos) if i in keep]


@dataclass(frozen=True)
class ExportSummary:
    path: str
    records: int
    forced: int
    per_task: dict[str, int]


def export_sft(
    demos: Sequence[Demonstration],
    path: str | Path,
    corpus: Corpus,
    kit: PromptKit | None = None,
    force: bool = False,
    student_model: str | None = None,
    extra_meta: Mapping | None = None,
) -> ExportSummary:
    """Write ``{"input", "target", "meta"}`` records for supervised fine-tuning.

    ``input`` is the C-RAG prompt over the documents the teacher saw and
    ``target`` the trace re-serialized with its four stages in order, ending
    in ``#Answer:``. Demonstrations that did not pass both filters are refused
    unless ``force`` is set.
    """
    kit = kit or default_kit()
    records = []
    forced = 0
    for d in demos:
        if d.trace is None:
            raise ExportError(f"{d.instance.id}: demonstration has no parsed trace")
        if not d.stage2_pass:
            if not force:
                raise ExportError(f"{d.instance.id}: demonstration did not pass filtering (use force to export)")
            forced += 1
        try:
            docs = [corpus[doc_id] for doc_id in d.doc_order]
        except KeyError as exc:
            raise ExportError(f"{d.instance.id}: document {exc} not in corpus") from exc
        meta = {
            "id": d.instance.id,
            "task": d.instance.task,
            "provenance": d.provenance,
            "student_model": student_model,
            "trainer_defaults": dict(TRAINER_DEFAULTS),
        }
        if extra_meta:
            meta.update(extra_meta)
        records.append(
            {
                "input": kit.render_crag(d.instance.question, docs).text,
                "target": serialize_trace(d.trace),
                "meta": meta,
            }
        )
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return ExportSummary(str(path), len(records), forced, dict(Counter(d.instance.task for d in demos)))


def _wrong_answer(demo: Demonstration, pool: Sequence[tuple[str, str]], rng: random.Random) -> str:
    gold = demo.instance.gold_answers
    candidates = []
    seen = set()
    for inst_id, answer in pool:
        if inst_id == demo.instance.id or answer in seen or strict_match(answer, gold):
            continue
        seen.add(answer)
        candidates.append(answer)
    if not candidates and demo.instance.task == "fever":
        candidates = [label for label in FEVER_LABELS if label != gold[0]]
    if not candidates:
        return f"not {gold[0]}"
    return rng.choice(candidates)


def corrupt_to_misleading(demos: Sequence[Demonstration], mode: str = "misleading", seed: int = 0) -> list[Demonstration]:
    """Swap in wrong final answers, borrowed from other instances of the same task.

    ``misleading`` corrupts every demonstration; ``mixed`` corrupts a seeded
    half (rounded down) and leaves the rest untouched.
    """
    if mode not in ("misleading", "mixed"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    for d in demos:
        if d.trace is None:
            raise ValueError(f"{d.instance.id}: cannot corrupt a demonstration without a trace")
    rng = random.Random(seed)
    n = len(demos)
    selected = set(range(n)) if mode == "misleading" else set(rng.sample(range(n), n // 2))

    pools: dict[str, list[tuple[str, str]]] = {}
    for d in demos:
        for g in d.instance.gold_answers:
            pools.setdefault(d.instance.task, []).append((d.instance.id, g))

    out = []
    for i, d in enumerate(demos):
        if i not in selected:
            out.append(d)
            continue
        wrong = _wrong_answer(d, pools[d.instance.task], rng)
        trace = replace(d.trace, answer=wrong)
        trace = replace(trace, raw=serialize_trace(trace))
        out.append(replace(d, trace=trace, raw=trace.raw, provenance="misleading", stage1_pass=False, stage2_pass=False))
    return out


@dataclass(frozen=True)
class FunnelStats:
    total: int
    stage1_survivors: int
    stage2_survivors: int
    used: int
    per_task: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.total >= self.stage1_survivors >= self.stage2_survivors >= self.used >= 0:
            raise ValueError(f"funnel counts are not monotone: {self}")

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "stage1": self.stage1_survivors,
            "stage2": self.stage2_survivors,
            "used": self.used,
            "per_task": self.per_task,
        }


def funnel_report(demos: Sequence[Demonstration], used: Sequence[Demonstration] | None = None) -> FunnelStats:
    """Counts at each filtering stage, overall and per task.

    ``used`` is the balanced subset; when omitted every stage-2 survivor counts as used.
    """
    if used is None:
        used = [d for d in demos if d.stage2_pass]
    per_task: dict[str, dict[str, int]] = {}
    for d in demos:
        row = per_task.setdefault(d.instance.task, {"total": 0, "stage1": 0, "stage2": 0, "used": 0})
        row["total"] += 1
        row["stage1"] += d.stage1_pass
        row["stage2"] += d.stage2_pass
    for d in used:
        per_task.setdefault(d.instance.task, {"total": 0, "stage1": 0, "stage2": 0, "used": 0})["used"] += 1
    return FunnelStats(
        total=len(demos),
        stage1_survivors=sum(d.stage1_pass for d in demos),
        stage2_survivors=sum(d.stage2_pass for d in demos),
        used=len(used),
        per_task={t: per_task[t] for t in sorted(per_task)},
    )


def write_demonstrations(demos: Iterable[Demonstration], path: str | Path, extra: Mapping | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in demos:
            rec = d.to_dict()
            if extra:
                rec.update(extra)
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_demonstrations(path: str | Path) -> list[Demonstration]:
    with open(path, encoding="utf-8") as fh:
        return [Demonstration.from_dict(json.loads(line)) for line in fh if line.strip()]
