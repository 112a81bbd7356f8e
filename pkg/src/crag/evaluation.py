"""Evaluation runs, retrieval perturbations and report assembly."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence, TypeVar

from .corpus import BM25Index, DEFAULT_EXCLUSION_DEPTH, RetrievalConfig, Retriever, retrieve, sample_distractors
from .demos import QaInstance
from .gateway import Backend, GenerationParams, RetryPolicy, batch_generate
from .metrics import fever_match, flexible_exact_match
from .prompts import PromptKit, default_kit
from .traces import TraceParseError, extract_answer

T = TypeVar("T")


class PerturbationError(ValueError):
    pass


class MissingTagError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "none"  # "none" | "shuffle" | "noise"
    seed: int = 0
    noise_count: int = 2
    fraction_mode: bool = False
    exclusion_depth: int = DEFAULT_EXCLUSION_DEPTH

    def validate(self) -> None:
        if self.kind not in ("none", "shuffle", "noise"):
            raise PerturbationError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "noise" and not self.fraction_mode and self.noise_count < 1:
            raise PerturbationError("noise perturbation needs noise_count >= 1 or fraction_mode")

    def noise_size(self, k: int) -> int:
        return math.ceil(k / 2) if self.fraction_mode else self.noise_count

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "noise_count": self.noise_count,
            "fraction_mode": self.fraction_mode,
            "exclusion_depth": self.exclusion_depth,
        }


def _key(item: Any) -> Any:
    return getattr(item, "id", item)


def perturb_shuffle(docs: Sequence[T], seed: int) -> list[T]:
    """Seeded uniform permutation of ``docs``."""
    out = list(docs)
    random.Random(seed).shuffle(out)
    return out


def perturb_noise(docs: Sequence[T], distractors: Sequence[T], spec: PerturbationSpec) -> list[T]:
    """Mix distractors into ``docs`` at seeded positions.

    Count mode inserts ``spec.noise_count`` distractors, growing the list.
    Fraction mode overwrites ceil(k/2) of the k originals, keeping its length.
    """
    docs = list(docs)
    shown = {_key(d) for d in docs}
    if any(_key(d) in shown for d in distractors):
        raise PerturbationError("distractors overlap the retrieved documents")
    n = spec.noise_size(len(docs))
    if n < 0:
        raise PerturbationError("noise_count must be >= 0")
    if len(distractors) < n:
        raise PerturbationError(f"need {n} distractors, got {len(distractors)}")
    rng = random.Random(spec.seed)
    if spec.fraction_mode:
        out = list(docs)
        for pos, noise in zip(sorted(rng.sample(range(len(docs)), n)), distractors):
            out[pos] = noise
        return out
    total = len(docs) + n
    noise_positions = set(rng.sample(range(total), n))
    originals, noise = iter(docs), iter(distractors[:n])
    return [next(noise) if i in noise_positions else next(originals) for i in range(total)]


def item_seed(seed: int, instance_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{instance_id}".encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


@dataclass
class Pipeline:
    """Everything needed to answer a question: retrieval, prompting and a backend."""

    backend: Backend
    retriever: Retriever | None = None
    family: str = "crag"
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    params: GenerationParams = field(default_factory=GenerationParams)
    kit: PromptKit | None = None
    parallelism: int = 1
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    # Lexical index used to draw noise documents; defaults to the retriever when it is BM25.
    distractor_index: BM25Index | None = None
    train_task: str | None = None
    run_fingerprint: str | None = None

    def describe(self) -> dict:
        kit = self.kit or default_kit()
        return {
            "family": self.family,
            "retrieval": {"top_k": self.retrieval.top_k, "scorer": self.retrieval.scorer},
            "generation": self.params.to_dict(),
            "backend": self.backend.backend_id,
            "template_sha256": hashlib.sha256(kit.templates[self.family].encode("utf-8")).hexdigest(),
            "doc_char_cap": kit.doc_char_cap,
            "train_task": self.train_task,
        }


@dataclass(frozen=True)
class ItemResult:
    id: str
    task: str
    prediction: str
    correct: bool
    doc_order: tuple[str, ...] = ()
    error: str | None = None
    completion: str = ""

    def to_dict(self, audit: bool = False) -> dict:
        out = {"id": self.id, "prediction": self.prediction, "correct": self.correct, "error": self.error}
        if audit:
            out.update(task=self.task, doc_order=list(self.doc_order), completion=self.completion)
        return out


@dataclass(frozen=True)
class EvalReport:
    task: str
    pipeline: str
    n: int
    accuracy: float
    per_item: tuple[ItemResult, ...]
    perturbation: PerturbationSpec | None
    config_fingerprint: str
    train_task: str | None = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n != len(self.per_item):
            raise ValueError("n must equal the number of per-item results")
        correct = sum(r.correct for r in self.per_item)
        if self.n and self.accuracy != correct / self.n:
            raise ValueError("accuracy must equal correct / n")

    @property
    def correct(self) -> int:
        return sum(r.correct for r in self.per_item)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "pipeline": self.pipeline,
            "n": self.n,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "perturbation": self.perturbation.to_dict() if self.perturbation else None,
            "train_task": self.train_task,
            "config_fingerprint": self.config_fingerprint,
            "settings": self.settings,
            "per_item": [r.to_dict() for r in self.per_item],
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EvalReport":
        items = tuple(
            ItemResult(r["id"], r.get("task", obj["task"]), r["prediction"], r["correct"],
                       tuple(r.get("doc_order", ())), r.get("error"), r.get("completion", ""))
            for r in obj["per_item"]
        )
        pert = obj.get("perturbation")
        return cls(
            task=obj["task"],
            pipeline=obj["pipeline"],
            n=obj["n"],
            accuracy=obj["accuracy"],
            per_item=items,
            perturbation=PerturbationSpec(**pert) if pert else None,
            config_fingerprint=obj["config_fingerprint"],
            train_task=obj.get("train_task"),
            settings=obj.get("settings", {}),
        )

    def write(self, path: str | Path, audit_path: str | Path | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        if audit_path is not None:
            with open(audit_path, "w", encoding="utf-8") as fh:
                for r in self.per_item:
                    rec = r.to_dict(audit=True)
                    rec["config_fingerprint"] = self.config_fingerprint
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def score(prediction: str, instance: QaInstance) -> bool:
    if instance.task == "fever":
        return fever_match(prediction, instance.gold_answers[0])
    return flexible_exact_match(prediction, instance.gold_answers)


def _docs_for(instance: QaInstance, pipeline: Pipeline, perturbation: PerturbationSpec | None) -> list:
    ranked = retrieve(pipeline.retriever, instance.question, pipeline.retrieval, query_id=instance.id)
    docs = [pipeline.retriever.corpus[d] for d in ranked.doc_ids]
    if perturbation is None or perturbation.kind == "none":
        return docs
    seed = item_seed(perturbation.seed, instance.id)
    if perturbation.kind == "shuffle":
        return perturb_shuffle(docs, seed)
    dindex = pipeline.distractor_index or pipeline.retriever
    if not isinstance(dindex, BM25Index):
        raise PerturbationError("noise perturbation needs a lexical index to draw distractors from")
    n = perturbation.noise_size(len(docs))
    distractors = sample_distractors(dindex, instance.question, n, perturbation.exclusion_depth, seed)
    return perturb_noise(docs, distractors, PerturbationSpec(**{**perturbation.to_dict(), "seed": seed}))


def evaluate(
    dataset: Sequence[QaInstance],
    pipeline: Pipeline,
    perturbation: PerturbationSpec | None = None,
) -> EvalReport:
    """Retrieve, optionally perturb, prompt, generate and score every instance.

    Failures on individual items (retrieval, generation, missing ``#Answer:``)
    score as incorrect and are recorded in the item's ``error`` field.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if perturbation is not None:
        perturbation.validate()
    if pipeline.family != "baseline" and pipeline.retriever is None:
        raise ValueError(f"{pipeline.family} pipeline needs a retriever")
    kit = pipeline.kit or default_kit()

    prompts, doc_orders, failures = {}, {}, {}
    for i, inst in enumerate(dataset):
        try:
            docs = [] if pipeline.family == "baseline" else _docs_for(inst, pipeline, perturbation)
            prompt = kit.render(pipeline.family, inst.question, docs)
        except Exception as exc:  # per-item isolation: any failure is recorded, never fatal
            failures[i] = f"{type(exc).__name__}: {exc}"
            continue
        prompts[i] = prompt
        doc_orders[i] = prompt.doc_order

    order = sorted(prompts)
    completions = dict(
        zip(
            order,
            batch_generate([prompts[i] for i in order], pipeline.params, pipeline.backend, pipeline.parallelism, pipeline.retry),
        )
    )

    results = []
    for i, inst in enumerate(dataset):
        if i in failures:
            results.append(ItemResult(inst.id, inst.task, "", False, error=failures[i]))
            continue
        comp = completions[i]
        if not comp.ok:
            results.append(ItemResult(inst.id, inst.task, "", False, doc_orders[i], f"{comp.error.kind}: {comp.error}"))
            continue
        try:
            prediction = extract_answer(comp.text)
        except TraceParseError:
            results.append(ItemResult(inst.id, inst.task, "", False, doc_orders[i], "no #Answer: marker", comp.text))
            continue
        results.append(ItemResult(inst.id, inst.task, prediction, score(prediction, inst), doc_orders[i], None, comp.text))

    tasks = sorted({inst.task for inst in dataset})
    settings = pipeline.describe()
    fingerprint = pipeline.run_fingerprint or hashlib.sha256(
        json.dumps(
            {"pipeline": settings, "perturbation": perturbation.to_dict() if perturbation else None,
             "dataset": [inst.to_dict() for inst in dataset]},
            sort_keys=True,
        ).encode("utf-8")
    ).hexdigest()
    n = len(results)
    return EvalReport(
        task=tasks[0] if len(tasks) == 1 else "mixed",
        pipeline=pipeline.family,
        n=n,
        accuracy=sum(r.correct for r in results) / n,
        per_item=tuple(results),
        perturbation=perturbation,
        config_fingerprint=fingerprint,
        train_task=pipeline.train_task,
        settings=settings,
    )


@dataclass(frozen=True)
class CrossTaskMatrix:
    train_tasks: tuple[str, ...]
    eval_tasks: tuple[str, ...]
    cells: dict[tuple[str, str], float]

    def in_domain(self, train: str, evaluated: str) -> bool:
        return train == evaluated

    def __len__(self) -> int:
        return len(self.cells)

    def to_dict(self) -> dict:
        return {
            "train_tasks": list(self.train_tasks),
            "eval_tasks": list(self.eval_tasks),
            "cells": [
                {"train": t, "eval": e, "accuracy": acc, "in_domain": t == e}
                for (t, e), acc in sorted(self.cells.items())
            ],
        }

    def to_table(self) -> str:
        if not self.cells:
            return "(no reports)"
        width = max(8, *(len(t) for t in self.eval_tasks))
        lines = ["train \\ eval".ljust(14) + "".join(e.rjust(width + 2) for e in self.eval_tasks)]
        for t in self.train_tasks:
            row = t.ljust(14)
            for e in self.eval_tasks:
                acc = self.cells.get((t, e))
                cell = "-" if acc is None else f"{100 * acc:.1f}" + ("*" if t == e else "")
                row += cell.rjust(width + 2)
            lines.append(row)
        lines.append("(* in-domain)")
        return "\n".join(lines)


def cross_task_report(reports: Sequence[EvalReport]) -> CrossTaskMatrix:
    """Accuracy matrix of training task by evaluation task; the diagonal is in-domain."""
    cells: dict[tuple[str, str], float] = {}
    for r in reports:
        if not r.train_task:
            raise MissingTagError(f"report for task {r.task!r} has no train_task tag")
        key = (r.train_task, r.task)
        if key in cells:
            raise ValueError(f"duplicate report for train={key[0]} eval={key[1]}")
        cells[key] = r.accuracy
    train_tasks = tuple(sorted({t for t, _ in cells}))
    eval_tasks = tuple(sorted({e for _, e in cells}))
    return CrossTaskMatrix(train_tasks, eval_tasks, cells)


def format_reports(reports: Sequence[EvalReport]) -> str:
    header = f"{'pipeline':<10}{'task':<10}{'perturbation':<14}{'n':>6}{'correct':>9}{'acc %':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        pert = r.perturbation.kind if r.perturbation else "none"
        if r.perturbation and r.perturbation.kind == "noise":
            pert += "/frac" if r.perturbation.fraction_mode else f"/{r.perturbation.noise_count}"
        lines.append(f"{r.pipeline:<10}{r.task:<10}{pert:<14}{r.n:>6}{r.correct:>9}{100 * r.accuracy:>8.1f}")
    return "\n".join(lines)
