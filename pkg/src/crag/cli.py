"""``crag`` command line: reproducible batch workflows over a run config.

Exit status: 0 success, 2 usage, 3 invalid configuration, 4 bad input data,
5 backend failure, 1 anything unexpected. Errors go to stderr as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from .config import ConfigError, ConfigIssue, RunConfig, build_config, load_config_file, set_override
from .corpus import BM25Index, CorpusError, ExternalRankings, build_index, ingest_corpus, retrieve
from .demos import (
    DatasetError,
    ExportError,
    balance_and_cap,
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
from .evaluation import (
    EvalReport,
    PerturbationError,
    PerturbationSpec,
    Pipeline,
    cross_task_report,
    evaluate,
    format_reports,
)
from .gateway import GatewayError, HttpBackend, MockBackend
from .prompts import PromptError, PromptKit

logger = logging.getLogger("crag")

COMMANDS = ("index", "retrieve", "eval", "perturb-eval", "gen-demos", "filter", "funnel", "export", "cross-task")

EXIT_OK, EXIT_UNEXPECTED, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3, 4, 5


class CommandError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


class Run:
    """Lazily built components for one command invocation."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.fingerprint = cfg.fingerprint()
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._corpus = None
        self._index = None

    @property
    def stamp(self) -> dict:
        return {"config_fingerprint": self.fingerprint, "seeds": self.cfg.seeds}

    def save_config(self) -> None:
        _write_json(self.out / "run_config.json", self.cfg.to_dict())

    @property
    def corpus(self):
        if self._corpus is None:
            self._corpus = ingest_corpus(self.cfg.corpus)
        return self._corpus

    @property
    def index(self) -> BM25Index:
        if self._index is None:
            self._index = build_index(self.corpus)
        return self._index

    def retriever(self):
        if self.cfg.retrieval.scorer == "external-adapter":
            return ExternalRankings.from_file(self.corpus, self.cfg.rankings)
        return self.index

    def kit(self) -> PromptKit:
        return PromptKit(self.cfg.template_dir, self.cfg.doc_char_cap)

    def backend(self):
        b = self.cfg.backend
        if b.kind == "http":
            return HttpBackend(b.endpoint, b.model, api_key_env=b.api_key_env, timeout=b.timeout)
        if b.script:
            return MockBackend.from_file(b.script, default=b.default_response)
        return MockBackend({}, default=b.default_response)

    def dataset(self):
        return load_dataset(self.cfg.dataset)

    def pipeline(self) -> Pipeline:
        needs_docs = self.cfg.family != "baseline"
        return Pipeline(
            backend=self.backend(),
            retriever=self.retriever() if needs_docs else None,
            family=self.cfg.family,
            retrieval=self.cfg.retrieval,
            params=self.cfg.generation,
            kit=self.kit(),
            parallelism=self.cfg.backend.parallelism,
            retry=self.cfg.backend.retry,
            # BM25 retrieval already doubles as the distractor source
            distractor_index=self.index if self.cfg.retrieval.scorer == "external-adapter" else None,
            train_task=self.cfg.train_task,
            run_fingerprint=self.fingerprint,
        )


def _report_dict(report: EvalReport, run: Run) -> dict:
    data = report.to_dict()
    data["seeds"] = run.cfg.seeds
    return data


def cmd_index(run: Run, args) -> None:
    data = {**run.index.to_dict(), **run.stamp}
    _write_json(run.out / "index.json", data)
    print(f"indexed {data['n_docs']} documents, {data['vocabulary_size']} terms -> {run.out / 'index.json'}")


def cmd_retrieve(run: Run, args) -> None:
    retriever = run.retriever()
    path = run.out / "rankings.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for inst in run.dataset():
            ranked = retrieve(retriever, inst.question, run.cfg.retrieval, query_id=inst.id)
            rec = {
                "query_id": inst.id,
                "ranking": ranked.doc_ids,
                "scores": [s for _, s in ranked.entries],
                "config_fingerprint": run.fingerprint,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"rankings -> {path}")


def _run_eval(run: Run, perturbation: PerturbationSpec | None, name: str) -> EvalReport:
    report = evaluate(run.dataset(), run.pipeline(), perturbation)
    report_path = run.out / f"{name}.json"
    _write_json(report_path, _report_dict(report, run))
    with open(run.out / f"{name}.per_item.jsonl", "w", encoding="utf-8") as fh:
        for r in report.per_item:
            rec = r.to_dict(audit=True)
            rec["config_fingerprint"] = run.fingerprint
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    return report


def cmd_eval(run: Run, args) -> None:
    pert = run.cfg.perturbation if run.cfg.perturbation.kind != "none" else None
    report = _run_eval(run, pert, "report")
    print(format_reports([report]))
    errors = sum(r.error is not None for r in report.per_item)
    if errors:
        print(f"{errors} item(s) failed and were scored incorrect; see report.per_item.jsonl")


def cmd_perturb_eval(run: Run, args) -> None:
    base = run.cfg.perturbation
    specs = {
        "none": None,
        "shuffle": PerturbationSpec("shuffle", base.seed),
        "noise": PerturbationSpec("noise", base.seed, base.noise_count, base.fraction_mode, base.exclusion_depth),
    }
    (run.out / "perturb").mkdir(exist_ok=True)
    reports = {}
    for name, spec in specs.items():
        reports[name] = _run_eval(run, spec, f"perturb/{name}")
    clean = reports["none"].accuracy
    summary = {
        "clean_accuracy": clean,
        "perturbations": {
            name: {"accuracy": r.accuracy, "delta": r.accuracy - clean, "spec": r.perturbation.to_dict()}
            for name, r in reports.items()
            if name != "none"
        },
        **run.stamp,
    }
    _write_json(run.out / "perturb_summary.json", summary)
    print(format_reports(list(reports.values())))


def cmd_gen_demos(run: Run, args) -> None:
    demos = generate_demonstrations(
        run.dataset(),
        run.retriever(),
        run.backend(),
        run.cfg.generation,
        run.cfg.retrieval,
        kit=run.kit(),
        parallelism=run.cfg.backend.parallelism,
        retry=run.cfg.backend.retry,
    )
    path = run.out / "demos.jsonl"
    write_demonstrations(demos, path, extra={"config_fingerprint": run.fingerprint})
    unparsed = sum(not d.parsed for d in demos)
    print(f"{len(demos)} demonstrations ({unparsed} unparsed) -> {path}")


def _input_path(run: Run, args, default: str) -> Path:
    return Path(args.input) if args.input else run.out / default


def cmd_filter(run: Run, args) -> None:
    demos = read_demonstrations(_input_path(run, args, "demos.jsonl"))
    demos = filter_citation_coverage(filter_exact_match(demos))
    used = balance_and_cap(demos, run.cfg.demos.caps, run.cfg.demos.balance_seed)
    extra = {"config_fingerprint": run.fingerprint}
    write_demonstrations(demos, run.out / "demos_filtered.jsonl", extra)
    write_demonstrations(used, run.out / "demos_used.jsonl", extra)
    stats = funnel_report(demos, used)
    print(f"total {stats.total} -> stage1 {stats.stage1_survivors} -> stage2 {stats.stage2_survivors} -> used {stats.used}")


def cmd_funnel(run: Run, args) -> None:
    demos = read_demonstrations(_input_path(run, args, "demos_filtered.jsonl"))
    used_path = run.out / "demos_used.jsonl"
    used = read_demonstrations(used_path) if used_path.exists() else None
    stats = funnel_report(demos, used)
    _write_json(run.out / "funnel.json", {**stats.to_dict(), **run.stamp})
    print(f"{'task':<10}{'total':>8}{'stage1':>8}{'stage2':>8}{'used':>8}")
    for task, row in stats.per_task.items():
        print(f"{task:<10}{row['total']:>8}{row['stage1']:>8}{row['stage2']:>8}{row['used']:>8}")
    print(f"{'all':<10}{stats.total:>8}{stats.stage1_survivors:>8}{stats.stage2_survivors:>8}{stats.used:>8}")


def cmd_export(run: Run, args) -> None:
    demos = read_demonstrations(_input_path(run, args, "demos_used.jsonl"))
    force = run.cfg.demos.force_export
    if run.cfg.demos.corrupt != "none":
        demos = corrupt_to_misleading(demos, run.cfg.demos.corrupt, run.cfg.demos.corrupt_seed)
        force = True
    path = run.out / "sft.jsonl"
    summary = export_sft(
        demos,
        path,
        run.corpus,
        kit=run.kit(),
        force=force,
        student_model=run.cfg.demos.student_model,
        extra_meta={"config_fingerprint": run.fingerprint},
    )
    _write_json(
        run.out / "export_summary.json",
        {"path": summary.path, "records": summary.records, "forced": summary.forced, "per_task": summary.per_task,
         "corruption": run.cfg.demos.corrupt, **run.stamp},
    )
    print(f"exported {summary.records} records -> {path}")


def cmd_cross_task(run: Run, args) -> None:
    if not args.reports:
        raise CommandError("usage", "cross-task needs --reports FILE [FILE ...]", EXIT_USAGE)
    reports = [EvalReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8"))) for p in args.reports]
    matrix = cross_task_report(reports)
    _write_json(run.out / "cross_task.json", {**matrix.to_dict(), **run.stamp})
    print(matrix.to_table())


HANDLERS = {
    "index": (cmd_index, ("corpus",)),
    "retrieve": (cmd_retrieve, ("corpus", "dataset")),
    "eval": (cmd_eval, ("dataset",)),
    "perturb-eval": (cmd_perturb_eval, ("corpus", "dataset")),
    "gen-demos": (cmd_gen_demos, ("corpus", "dataset")),
    "filter": (cmd_filter, ()),
    "funnel": (cmd_funnel, ()),
    "export": (cmd_export, ("corpus",)),
    "cross-task": (cmd_cross_task, ()),
}

# flag dest -> dotted config key
_FLAG_KEYS = {
    "corpus": "corpus",
    "dataset": "dataset",
    "output_dir": "output_dir",
    "train_task": "train_task",
    "top_k": "retrieval.top_k",
    "scorer": "retrieval.scorer",
    "rankings": "retrieval.rankings",
    "family": "prompt.family",
    "templates_dir": "prompt.template_dir",
    "temperature": "generation.temperature",
    "max_new_tokens": "generation.max_new_tokens",
    "decoding": "generation.decoding",
    "gen_seed": "generation.seed",
    "backend": "backend.kind",
    "script": "backend.script",
    "endpoint": "backend.endpoint",
    "model": "backend.model",
    "parallelism": "backend.parallelism",
    "perturbation": "perturbation.kind",
    "perturb_seed": "perturbation.seed",
    "noise_count": "perturbation.noise_count",
    "fraction_mode": "perturbation.fraction_mode",
    "corrupt": "demos.corrupt",
    "force": "demos.force_export",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crag", description="Contrastive RAG pipeline runner.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML or JSON run configuration")
    parser.add_argument("--input", help="input file overriding the command's default under output_dir")
    parser.add_argument("--reports", nargs="*", help="report files for cross-task")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key, e.g. retrieval.top_k=3")
    parser.add_argument("-v", "--verbose", action="store_true")
    g = parser.add_argument_group("overrides")
    g.add_argument("--corpus")
    g.add_argument("--dataset")
    g.add_argument("--output-dir")
    g.add_argument("--train-task")
    g.add_argument("--top-k", type=int)
    g.add_argument("--scorer", choices=("bm25", "external-adapter"))
    g.add_argument("--rankings")
    g.add_argument("--family", choices=("baseline", "rag", "crag"))
    g.add_argument("--templates-dir")
    g.add_argument("--temperature", type=float)
    g.add_argument("--max-new-tokens", type=int)
    g.add_argument("--decoding", choices=("greedy", "sampled"))
    g.add_argument("--gen-seed", type=int)
    g.add_argument("--backend", choices=("mock", "http"))
    g.add_argument("--script")
    g.add_argument("--endpoint")
    g.add_argument("--model")
    g.add_argument("--parallelism", type=int)
    g.add_argument("--perturbation", choices=("none", "shuffle", "noise"))
    g.add_argument("--perturb-seed", type=int)
    g.add_argument("--noise-count", type=int)
    g.add_argument("--fraction-mode", action="store_const", const=True)
    g.add_argument("--corrupt", choices=("none", "misleading", "mixed"))
    g.add_argument("--force", action="store_const", const=True)
    return parser


def _overrides(args) -> dict:
    overrides: dict = {}
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_override(overrides, key, value)
    for item in args.set:
        key, value = item.split("=", 1)
        set_override(overrides, key.strip(), yaml.safe_load(value))
    return overrides


def load_run_config(args, require: Sequence[str]) -> RunConfig:
    bad = [s for s in args.set if "=" not in s]
    if bad:
        raise ConfigError([ConfigIssue("--set", f"expected KEY=VALUE, got {s!r}") for s in bad])
    overrides = _overrides(args)
    if args.config:
        path = Path(args.config)
        return build_config(load_config_file(path), overrides, base_dir=path.parent, require=tuple(require))
    return build_config({}, overrides, base_dir=None, require=tuple(require))


def _fail(category: str, errors: list, code: int) -> int:
    print(json.dumps({"category": category, "errors": errors}, ensure_ascii=False), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    handler, require = HANDLERS[args.command]
    try:
        cfg = load_run_config(args, require)
        if args.command == "eval" and cfg.family != "baseline" and not cfg.corpus:
            raise ConfigError([ConfigIssue("corpus", f"required for the {cfg.family} pipeline")])
        run = Run(cfg)
        run.save_config()
        handler(run, args)
    except ConfigError as exc:
        return _fail("config", [i.to_dict() for i in exc.issues], EXIT_CONFIG)
    except CommandError as exc:
        if exc.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        return _fail(exc.category, [str(exc)], exc.code)
    except (CorpusError, DatasetError, ExportError, PromptError, PerturbationError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        return _fail("input", [f"{type(exc).__name__}: {exc}"], EXIT_DATA)
    except GatewayError as exc:
        return _fail(exc.kind, [str(exc)], EXIT_BACKEND)
    except Exception as exc:  # noqa: BLE001 - last-resort categorization for the exit status
        logger.exception("unexpected failure")
        return _fail("unexpected", [f"{type(exc).__name__}: {exc}"], EXIT_UNEXPECTED)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
