"""Run configuration: one declarative file, CLI overrides on top, defaults below."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import DEFAULT_EXCLUSION_DEPTH, DEFAULT_TOP_K, RetrievalConfig
from .demos import DEFAULT_TASK_CAPS, TASKS
from .evaluation import PerturbationSpec
from .gateway import API_KEY_ENV, GenerationParams, RetryPolicy
from .prompts import DEFAULT_DOC_CHAR_CAP, FAMILIES

DEFAULTS: dict[str, Any] = {
    "corpus": None,
    "dataset": None,
    "output_dir": "runs/default",
    "train_task": None,
    "retrieval": {"top_k": DEFAULT_TOP_K, "scorer": "bm25", "rankings": None},
    "generation": {"temperature": 0.4, "max_new_tokens": 2048, "decoding": "greedy", "seed": None},
    "backend": {
        "kind": "mock",
        "script": None,
        "default_response": "",
        "endpoint": None,
        "model": None,
        "api_key_env": API_KEY_ENV,
        "timeout": 60.0,
        "parallelism": 1,
        "max_attempts": 3,
        "backoff_base": 0.5,
    },
    "prompt": {"family": "crag", "template_dir": None, "doc_char_cap": DEFAULT_DOC_CHAR_CAP},
    "perturbation": {
        "kind": "none",
        "seed": 0,
        "noise_count": 2,
        "fraction_mode": False,
        "exclusion_depth": DEFAULT_EXCLUSION_DEPTH,
    },
    "demos": {
        "caps": dict(DEFAULT_TASK_CAPS),
        "balance_seed": 0,
        "corrupt": "none",
        "corrupt_seed": 0,
        "force_export": False,
        "student_model": None,
    },
}

_PATH_FIELDS = (("corpus",), ("dataset",), ("output_dir",), ("retrieval", "rankings"), ("backend", "script"), ("prompt", "template_dir"))


@dataclass(frozen=True)
class ConfigIssue:
    field: str
    message: str

    def to_dict(self) -> dict:
        return {"field": self.field, "message": self.message}


class ConfigError(Exception):
    def __init__(self, issues: list[ConfigIssue]):
        self.issues = issues
        super().__init__("; ".join(f"{i.field}: {i.message}" for i in issues))

    def to_dict(self) -> dict:
        return {"category": "config", "errors": [i.to_dict() for i in self.issues]}


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    script: str | None
    default_response: str
    endpoint: str | None
    model: str | None
    api_key_env: str
    timeout: float
    parallelism: int
    max_attempts: int
    backoff_base: float

    @property
    def retry(self) -> RetryPolicy:
        return RetryPolicy(self.max_attempts, self.backoff_base)


@dataclass(frozen=True)
class DemoConfig:
    caps: dict[str, int]
    balance_seed: int
    corrupt: str
    corrupt_seed: int
    force_export: bool
    student_model: str | None


@dataclass(frozen=True)
class RunConfig:
    corpus: str | None
    dataset: str | None
    output_dir: str
    retrieval: RetrievalConfig
    rankings: str | None
    generation: GenerationParams
    backend: BackendConfig
    family: str
    template_dir: str | None
    doc_char_cap: int | None
    perturbation: PerturbationSpec
    demos: DemoConfig
    train_task: str | None
    raw: dict = field(repr=False, compare=False, default_factory=dict)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    @property
    def seeds(self) -> dict:
        return {
            "generation": self.generation.seed,
            "perturbation": self.perturbation.seed,
            "balance": self.demos.balance_seed,
            "corrupt": self.demos.corrupt_seed,
        }

    def fingerprint(self) -> str:
        """Hash of every setting, with input files represented by their content.

        The output directory is left out: where results land does not change them.
        """
        data = self.to_dict()
        data.pop("output_dir", None)
        for path_field in _PATH_FIELDS:
            node = data
            for part in path_field[:-1]:
                node = node.get(part, {})
            key = path_field[-1]
            if key in node and node[key]:
                node[key] = _content_hash(Path(node[key]))
        payload = json.dumps(data, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _content_hash(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
    elif path.is_dir():
        for p in sorted(path.glob("*.txt")):
            h.update(p.name.encode("utf-8") + b"\0" + p.read_bytes())
    else:
        return f"missing:{path.name}"
    return "sha256:" + h.hexdigest()


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict) and key != "caps":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _unknown_keys(raw: Mapping, defaults: Mapping, prefix: str, issues: list[ConfigIssue]) -> None:
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if key not in defaults:
            issues.append(ConfigIssue(name, "unknown field"))
        elif isinstance(defaults[key], dict) and key != "caps":
            if not isinstance(value, Mapping):
                issues.append(ConfigIssue(name, "must be a mapping"))
            else:
                _unknown_keys(value, defaults[key], name + ".", issues)


def _prune(raw: Mapping, defaults: Mapping) -> dict:
    """Drop unknown keys and malformed sections so the rest can still be validated."""
    out = {}
    for key, value in raw.items():
        if key not in defaults:
            continue
        if isinstance(defaults[key], dict) and key != "caps":
            if isinstance(value, Mapping):
                out[key] = _prune(value, defaults[key])
        else:
            out[key] = value
    return out


def set_override(overrides: dict, dotted: str, value: Any) -> None:
    node = overrides
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_config_file(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([ConfigIssue("<file>", f"cannot read {path}: {exc.strerror}")]) from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([ConfigIssue("<file>", f"not valid YAML/JSON: {exc}")]) from exc
    if not isinstance(data, dict):
        raise ConfigError([ConfigIssue("<file>", "top level must be a mapping")])
    return data


def _resolve_paths(data: Mapping, base: Path) -> dict:
    """Copy of ``data`` with relative path fields made absolute against ``base``."""
    data = copy.deepcopy(dict(data))
    for path_field in _PATH_FIELDS:
        node = data
        for part in path_field[:-1]:
            node = node.get(part)
            if not isinstance(node, dict):
                break
        else:
            value = node.get(path_field[-1])
            if isinstance(value, str) and value and not Path(value).is_absolute():
                node[path_field[-1]] = str((base / value).resolve())
    return data


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def build_config(
    file_data: Mapping | None = None,
    overrides: Mapping | None = None,
    base_dir: str | Path | None = None,
    require: tuple[str, ...] = (),
) -> RunConfig:
    """Validate merged settings (defaults < file < overrides) and build a RunConfig.

    Every problem found is reported at once in a :class:`ConfigError`.
    ``require`` names top-level path fields the calling command needs.
    """
    file_data = dict(file_data or {})
    overrides = dict(overrides or {})
    issues: list[ConfigIssue] = []
    _unknown_keys(file_data, DEFAULTS, "", issues)
    _unknown_keys(overrides, DEFAULTS, "", issues)
    file_data = _prune(file_data, DEFAULTS)
    overrides = _prune(overrides, DEFAULTS)

    explicit_noise_count = "noise_count" in file_data.get("perturbation", {}) or "noise_count" in overrides.get("perturbation", {})
    if base_dir is not None:
        file_data = _resolve_paths(file_data, Path(base_dir))
    overrides = _resolve_paths(overrides, Path.cwd())
    raw = _merge(_merge(DEFAULTS, file_data), overrides)

    def check(cond: bool, name: str, message: str) -> None:
        if not cond:
            issues.append(ConfigIssue(name, message))

    for name in ("corpus", "dataset", "train_task"):
        check(raw[name] is None or isinstance(raw[name], str), name, "must be a string")
    check(isinstance(raw["output_dir"], str) and bool(raw["output_dir"]), "output_dir", "must be a non-empty string")
    for name in require:
        if not raw.get(name):
            issues.append(ConfigIssue(name, "required by this command"))
        elif isinstance(raw[name], str) and name != "output_dir" and not Path(raw[name]).is_file():
            issues.append(ConfigIssue(name, f"file not found: {raw[name]}"))
    if raw["train_task"] is not None:
        check(raw["train_task"] in TASKS, "train_task", f"must be one of {list(TASKS)}")

    r = raw["retrieval"]
    check(_is_int(r["top_k"]) and r["top_k"] >= 1, "retrieval.top_k", "must be an integer >= 1")
    check(r["scorer"] in ("bm25", "external-adapter"), "retrieval.scorer", "must be 'bm25' or 'external-adapter'")
    if r["scorer"] == "external-adapter":
        check(bool(r["rankings"]), "retrieval.rankings", "external-adapter scorer needs a rankings file")
    if r["rankings"]:
        check(Path(str(r["rankings"])).is_file(), "retrieval.rankings", f"file not found: {r['rankings']}")

    g = raw["generation"]
    check(_is_number(g["temperature"]) and g["temperature"] >= 0, "generation.temperature", "must be a number >= 0")
    check(_is_int(g["max_new_tokens"]) and g["max_new_tokens"] >= 1, "generation.max_new_tokens", "must be an integer >= 1")
    check(g["decoding"] in ("greedy", "sampled"), "generation.decoding", "must be 'greedy' or 'sampled'")
    check(g["seed"] is None or _is_int(g["seed"]), "generation.seed", "must be an integer or null")

    b = raw["backend"]
    check(b["kind"] in ("mock", "http"), "backend.kind", "must be 'mock' or 'http'")
    check(_is_int(b["parallelism"]) and b["parallelism"] >= 1, "backend.parallelism", "must be an integer >= 1")
    check(_is_int(b["max_attempts"]) and b["max_attempts"] >= 1, "backend.max_attempts", "must be an integer >= 1")
    check(_is_number(b["backoff_base"]) and b["backoff_base"] >= 0, "backend.backoff_base", "must be a number >= 0")
    check(_is_number(b["timeout"]) and b["timeout"] > 0, "backend.timeout", "must be a number > 0")
    check(isinstance(b["default_response"], str), "backend.default_response", "must be a string")
    if b["kind"] == "mock" and b["script"]:
        check(Path(str(b["script"])).is_file(), "backend.script", f"file not found: {b['script']}")
    if b["kind"] == "http":
        check(isinstance(b["endpoint"], str) and bool(b["endpoint"]), "backend.endpoint", "http backend needs an endpoint URL")
        check(isinstance(b["model"], str) and bool(b["model"]), "backend.model", "http backend needs a model name")

    p = raw["prompt"]
    check(p["family"] in FAMILIES, "prompt.family", f"must be one of {list(FAMILIES)}")
    check(p["doc_char_cap"] is None or (_is_int(p["doc_char_cap"]) and p["doc_char_cap"] >= 1), "prompt.doc_char_cap", "must be an integer >= 1 or null")
    if p["template_dir"]:
        check(Path(str(p["template_dir"])).is_dir(), "prompt.template_dir", f"directory not found: {p['template_dir']}")

    pt = raw["perturbation"]
    check(pt["kind"] in ("none", "shuffle", "noise"), "perturbation.kind", "must be 'none', 'shuffle' or 'noise'")
    check(_is_int(pt["seed"]), "perturbation.seed", "must be an integer")
    check(_is_int(pt["noise_count"]) and pt["noise_count"] >= 0, "perturbation.noise_count", "must be an integer >= 0")
    check(isinstance(pt["fraction_mode"], bool), "perturbation.fraction_mode", "must be true or false")
    check(_is_int(pt["exclusion_depth"]) and pt["exclusion_depth"] >= 1, "perturbation.exclusion_depth", "must be an integer >= 1")
    if pt["fraction_mode"] is True and explicit_noise_count:
        issues.append(ConfigIssue("perturbation", "noise_count and fraction_mode are mutually exclusive noise modes"))
    if pt["kind"] == "noise":
        if pt["fraction_mode"] is not True and _is_int(pt["noise_count"]) and pt["noise_count"] < 1:
            issues.append(ConfigIssue("perturbation.noise_count", "noise perturbation needs noise_count >= 1 or fraction_mode"))
        if not raw["corpus"]:
            issues.append(ConfigIssue("corpus", "noise perturbation needs a corpus to draw distractors from"))
        if p["family"] == "baseline":
            issues.append(ConfigIssue("perturbation.kind", "baseline prompts have no documents to perturb"))
    if pt["kind"] == "shuffle" and p["family"] == "baseline":
        issues.append(ConfigIssue("perturbation.kind", "baseline prompts have no documents to perturb"))

    d = raw["demos"]
    caps = d["caps"]
    if not isinstance(caps, Mapping):
        issues.append(ConfigIssue("demos.caps", "must be a mapping of task to count"))
    else:
        for task, cap in caps.items():
            check(task in TASKS, f"demos.caps.{task}", f"unknown task; expected one of {list(TASKS)}")
            check(_is_int(cap) and cap >= 0, f"demos.caps.{task}", "must be an integer >= 0")
    check(_is_int(d["balance_seed"]), "demos.balance_seed", "must be an integer")
    check(_is_int(d["corrupt_seed"]), "demos.corrupt_seed", "must be an integer")
    check(d["corrupt"] in ("none", "misleading", "mixed"), "demos.corrupt", "must be 'none', 'misleading' or 'mixed'")
    check(isinstance(d["force_export"], bool), "demos.force_export", "must be true or false")

    if issues:
        raise ConfigError(issues)

    return RunConfig(
        corpus=raw["corpus"],
        dataset=raw["dataset"],
        output_dir=raw["output_dir"],
        retrieval=RetrievalConfig(r["top_k"], r["scorer"]),
        rankings=r["rankings"],
        generation=GenerationParams(float(g["temperature"]), g["max_new_tokens"], g["decoding"], g["seed"]),
        backend=BackendConfig(
            b["kind"], b["script"], b["default_response"], b["endpoint"], b["model"], b["api_key_env"],
            float(b["timeout"]), b["parallelism"], b["max_attempts"], float(b["backoff_base"]),
        ),
        family=p["family"],
        template_dir=p["template_dir"],
        doc_char_cap=p["doc_char_cap"],
        perturbation=PerturbationSpec(pt["kind"], pt["seed"], pt["noise_count"], pt["fraction_mode"], pt["exclusion_depth"]),
        demos=DemoConfig(dict(caps), d["balance_seed"], d["corrupt"], d["corrupt_seed"], d["force_export"], d["student_model"]),
        train_task=raw["train_task"],
        raw=raw,
    )


def validate_config(
    path: str | Path, overrides: Mapping | None = None, require: tuple[str, ...] = ()
) -> RunConfig:
    """Load, merge and validate a config file; relative paths resolve against its directory."""
    path = Path(path)
    return build_config(load_config_file(path), overrides, base_dir=path.parent, require=require)
