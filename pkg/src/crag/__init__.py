"""Contrastive retrieval-augmented generation: retrieval, prompting, traces, demonstrations and evaluation."""

from .corpus import BM25Index, Corpus, Document, RankedDocuments, RetrievalConfig, build_index, ingest_corpus, retrieve, sample_distractors
from .demos import Demonstration, QaInstance, balance_and_cap, export_sft, filter_citation_coverage, filter_exact_match, funnel_report
from .evaluation import EvalReport, PerturbationSpec, Pipeline, cross_task_report, evaluate, perturb_noise, perturb_shuffle
from .gateway import Completion, GenerationParams, HttpBackend, MockBackend, RetryPolicy, batch_generate, generate
from .metrics import fever_label, fever_match, flexible_exact_match, strict_match
from .prompts import PromptKit, RenderedPrompt, render_baseline, render_crag, render_rag
from .traces import CragTrace, TraceParseError, extract_partition, parse_trace, serialize_trace

__version__ = "0.1.0"

__all__ = [
    "BM25Index", "Completion", "Corpus", "CragTrace", "Demonstration", "Document", "EvalReport",
    "GenerationParams", "HttpBackend", "MockBackend", "PerturbationSpec", "Pipeline", "PromptKit",
    "QaInstance", "RankedDocuments", "RenderedPrompt", "RetrievalConfig", "RetryPolicy", "TraceParseError",
    "balance_and_cap", "batch_generate", "build_index", "cross_task_report", "evaluate", "export_sft",
    "extract_partition", "fever_label", "fever_match", "filter_citation_coverage", "filter_exact_match",
    "flexible_exact_match", "funnel_report", "generate", "ingest_corpus", "parse_trace", "perturb_noise",
    "perturb_shuffle", "render_baseline", "render_crag", "render_rag", "retrieve", "sample_distractors",
    "serialize_trace", "strict_match",
]
