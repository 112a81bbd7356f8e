"""Document corpus, lexical BM25 index and top-k retrieval."""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

BM25_K1 = 1.2
BM25_B = 0.75
DEFAULT_TOP_K = 5
DEFAULT_EXCLUSION_DEPTH = 100

# Scores closer than this are treated as tied and ordered by document id.
SCORE_DECIMALS = 9

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class CorpusError(Exception):
    """Raised for unreadable or inconsistent corpus input."""


class EmptyQueryError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    body: str

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("document id must be non-empty")
        if not self.body.strip():
            raise CorpusError(f"document {self.id!r} has an empty body")

    @property
    def text(self) -> str:
        """Title and body joined, the unit that gets indexed."""
        return f"{self.title} {self.body}" if self.title else self.body


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = DEFAULT_TOP_K
    scorer: str = "bm25"  # "bm25" | "external-adapter"

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.scorer not in ("bm25", "external-adapter"):
            raise ValueError(f"unknown scorer {self.scorer!r}")


@dataclass(frozen=True)
class RankedDocuments:
    query_id: str
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        ids = [doc_id for doc_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("ranking contains duplicate document ids")
        scores = [score for _, score in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("ranking scores must be non-increasing")

    @property
    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


class Corpus:
    """An ordered, id-unique collection of documents."""

    def __init__(self, documents: Iterable[Document] = ()) -> None:
        self._docs: dict[str, Document] = {}
        for doc in documents:
            if doc.id in self._docs:
                raise CorpusError(f"duplicate document id {doc.id!r}")
            self._docs[doc.id] = doc

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self):
        return iter(self._docs.values())

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self._docs

    def __getitem__(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def get(self, doc_id: str) -> Document | None:
        return self._docs.get(doc_id)

    @property
    def ids(self) -> list[str]:
        return list(self._docs)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for doc in sorted(self._docs.values(), key=lambda d: d.id):
            h.update(json.dumps([doc.id, doc.title, doc.body], ensure_ascii=False).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def ingest_corpus(path: str | Path) -> Corpus:
    """Read a JSON Lines corpus with one ``{"id", "title", "text"}`` object per line.

    Blank lines are not allowed: the document count must equal the line count.
    Errors name the 1-based line number they occurred on.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc

    docs: dict[str, Document] = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise CorpusError(f"{path}:{lineno}: expected a JSON object")
        missing = [k for k in ("id", "title", "text") if not isinstance(obj.get(k), str)]
        if missing:
            raise CorpusError(f"{path}:{lineno}: missing or non-string field(s) {', '.join(missing)}")
        doc_id = obj["id"]
        if doc_id in docs:
            raise CorpusError(f"{path}:{lineno}: duplicate id {doc_id!r}")
        try:
            docs[doc_id] = Document(doc_id, obj["title"], obj["text"])
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return Corpus(docs.values())


def write_corpus(corpus: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus:
            fh.write(json.dumps({"id": doc.id, "title": doc.title, "text": doc.body}, ensure_ascii=False))
            fh.write("\n")


class Retriever(Protocol):
    corpus: Corpus

    def rank(self, question: str, top_k: int, query_id: str | None = None) -> RankedDocuments: ...


def query_fingerprint(question: str) -> str:
    return hashlib.sha256(question.encode("utf-8")).hexdigest()[:16]


class BM25Index:
    """Okapi BM25 over an immutable corpus.

    Postings are computed once at build time; ``rank`` only reads them, so
    one index can serve any number of threads.
    """

    def __init__(self, corpus: Corpus, k1: float = BM25_K1, b: float = BM25_B) -> None:
        if len(corpus) == 0:
            raise CorpusError("cannot build an index over an empty corpus")
        self.corpus = corpus
        self.k1 = k1
        self.b = b
        # Fixed document order (sorted ids) makes the index independent of file line order.
        self.doc_ids: list[str] = sorted(corpus.ids)
        self.doc_lengths: list[int] = []
        self.postings: dict[str, list[tuple[int, int]]] = {}
        for idx, doc_id in enumerate(self.doc_ids):
            tokens = tokenize(corpus[doc_id].text)
            self.doc_lengths.append(len(tokens))
            tf: dict[str, int] = {}
            for tok in tokens:
                tf[tok] = tf.get(tok, 0) + 1
            for term, count in tf.items():
                self.postings.setdefault(term, []).append((idx, count))
        self.n_docs = len(self.doc_ids)
        self.avgdl = sum(self.doc_lengths) / self.n_docs
        self.idf: dict[str, float] = {
            term: math.log((self.n_docs - len(plist) + 0.5) / (len(plist) + 0.5) + 1.0)
            for term, plist in self.postings.items()
        }

    def __len__(self) -> int:
        return self.n_docs

    def scores(self, question: str) -> list[float]:
        """BM25 score of every document (in ``doc_ids`` order) for ``question``."""
        terms = tokenize(question)
        if not terms:
            raise EmptyQueryError("question has no indexable terms")
        acc = [0.0] * self.n_docs
        avgdl = self.avgdl if self.avgdl > 0 else 1.0
        for term in terms:
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf[term]
            for idx, tf in plist:
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_lengths[idx] / avgdl)
                acc[idx] += idf * tf * (self.k1 + 1.0) / (tf + norm)
        return acc

    def rank(self, question: str, top_k: int, query_id: str | None = None) -> RankedDocuments:
        acc = self.scores(question)
        order = sorted(
            range(self.n_docs),
            key=lambda i: (-round(acc[i], SCORE_DECIMALS), self.doc_ids[i]),
        )[:top_k]
        entries = tuple((self.doc_ids[i], round(acc[i], SCORE_DECIMALS)) for i in order)
        return RankedDocuments(query_id or query_fingerprint(question), entries)

    def to_dict(self) -> dict:
        return {
            "k1": self.k1,
            "b": self.b,
            "n_docs": self.n_docs,
            "avgdl": self.avgdl,
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths,
            "vocabulary_size": len(self.postings),
            "corpus_fingerprint": self.corpus.fingerprint(),
        }


class ExternalRankings:
    """Replays precomputed rankings, e.g. from a dense retriever run elsewhere.

    The file holds ``{"query_id": str, "ranking": [doc_id, ...]}`` per line.
    Scores are synthesized from rank position since only the order is known.
    """

    def __init__(self, corpus: Corpus, rankings: Mapping[str, Sequence[str]]) -> None:
        self.corpus = corpus
        self.rankings: dict[str, list[str]] = {}
        for qid, ranking in rankings.items():
            unknown = [d for d in ranking if d not in corpus]
            if unknown:
                raise CorpusError(f"ranking for {qid!r} references unknown documents {unknown[:3]}")
            if len(set(ranking)) != len(ranking):
                raise CorpusError(f"ranking for {qid!r} has duplicate documents")
            self.rankings[qid] = list(ranking)

    @classmethod
    def from_file(cls, corpus: Corpus, path: str | Path) -> "ExternalRankings":
        rankings: dict[str, list[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    rankings[str(obj["query_id"])] = [str(d) for d in obj["ranking"]]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CorpusError(f"{path}:{lineno}: bad ranking record ({exc})") from exc
        return cls(corpus, rankings)

    def __len__(self) -> int:
        return len(self.corpus)

    def rank(self, question: str, top_k: int, query_id: str | None = None) -> RankedDocuments:
        if not tokenize(question):
            raise EmptyQueryError("question has no indexable terms")
        if query_id is None or query_id not in self.rankings:
            raise CorpusError(f"no precomputed ranking for query {query_id!r}")
        ranking = self.rankings[query_id][:top_k]
        n = len(ranking)
        return RankedDocuments(query_id, tuple((doc_id, float(n - i)) for i, doc_id in enumerate(ranking)))


def build_index(corpus: Corpus) -> BM25Index:
    return BM25Index(corpus)


def retrieve(
    index: Retriever,
    question: str,
    cfg: RetrievalConfig = RetrievalConfig(),
    query_id: str | None = None,
) -> RankedDocuments:
    """Top ``cfg.top_k`` documents for ``question``; ties go to the smaller id."""
    if not question.strip():
        raise EmptyQueryError("question is empty")
    return index.rank(question, cfg.top_k, query_id=query_id)


def sample_distractors(
    index: BM25Index,
    question: str,
    n: int,
    exclusion_depth: int = DEFAULT_EXCLUSION_DEPTH,
    seed: int = 0,
) -> list[Document]:
    """Sample ``n`` documents uniformly from outside the question's top ``exclusion_depth``."""
    if n < 0 or exclusion_depth < 1:
        raise ValueError("n must be >= 0 and exclusion_depth >= 1")
    if n == 0:
        return []
    excluded = set(index.rank(question, exclusion_depth).doc_ids)
    candidates = [d for d in index.doc_ids if d not in excluded]
    if len(candidates) < n:
        raise CorpusError(
            f"corpus of {len(index.doc_ids)} documents cannot supply {n} distractors "
            f"outside the top {exclusion_depth}"
        )
    rng = random.Random(seed)
    return [index.corpus[d] for d in rng.sample(candidates, n)]

