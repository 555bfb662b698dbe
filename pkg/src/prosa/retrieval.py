"""Downstream propagation: block-aware chunking and page-internal retrieval.

Parsed element texts are concatenated in output order and split into
chunks preferring element boundaries (target 400 chars, bounds [80, 700],
overlap 80 on forced mid-block splits). Retrieval is Okapi BM25 over the
QA pair's own page only; the metrics check whether evidence and gold
answers remain retrievable after perturbation.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .audit import normalize_text
from .document import AnnotationSet, ParseOutput

TARGET_LEN = 400
MIN_LEN = 80
MAX_LEN = 700
OVERLAP = 80
GLUE = "\n"

BM25_K1 = 1.5
BM25_B = 0.75


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    evidence: str
    page_id: str


@dataclass(frozen=True)
class Chunk:
    text: str
    start: int                      # char offset into the concatenated page text
    end: int
    element_indices: tuple[int, ...]


def page_text(parse: ParseOutput) -> str:
    """Element texts joined in output order (empty texts skipped)."""
    return GLUE.join(e.text for e in parse.elements if e.text)


def chunk(parse: ParseOutput, target: int = TARGET_LEN, min_len: int = MIN_LEN,
          max_len: int = MAX_LEN, overlap: int = OVERLAP) -> list[Chunk]:
    """Block-aware chunking of a parse output.

    Cuts at the largest element boundary within (pos+min, pos+target] when
    one exists; otherwise keeps runs up to max_len whole, or splits at
    target with `overlap` carry-over. Chunks are substrings of the
    concatenated page text, so offsets reconstruct it exactly.
    """
    texts = [(i, e.text) for i, e in enumerate(parse.elements) if e.text]
    if not texts:
        return []
    spans: list[tuple[int, int, int]] = []   # (element index, start, end) in T
    offset = 0
    parts = []
    for i, t in texts:
        if parts:
            offset += len(GLUE)
        spans.append((i, offset, offset + len(t)))
        parts.append(t)
        offset += len(t)
    full = GLUE.join(parts)
    boundaries = [end for _, _, end in spans]

    def elements_in(start: int, end: int) -> tuple[int, ...]:
        return tuple(i for i, s, e in spans if s < end and e > start)

    chunks: list[Chunk] = []
    pos = 0
    n = len(full)
    while pos < n:
        remaining = n - pos
        if remaining <= target:
            chunks.append(Chunk(full[pos:n], pos, n, elements_in(pos, n)))
            break
        cut = None
        for b in boundaries:
            if pos + min_len < b <= pos + target:
                cut = b
        if cut is not None:
            chunks.append(Chunk(full[pos:cut], pos, cut, elements_in(pos, cut)))
            pos = cut + len(GLUE) if cut < n else n
        elif remaining <= max_len:
            chunks.append(Chunk(full[pos:n], pos, n, elements_in(pos, n)))
            break
        else:
            end = pos + target
            chunks.append(Chunk(full[pos:end], pos, end, elements_in(pos, end)))
            pos = end - overlap
    return chunks


# ---------------------------------------------------------------------------
# BM25 ranking
# ---------------------------------------------------------------------------

def _tokenize(text: str) -> list[str]:
    return text.casefold().split()


def bm25_scores(query: str, chunks: list[Chunk],
                k1: float = BM25_K1, b: float = BM25_B) -> list[float]:
    """Okapi BM25 scores with idf = ln(1 + (N - df + 0.5)/(df + 0.5)).

    Query tokens contribute per occurrence; documents are the chunk texts,
    whitespace-tokenized and case-folded.
    """
    docs = [_tokenize(c.text) for c in chunks]
    n = len(docs)
    if n == 0:
        return []
    avgdl = sum(len(d) for d in docs) / n
    tfs = [Counter(d) for d in docs]
    df: Counter = Counter()
    for tf in tfs:
        df.update(tf.keys())
    idf = {t: math.log(1.0 + (n - d + 0.5) / (d + 0.5)) for t, d in df.items()}
    q_tokens = _tokenize(query)
    scores = []
    for tf, doc in zip(tfs, docs):
        dl = len(doc)
        norm = k1 * (1.0 - b + b * (dl / avgdl if avgdl > 0 else 0.0))
        s = 0.0
        for t in q_tokens:
            f = tf.get(t, 0)
            if f:
                s += idf[t] * f * (k1 + 1.0) / (f + norm)
        scores.append(s)
    return scores


def bm25_rank(query: str, chunks: list[Chunk], k: int = 10) -> list[int]:
    """Indices of the top-k chunks by BM25 score; ties keep chunk order."""
    scores = bm25_scores(query, chunks)
    order = sorted(range(len(chunks)), key=lambda i: (-scores[i], i))
    return order[:k]


# ---------------------------------------------------------------------------
# Retrieval metrics
# ---------------------------------------------------------------------------

def _contains(haystack: str, needle: str) -> bool:
    return normalize_text(needle) in normalize_text(haystack)


@dataclass
class RetrievalMetrics:
    n: int
    recall_at_k_evidence: float
    answer_hit_at_k: float
    mrr_at_10_evidence: float
    answer_missing_rate: float
    k: int


def evaluate_retrieval(qas: list[QAPair], parses: dict[str, ParseOutput],
                       k: int = 5, mrr_k: int = 10) -> RetrievalMetrics:
    """Page-internal retrieval over each QA's own page.

    Evidence recall and answer hit test normalized-substring containment in
    any top-k chunk; MRR uses the first evidence-bearing rank in the top
    mrr_k. A QA is answer-missing when the gold answer is absent from the
    whole parsed page text. Pages with empty parses keep their QAs and
    count as misses.
    """
    if not qas:
        raise ValueError("empty QA set")
    chunk_cache: dict[str, list[Chunk]] = {}
    rank_cache: dict[str, str] = {}
    evid_hits = ans_hits = 0
    mrr_total = 0.0
    missing = 0
    for qa in qas:
        parse = parses[qa.page_id]
        if qa.page_id not in chunk_cache:
            chunk_cache[qa.page_id] = chunk(parse)
            rank_cache[qa.page_id] = page_text(parse)
        chunks = chunk_cache[qa.page_id]
        full = rank_cache[qa.page_id]
        if not _contains(full, qa.answer):
            missing += 1
        top = bm25_rank(qa.question, chunks, k=max(k, mrr_k))
        top_k_texts = [chunks[i].text for i in top[:k]]
        if any(_contains(t, qa.evidence) for t in top_k_texts):
            evid_hits += 1
        if any(_contains(t, qa.answer) for t in top_k_texts):
            ans_hits += 1
        for rank, i in enumerate(top[:mrr_k], start=1):
            if _contains(chunks[i].text, qa.evidence):
                mrr_total += 1.0 / rank
                break
    n = len(qas)
    return RetrievalMetrics(
        n=n,
        recall_at_k_evidence=evid_hits / n,
        answer_hit_at_k=ans_hits / n,
        mrr_at_10_evidence=mrr_total / n,
        answer_missing_rate=missing / n,
        k=k,
    )


# ---------------------------------------------------------------------------
# QA files and the deterministic template generator
# ---------------------------------------------------------------------------

def load_qa_file(path: str | Path) -> list[QAPair]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [QAPair(d["question"], d["answer"], d["evidence"], d["page_id"])
            for d in data]


def save_qa_file(qas: list[QAPair], path: str | Path) -> None:
    data = [{"question": q.question, "answer": q.answer,
             "evidence": q.evidence, "page_id": q.page_id} for q in qas]
    Path(path).write_text(json.dumps(data, ensure_ascii=False), encoding="utf-8")


def qa_from_annotations(ann: AnnotationSet) -> list[QAPair]:
    """One template QA per text-bearing block, keyed by its leading marker token."""
    qas = []
    for e in ann.elements:
        if not e.text:
            continue
        # marker kept free of punctuation: queries are whitespace-tokenized
        marker = e.text.split()[0]
        qas.append(QAPair(
            question=f"What is the full text of block {marker}",
            answer=e.text,
            evidence=e.text,
            page_id=ann.page_id,
        ))
    return qas


# ---------------------------------------------------------------------------
# Pluggable dense backend (interface only; BM25 is the bundled ranker)
# ---------------------------------------------------------------------------

class EmbeddingBackend(Protocol):
    def embed(self, texts: list[str]) -> list[list[float]]: ...


def cosine_rank(query: str, chunks: list[Chunk], backend: EmbeddingBackend,
                k: int = 10) -> list[int]:
    vectors = backend.embed([query] + [c.text for c in chunks])
    qv, dvs = vectors[0], vectors[1:]

    def cos(a, b):
        num = sum(x * y for x, y in zip(a, b))
        da = math.sqrt(sum(x * x for x in a))
        db = math.sqrt(sum(y * y for y in b))
        return num / (da * db) if da > 0 and db > 0 else 0.0

    scored = [(cos(qv, dv), i) for i, dv in enumerate(dvs)]
    order = sorted(range(len(chunks)), key=lambda i: (-scored[i][0], i))
    return order[:k]
