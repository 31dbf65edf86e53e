"""Corpus chunking, exact dense index, coarse/fine ranking and context packing."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .gateway import ModelGateway
from .text import token_spans, tokenize

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"TREERAG-INDEX\n"
INDEX_VERSION = 1

__all__ = [
    "Chunk",
    "ContextBundle",
    "RetrievalConfig",
    "Retriever",
    "VectorIndex",
    "assemble_context",
    "build_index",
    "chunk_document",
    "chunk_spans",
    "load_corpus",
    "load_index",
    "save_index",
    "tokenize",
    "top_k",
]


@dataclass(frozen=True)
class RetrievalConfig:
    chunk_size: int = 200
    overlap: int = 100
    coarse_k: int = 45
    fine_k: int = 15
    context_budget: int = 3000

    def __post_init__(self):
        for name in ("chunk_size", "coarse_k", "fine_k", "context_budget"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.overlap < self.chunk_size:
            raise ValueError("overlap must be in [0, chunk_size)")
        if self.fine_k > self.coarse_k:
            raise ValueError("fine_k must not exceed coarse_k")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    start: int
    end: int
    text: str

    @property
    def token_count(self) -> int:
        return self.end - self.start

    @property
    def token_span(self) -> tuple[int, int]:
        return (self.start, self.end)


def chunk_spans(n_tokens: int, chunk_size: int, overlap: int) -> list[tuple[int, int]]:
    """Token windows starting every ``chunk_size - overlap`` tokens.

    The last window is the first one that reaches ``n_tokens`` and may be
    shorter than ``chunk_size``.
    """
    if n_tokens <= 0:
        return []
    stride = chunk_size - overlap
    spans = []
    start = 0
    while True:
        end = min(start + chunk_size, n_tokens)
        spans.append((start, end))
        if end == n_tokens:
            return spans
        start += stride


def chunk_document(doc: str, config: RetrievalConfig | None = None, doc_id: str = "doc") -> list[Chunk]:
    config = config or RetrievalConfig()
    offsets = token_spans(doc)
    chunks = []
    for i, (s, e) in enumerate(chunk_spans(len(offsets), config.chunk_size, config.overlap)):
        text = doc[offsets[s][0] : offsets[e - 1][1]]
        chunks.append(Chunk(f"{doc_id}#{i}", doc_id, s, e, text))
    return chunks


@dataclass(frozen=True)
class VectorIndex:
    chunks: tuple[Chunk, ...]
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = [c.chunk_id for c in self.chunks]
        if len(set(ids)) != len(ids):
            raise ValueError("chunk ids must be unique")
        if self.vectors.shape[0] != len(ids):
            raise ValueError("one vector per chunk required")
        self.vectors.setflags(write=False)

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.size else 0

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def entries(self) -> list[tuple[str, np.ndarray]]:
        return [(c.chunk_id, v) for c, v in zip(self.chunks, self.vectors)]

    def chunk(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]

    @cached_property
    def _by_id(self) -> dict[str, Chunk]:
        return {c.chunk_id: c for c in self.chunks}

    @classmethod
    def empty(cls) -> "VectorIndex":
        return cls((), np.zeros((0, 0)))


def build_index(chunks: Sequence[Chunk], gateway: ModelGateway) -> VectorIndex:
    if not chunks:
        raise ValueError("cannot build an index from zero chunks")
    vectors = gateway.embed([c.text for c in chunks])
    return VectorIndex(tuple(chunks), np.asarray(vectors, dtype=np.float64))


def top_k(vectors: np.ndarray, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k rows by dot product; ties go to the lower row index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = vectors @ query
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(i), float(scores[i])) for i in order]


def assemble_context(
    ranked: Sequence[tuple[str, float]], budget: int, token_counts: Mapping[str, int]
) -> "ContextBundle":
    """Greedy packing in rank order. A chunk that does not fit is skipped and
    later, smaller chunks are still considered. Chunks are never truncated."""
    taken: list[tuple[str, float]] = []
    seen: set[str] = set()
    total = 0
    for chunk_id, score in ranked:
        if chunk_id in seen:
            continue
        n = token_counts[chunk_id]
        if total + n > budget:
            continue
        seen.add(chunk_id)
        taken.append((chunk_id, score))
        total += n
    return ContextBundle(taken, total, budget)


@dataclass
class ContextBundle:
    ranked_chunks: list[tuple[str, float]]
    total_tokens: int
    budget: int
    texts: list[str] = field(default_factory=list)

    def render(self) -> str:
        return "\n\n".join(f"[{i}] {t}" for i, t in enumerate(self.texts, 1))


class Retriever:
    """Coarse dense retrieval, reranking and context packing over one index."""

    def __init__(self, index: VectorIndex, gateway: ModelGateway, config: RetrievalConfig | None = None):
        self.index = index
        self.gateway = gateway
        self.config = config or RetrievalConfig()
        self._counts = {c.chunk_id: c.token_count for c in index.chunks}

    def coarse_retrieve(self, query: str, k: int | None = None) -> list[tuple[str, float]]:
        if len(self.index) == 0:
            return []
        qvec = np.asarray(self.gateway.embed([query])[0])
        if qvec.shape[0] != self.index.dimension:
            raise ValueError(f"query dimension {qvec.shape[0]} != index dimension {self.index.dimension}")
        hits = top_k(self.index.vectors, qvec, k or self.config.coarse_k)
        return [(self.index.chunks[i].chunk_id, s) for i, s in hits]

    def fine_rank(self, query: str, candidates: Sequence[tuple[str, float]], k: int | None = None):
        if not candidates:
            raise ValueError("fine_rank needs at least one candidate")
        texts = [self.index.chunk(cid).text for cid, _ in candidates]
        order = self.gateway.rerank(query, texts)
        return [(candidates[i][0], score) for i, score in order[: k or self.config.fine_k]]

    def assemble_context(self, ranked: Sequence[tuple[str, float]], budget: int | None = None) -> ContextBundle:
        bundle = assemble_context(ranked, budget or self.config.context_budget, self._counts)
        bundle.texts = [self.index.chunk(cid).text for cid, _ in bundle.ranked_chunks]
        return bundle

    def retrieve(self, query: str) -> ContextBundle:
        coarse = self.coarse_retrieve(query)
        if not coarse:
            return ContextBundle([], 0, self.config.context_budget)
        return self.assemble_context(self.fine_rank(query, coarse))


# ---------------------------------------------------------------------------
# Corpus and index files


def load_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Read ``(doc_id, text)`` pairs from JSON Lines.

    Lines carry ``doc_id`` and ``text``; a LongBench record (``context``
    field) contributes one document per passage.
    """
    from .evaluation import split_passages

    docs: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if "text" in rec and "doc_id" in rec:
                docs.append((str(rec["doc_id"]), rec["text"]))
            elif "context" in rec:
                rid = str(rec.get("_id", lineno))
                for i, (title, text) in enumerate(split_passages(rec["context"])):
                    docs.append((f"{rid}:p{i}", f"{title}\n{text}" if title else text))
            else:
                raise ValueError(f"{path}:{lineno}: expected doc_id/text or context fields")
    return docs


def chunk_corpus(docs: Iterable[tuple[str, str]], config: RetrievalConfig) -> list[Chunk]:
    chunks: list[Chunk] = []
    for doc_id, text in docs:
        chunks.extend(chunk_document(text, config, doc_id))
    return chunks


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Write the index as magic line, JSON header line, raw little-endian float64 matrix.

    Written to a temporary name first so a failed write leaves no artifact.
    """
    header = {
        "version": INDEX_VERSION,
        "dimension": index.dimension,
        "count": len(index),
        "chunks": [[c.chunk_id, c.doc_id, c.start, c.end, c.text] for c in index.chunks],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())
    tmp.replace(path)


def load_index(path: str | Path) -> VectorIndex:
    with open(path, "rb") as fh:
        if fh.readline() != INDEX_MAGIC:
            raise ValueError(f"{path} is not an index file")
        header = json.loads(fh.readline())
        if header.get("version") != INDEX_VERSION:
            raise ValueError(f"{path}: index version {header.get('version')} != {INDEX_VERSION}")
        raw = fh.read()
    n, dim = header["count"], header["dimension"]
    vectors = np.frombuffer(raw, dtype="<f8").reshape(n, dim).astype(np.float64)
    chunks = tuple(Chunk(cid, did, s, e, t) for cid, did, s, e, t in header["chunks"])
    return VectorIndex(chunks, vectors)
