"""Test doubles shared by several test modules."""

from __future__ import annotations

from pathlib import Path

from treerag.gateway import LexicalBackend, ModelGateway, ScriptedBackend, ScriptedOracle
from treerag.prompts import TemplateStore
from treerag.retrieval import Chunk, Retriever, build_index

FIXTURES = Path(__file__).parent / "fixtures"


class FnBackend(LexicalBackend):
    """Completion from a plain function ``(template name, slots, params) -> reply``.

    Embedding and reranking are lexical. Every completion prompt is kept in
    ``self.prompts`` for inspection.
    """

    identity = "fn"

    def __init__(self, fn, templates: TemplateStore | None = None):
        super().__init__()
        self.fn = fn
        self.templates = templates or TemplateStore()
        self.prompts: list[str] = []

    def complete(self, prompt, params):
        self.prompts.append(prompt)
        name, slots = self.templates.match(prompt.split("\n\nYour previous reply")[0])
        reply = self.fn(name, slots, params)
        if isinstance(reply, list):
            return [reply[(params.seed + i) % len(reply)] for i in range(params.sample_count)], False
        return [reply] * params.sample_count, False


def scripted_gateway(path: Path, **kwargs) -> ModelGateway:
    return ModelGateway(ScriptedBackend(ScriptedOracle.from_jsonl(path)), **kwargs)


class TableBackend(LexicalBackend):
    """Embeddings looked up by text; rerank scores looked up by passage."""

    identity = "table"

    def __init__(self, vectors=None, rerank_scores=None):
        super().__init__()
        self.vectors = vectors or {}
        self.rerank_scores = rerank_scores or {}

    def embed(self, texts):
        return [self.vectors[t] for t in texts]

    def rerank(self, query, passages):
        return [self.rerank_scores.get(p, 0.0) for p in passages]


def make_index(vectors: dict[str, list[float]], rerank=None) -> tuple[Retriever, ModelGateway]:
    gw = ModelGateway(TableBackend(vectors, rerank))
    chunks = [Chunk(f"c{i}", "d", 0, 1, t) for i, t in enumerate(t for t in vectors if not t.startswith("?"))]
    return Retriever(build_index(chunks, gw), gw), gw
