"""Model access: completion, embedding and reranking behind one gateway.

Backends:

* ``HttpBackend`` talks to OpenAI-compatible endpoints (``/chat/completions``,
  ``/embeddings``) plus a ``/rerank`` endpoint in the Cohere/Jina shape.
* ``ScriptedBackend`` replays a ``ScriptedOracle`` fixture for tests.
* ``LexicalBackend`` is a deterministic local embedder/reranker (hashed
  bag of words) used when no embedding service is wanted.
* ``RecordingBackend`` wraps another backend and writes what it saw into an
  oracle so a run can be frozen into a replay fixture.

``ModelGateway`` adds validation, L2 normalization of embeddings, sorted
rerank output, a response cache and a call counter on top of any backend.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np

from .text import normalize_answer

logger = logging.getLogger(__name__)

CACHE_FORMAT = "treerag.cache/1"


class GatewayError(RuntimeError):
    """Base class for model access failures."""


class TransportError(GatewayError):
    """The backend could not be reached or kept failing after retries."""


class OracleMiss(GatewayError):
    """A strict scripted oracle has no entry for a request."""


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_output_tokens: int = 512
    sample_count: int = 1
    stop_sequences: tuple[str, ...] = ()
    seed: int = 0

    def validate(self, live: bool = False) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")
        if live and self.sample_count > 1 and self.temperature == 0:
            raise ValueError("sampling more than one response needs temperature > 0")

    def as_request(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "sample_count": self.sample_count,
            "stop": list(self.stop_sequences),
            "seed": self.seed,
        }


@dataclass
class ModelResponse:
    texts: list[str]
    backend_id: str
    cached: bool = False
    truncated: bool = False


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def fingerprint(capability: str, request: dict) -> str:
    payload = canonical_json({"capability": capability, "request": request})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Backend(Protocol):
    identity: str
    live: bool

    def complete(self, prompt: str, params: GenerationParams) -> tuple[list[str], bool]: ...

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...

    def rerank(self, query: str, passages: Sequence[str]) -> list[float]: ...


# ---------------------------------------------------------------------------
# Deterministic local embedder / reranker


def lexical_embed(text: str, dim: int = 256) -> list[float]:
    """Hashed bag of normalized words. One bias bucket keeps the vector non-zero."""
    vec = [0.0] * dim
    vec[0] = 1e-3
    for tok in normalize_answer(text).split():
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
        vec[1 + h % (dim - 1)] += 1.0
    return vec


def lexical_scores(query: str, passages: Sequence[str]) -> list[float]:
    """Token-overlap relevance: |q ∩ p| / sqrt(|q| * |p|) over word sets."""
    q = set(normalize_answer(query).split())
    out = []
    for p in passages:
        ps = set(normalize_answer(p).split())
        if not q or not ps:
            out.append(0.0)
        else:
            out.append(len(q & ps) / math.sqrt(len(q) * len(ps)))
    return out


class LexicalBackend:
    """Embedding and rerank without a model. Completion is not supported."""

    live = False

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.identity = f"lexical:{dim}"

    def complete(self, prompt, params):
        raise GatewayError("the lexical backend cannot generate text")

    def embed(self, texts):
        return [lexical_embed(t, self.dim) for t in texts]

    def rerank(self, query, passages):
        return lexical_scores(query, passages)


# ---------------------------------------------------------------------------
# Scripted oracle


class ScriptedOracle:
    """Fingerprint -> ordered response list, loaded from JSON Lines.

    Each line is one of::

        {"capability": "complete", "request": {"prompt": "..."}, "responses": ["..."]}
        {"fingerprint": "<sha256>", "responses": [...]}
        {"_meta": {"embed": "lexical", "rerank": "lexical"}}

    The ``_meta`` line names an explicit deterministic fallback for embed or
    rerank requests that have no entry. Completion never falls back in
    strict mode.
    """

    def __init__(self, strict: bool = True):
        self.entries: dict[str, list] = {}
        self.requests: dict[str, tuple[str, dict]] = {}
        self.strict = strict
        self.meta: dict[str, str] = {}

    def add(self, capability: str, request: dict, responses: list) -> str:
        key = fingerprint(capability, request)
        self.entries[key] = list(responses)
        self.requests[key] = (capability, request)
        return key

    def lookup(self, capability: str, request: dict) -> list | None:
        return self.entries.get(fingerprint(capability, request))

    @classmethod
    def from_jsonl(cls, path: str | Path, strict: bool = True) -> "ScriptedOracle":
        oracle = cls(strict=strict)
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
                if "_meta" in rec:
                    oracle.meta.update(rec["_meta"])
                elif "fingerprint" in rec:
                    oracle.entries[rec["fingerprint"]] = list(rec["responses"])
                elif "capability" in rec and "request" in rec:
                    oracle.add(rec["capability"], rec["request"], rec["responses"])
                else:
                    raise ValueError(f"{path}:{lineno}: unrecognized oracle record")
        return oracle

    def to_jsonl(self, path: str | Path) -> None:
        lines = []
        if self.meta:
            lines.append(canonical_json({"_meta": self.meta}))
        for key in sorted(self.entries):
            if key in self.requests:
                cap, req = self.requests[key]
                rec = {"capability": cap, "request": req, "responses": self.entries[key]}
            else:
                rec = {"fingerprint": key, "responses": self.entries[key]}
            lines.append(canonical_json(rec))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def digest(self) -> str:
        h = hashlib.sha256(canonical_json(self.meta).encode())
        for key in sorted(self.entries):
            h.update(key.encode())
            h.update(canonical_json(self.entries[key]).encode())
        return h.hexdigest()[:16]


class ScriptedBackend:
    """Replays an oracle. Sample ``i`` of a completion with seed ``s`` is
    ``responses[(s + i) % len(responses)]``, so a 5-entry list answers an
    ``n=5`` request in order and ``n=1`` requests with seeds 0..4 walk the
    list one entry at a time."""

    live = False

    def __init__(self, oracle: ScriptedOracle):
        self.oracle = oracle
        self.identity = f"scripted:{oracle.digest()}"
        self._lexical = LexicalBackend()

    def _miss(self, capability: str, request: dict):
        if self.oracle.strict:
            raise OracleMiss(
                f"no scripted {capability} response for fingerprint "
                f"{fingerprint(capability, request)[:12]}: {canonical_json(request)[:200]}"
            )

    def complete(self, prompt, params):
        request = {"prompt": prompt}
        responses = self.oracle.lookup("complete", request)
        if not responses:
            self._miss("complete", request)
            responses = [""]
        n = len(responses)
        return [str(responses[(params.seed + i) % n]) for i in range(params.sample_count)], False

    def embed(self, texts):
        out = []
        for t in texts:
            request = {"text": t}
            hit = self.oracle.lookup("embed", request)
            if hit:
                out.append([float(x) for x in hit[0]])
            elif self.oracle.meta.get("embed") == "lexical" or not self.oracle.strict:
                out.append(self._lexical.embed([t])[0])
            else:
                self._miss("embed", request)
        return out

    def rerank(self, query, passages):
        request = {"query": query, "passages": list(passages)}
        hit = self.oracle.lookup("rerank", request)
        if hit:
            return [float(x) for x in hit[0]]
        if self.oracle.meta.get("rerank") == "lexical" or not self.oracle.strict:
            return self._lexical.rerank(query, passages)
        self._miss("rerank", request)


class RecordingBackend:
    """Pass-through that stores every request/response into ``oracle``."""

    def __init__(self, inner: Backend, oracle: ScriptedOracle | None = None):
        self.inner = inner
        self.oracle = oracle or ScriptedOracle()
        self.identity = inner.identity
        self.live = inner.live
        self._lock = threading.Lock()

    def complete(self, prompt, params):
        texts, truncated = self.inner.complete(prompt, params)
        with self._lock:
            prev = self.oracle.lookup("complete", {"prompt": prompt}) or []
            if len(texts) > len(prev):
                self.oracle.add("complete", {"prompt": prompt}, texts)
        return texts, truncated

    def embed(self, texts):
        vectors = self.inner.embed(texts)
        with self._lock:
            for t, v in zip(texts, vectors):
                self.oracle.add("embed", {"text": t}, [v])
        return vectors

    def rerank(self, query, passages):
        scores = self.inner.rerank(query, passages)
        with self._lock:
            self.oracle.add("rerank", {"query": query, "passages": list(passages)}, [scores])
        return scores


# ---------------------------------------------------------------------------
# Live HTTP backend


class _Retryable(Exception):
    pass


class HttpBackend:
    """OpenAI-compatible endpoints with bounded exponential backoff.

    Retries transport errors and HTTP 429 only: ``attempts`` tries, sleeping
    ``backoff``, ``2*backoff``, ... seconds between them.
    """

    live = True

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        chat_model: str = "gpt-4o-mini",
        embed_model: str = "text-embedding-3-small",
        rerank_model: str = "bge-reranker-base",
        rerank_url: str | None = None,
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.rerank_url = (rerank_url or self.base_url).rstrip("/")
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.rerank_model = rerank_model
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self.identity = f"http:{self.base_url}|{chat_model}|{embed_model}|{rerank_model}"

    @classmethod
    def from_env(cls, **overrides) -> "HttpBackend":
        kwargs = {
            "base_url": os.environ.get("TREERAG_BASE_URL") or os.environ.get("OPENAI_BASE_URL")
            or "https://api.openai.com/v1",
            "api_key": os.environ.get("TREERAG_API_KEY") or os.environ.get("OPENAI_API_KEY"),
            "rerank_url": os.environ.get("TREERAG_RERANK_URL"),
        }
        for env, key in (
            ("TREERAG_CHAT_MODEL", "chat_model"),
            ("TREERAG_EMBED_MODEL", "embed_model"),
            ("TREERAG_RERANK_MODEL", "rerank_model"),
        ):
            if os.environ.get(env):
                kwargs[key] = os.environ[env]
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def _post(self, url: str, payload: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.attempts):
            try:
                resp = self._client.post(url, json=payload)
                if resp.status_code == 429:
                    raise _Retryable(f"HTTP 429 from {url}")
                if resp.status_code >= 400:
                    raise GatewayError(f"HTTP {resp.status_code} from {url}: {resp.text[:300]}")
                return resp.json()
            except (httpx.TransportError, _Retryable) as exc:
                last = exc
                if attempt + 1 < self.attempts:
                    delay = self.backoff * (2**attempt)
                    logger.warning("retrying %s in %.1fs (%s)", url, delay, exc)
                    self._sleep(delay)
        raise TransportError(f"{url} failed after {self.attempts} attempts: {last}")

    def _chat(self, prompt: str, params: GenerationParams, n: int, seed: int) -> dict:
        payload = {
            "model": self.chat_model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
            "n": n,
            "seed": seed,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        return self._post(f"{self.base_url}/chat/completions", payload)

    def complete(self, prompt, params):
        data = self._chat(prompt, params, params.sample_count, params.seed)
        choices = sorted(data.get("choices", []), key=lambda c: c.get("index", 0))
        texts = [(c.get("message") or {}).get("content") or "" for c in choices]
        truncated = any(c.get("finish_reason") == "length" for c in choices)
        # Servers that ignore ``n`` get the remainder as single requests with distinct seeds.
        while len(texts) < params.sample_count:
            extra = self._chat(prompt, params, 1, params.seed + len(texts))
            choice = extra["choices"][0]
            texts.append((choice.get("message") or {}).get("content") or "")
            truncated = truncated or choice.get("finish_reason") == "length"
        return texts[: params.sample_count], truncated

    def embed(self, texts):
        data = self._post(
            f"{self.base_url}/embeddings", {"model": self.embed_model, "input": list(texts)}
        )
        rows = sorted(data["data"], key=lambda r: r.get("index", 0))
        return [r["embedding"] for r in rows]

    def rerank(self, query, passages):
        data = self._post(
            f"{self.rerank_url}/rerank",
            {"model": self.rerank_model, "query": query, "documents": list(passages)},
        )
        rows = data["results"] if isinstance(data, dict) else data
        scores = [None] * len(passages)
        for row in rows:
            scores[row["index"]] = float(row.get("relevance_score", row.get("score")))
        if any(s is None for s in scores):
            raise GatewayError("rerank response is missing scores")
        return scores


# ---------------------------------------------------------------------------
# Cache


class ResponseCache:
    """Content-addressed request/response store.

    On disk, each record is ``<dir>/<key[:2]>/<key>.json`` holding
    ``{"format", "key", "capability", "backend", "request", "response"}``.
    Without a directory the cache lives in memory.
    """

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else None
        self._mem: dict[str, object] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @staticmethod
    def key(capability: str, backend_id: str, request: dict) -> str:
        payload = canonical_json({"capability": capability, "backend": backend_id, "request": request})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str):
        if key in self._mem:
            return self._mem[key]
        if self.directory is not None:
            path = self._path(key)
            if path.exists():
                rec = json.loads(path.read_text(encoding="utf-8"))
                self._mem[key] = rec["response"]
                return rec["response"]
        return None

    def put(self, key: str, capability: str, backend_id: str, request: dict, response) -> None:
        self._mem[key] = response
        if self.directory is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        rec = {
            "format": CACHE_FORMAT,
            "key": key,
            "capability": capability,
            "backend": backend_id,
            "request": request,
            "response": response,
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(canonical_json(rec), encoding="utf-8")
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Gateway


@dataclass
class CallCounter:
    complete: int = 0
    embed: int = 0
    rerank: int = 0
    cached: int = 0

    @property
    def total(self) -> int:
        return self.complete + self.embed + self.rerank


class ModelGateway:
    """Uniform, thread-safe access to completion, embedding and reranking.

    ``parallelism`` bounds the number of in-flight backend requests.
    """

    def __init__(
        self,
        backend: Backend,
        retrieval_backend: Backend | None = None,
        cache: ResponseCache | None = None,
        parallelism: int = 4,
        embed_batch: int = 64,
    ):
        self.backend = backend
        self.retrieval_backend = retrieval_backend or backend
        self.cache = cache
        self.embed_batch = embed_batch
        self.calls = CallCounter()
        self._slots = threading.BoundedSemaphore(max(1, parallelism))
        self._count_lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        if self.retrieval_backend is self.backend:
            return self.backend.identity
        return f"{self.backend.identity}+{self.retrieval_backend.identity}"

    def _count(self, capability: str, cached: bool = False) -> None:
        with self._count_lock:
            setattr(self.calls, capability, getattr(self.calls, capability) + 1)
            if cached:
                self.calls.cached += 1

    def _cached_call(self, capability: str, backend: Backend, request: dict, fn):
        if self.cache is None:
            with self._slots:
                return fn(), False
        key = ResponseCache.key(capability, backend.identity, request)
        with self.cache.lock_for(key):
            hit = self.cache.get(key)
            if hit is not None:
                return hit, True
            with self._slots:
                result = fn()
            self.cache.put(key, capability, backend.identity, request, result)
            return result, False

    def complete(self, prompt: str, params: GenerationParams | None = None) -> ModelResponse:
        params = params or GenerationParams()
        if not prompt:
            raise ValueError("prompt must be non-empty")
        params.validate(live=self.backend.live)
        request = {"prompt": prompt, **params.as_request()}

        def call():
            texts, truncated = self.backend.complete(prompt, params)
            return {"texts": list(texts), "truncated": bool(truncated)}

        result, cached = self._cached_call("complete", self.backend, request, call)
        self._count("complete", cached)
        texts = result["texts"]
        if len(texts) != params.sample_count:
            raise GatewayError(f"expected {params.sample_count} samples, got {len(texts)}")
        if result["truncated"]:
            logger.warning("completion hit max_output_tokens=%d", params.max_output_tokens)
        return ModelResponse(texts, self.backend.identity, cached, result["truncated"])

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        texts = list(texts)
        if not texts:
            return []
        if any(not t for t in texts):
            raise ValueError("cannot embed empty text")
        out: list[list[float]] = []
        for i in range(0, len(texts), self.embed_batch):
            batch = texts[i : i + self.embed_batch]
            vectors, cached = self._cached_call(
                "embed", self.retrieval_backend, {"texts": batch}, lambda b=batch: self.retrieval_backend.embed(b)
            )
            self._count("embed", cached)
            if len(vectors) != len(batch):
                raise GatewayError(f"embedding count mismatch: {len(vectors)} for {len(batch)} texts")
            out.extend(vectors)
        arr = np.asarray(out, dtype=np.float64)
        if arr.ndim != 2:
            raise GatewayError("embedding dimension mismatch within batch")
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise GatewayError("backend returned a zero embedding vector")
        return (arr / norms).tolist()

    def rerank(self, query: str, passages: Sequence[str]) -> list[tuple[int, float]]:
        passages = list(passages)
        if not passages:
            raise ValueError("rerank needs at least one passage")
        request = {"query": query, "passages": passages}
        scores, cached = self._cached_call(
            "rerank", self.retrieval_backend, request, lambda: self.retrieval_backend.rerank(query, passages)
        )
        self._count("rerank", cached)
        if len(scores) != len(passages):
            raise GatewayError(f"rerank returned {len(scores)} scores for {len(passages)} passages")
        return sorted(enumerate(float(s) for s in scores), key=lambda p: (-p[1], p[0]))

