"""EM/F1 scoring, LongBench-style dataset loading and evaluation reports.

Dataset lines are JSON objects with LongBench field names:

* ``input``: the question
* ``answers``: list of gold answers (a bare string is accepted)
* ``context``: passages, each introduced by a line ``Passage <n>:`` (the
  bytes ``Passage``, a space, decimal digits, ``:``, ``\\n``). The first line
  after the marker is the passage title, the remaining lines its text.
* ``_id``: sample identifier (optional; defaults to ``line-<n>``)
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .retrieval import RetrievalConfig, VectorIndex, build_index, chunk_document
from .text import normalize_answer

logger = logging.getLogger(__name__)

PASSAGE_RE = re.compile(r"^Passage \d+:\n", re.MULTILINE)
REPORT_FORMAT = "treerag.report/1"

__all__ = [
    "EvalRecord",
    "EvalReport",
    "EvalSample",
    "exact_match",
    "f1",
    "load_dataset",
    "normalize_answer",
    "run_eval",
    "split_passages",
]


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("at least one gold answer is required")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1_single(prediction: str, gold: str) -> float:
    pred = normalize_answer(prediction).split()
    ref = normalize_answer(gold).split()
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, golds: Sequence[str]) -> float:
    """Bag-of-tokens F1 against the best-matching gold answer."""
    if not golds:
        raise ValueError("at least one gold answer is required")
    return max(_f1_single(prediction, g) for g in golds)


# ---------------------------------------------------------------------------


@dataclass
class EvalSample:
    sample_id: str
    question: str
    gold_answers: list[str]
    context_passages: list[tuple[str, str]] = field(default_factory=list)


def split_passages(context: str) -> list[tuple[str, str]]:
    """Split a LongBench context into ``(title, text)`` passages."""
    if not context.strip():
        return []
    marks = list(PASSAGE_RE.finditer(context))
    if not marks:
        return [("", context.strip())]
    out = []
    for m, nxt in zip(marks, marks[1:] + [None]):
        body = context[m.end() : nxt.start() if nxt else len(context)]
        title, _, text = body.partition("\n")
        out.append((title.strip(), text.strip()))
    return out


def load_dataset(path: str | Path) -> list[EvalSample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                question = rec["input"]
                answers = rec["answers"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc!r})") from None
            if isinstance(answers, str):
                answers = [answers]
            if not isinstance(question, str) or not question.strip():
                raise ValueError(f"{path}:{lineno}: empty question")
            if not answers or not all(isinstance(a, str) and a.strip() for a in answers):
                raise ValueError(f"{path}:{lineno}: gold answers must be non-empty strings")
            samples.append(
                EvalSample(
                    str(rec.get("_id", f"line-{lineno}")),
                    question,
                    list(answers),
                    split_passages(rec.get("context", "") or ""),
                )
            )
    if not samples:
        raise ValueError(f"{path}: dataset is empty")
    return samples


@dataclass
class EvalRecord:
    sample_id: str
    prediction: str
    em: int
    f1: float
    rounds_used: int
    trace_path: str | None = None
    error: str | None = None


@dataclass
class EvalReport:
    dataset: str
    sample_count: int
    mean_f1: float
    mean_em: float
    records: list[EvalRecord]

    @classmethod
    def from_records(cls, dataset: str, records: list[EvalRecord]) -> "EvalReport":
        n = len(records)
        mean_f1 = round(100 * sum(r.f1 for r in records) / n, 2) if n else 0.0
        mean_em = round(100 * sum(r.em for r in records) / n, 2) if n else 0.0
        return cls(dataset, n, mean_f1, mean_em, records)

    def summary(self) -> str:
        return f"F1 {self.mean_f1:.2f} EM {self.mean_em:.2f}"

    def table(self) -> str:
        width = max(len("dataset"), len(self.dataset))
        head = f"{'dataset':<{width}}  {'n':>5}  {'F1':>6}  {'EM':>6}"
        row = f"{self.dataset:<{width}}  {self.sample_count:>5}  {self.mean_f1:>6.2f}  {self.mean_em:>6.2f}"
        return f"{head}\n{row}"

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        records = [EvalRecord(**r) for r in data["records"]]
        return cls(data["dataset"], data["sample_count"], data["mean_f1"], data["mean_em"], records)


def build_sample_index(sample: EvalSample, gateway, config: RetrievalConfig) -> VectorIndex:
    chunks = []
    for i, (title, text) in enumerate(sample.context_passages):
        body = f"{title}\n{text}" if title else text
        chunks.extend(chunk_document(body, config, f"{sample.sample_id}:p{i}"))
    return build_index(chunks, gateway) if chunks else VectorIndex.empty()


def run_eval(
    samples: Sequence[EvalSample],
    make_solver: Callable[[VectorIndex], object],
    gateway,
    retrieval_config: RetrievalConfig | None = None,
    scope: str = "sample",
    shared_index: VectorIndex | None = None,
    dataset: str = "dataset",
    trace_dir: str | Path | None = None,
    workers: int = 1,
) -> EvalReport:
    """Answer every sample and score it.

    ``scope="sample"`` builds one index per sample from its own passages;
    ``scope="shared"`` uses ``shared_index`` for all. Indexes are built
    before any question is answered, so setup errors abort the run early.
    A failed solve is scored as an empty prediction.
    """
    config = retrieval_config or RetrievalConfig()
    if scope == "shared":
        if shared_index is None:
            raise ValueError("shared scope needs an index")
        indexes = [shared_index] * len(samples)
    elif scope == "sample":
        indexes = [build_sample_index(s, gateway, config) for s in samples]
    else:
        raise ValueError(f"unknown retrieval scope {scope!r}")

    trace_root = Path(trace_dir) if trace_dir else None

    def score(i: int) -> EvalRecord:
        sample = samples[i]
        solver = make_solver(indexes[i])
        trace_path = None
        try:
            answer, trace = solver.answer_question(sample.question)
            prediction = answer or ""
            rounds = trace.rounds_used
            error = None
            if trace_root is not None:
                name = f"{_safe_name(sample.sample_id)}.jsonl"
                trace.write(trace_root / name)
                trace_path = f"{trace_root.name}/{name}"
        except Exception as exc:  # a failed sample must not abort the run
            logger.exception("sample %s failed", sample.sample_id)
            prediction, rounds, error = "", 0, f"{type(exc).__name__}: {exc}"
        if error is not None:
            return EvalRecord(sample.sample_id, "", 0, 0.0, 0, None, error)
        return EvalRecord(
            sample.sample_id,
            prediction,
            exact_match(prediction, sample.gold_answers),
            f1(prediction, sample.gold_answers),
            rounds,
            trace_path,
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(score, range(len(samples))))
    else:
        records = [score(i) for i in range(len(samples))]
    return EvalReport.from_records(dataset, records)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)
