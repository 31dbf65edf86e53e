"""Bottom-up solving of a reasoning tree over retrieved evidence.

Every node is solved after its children. Leaves are answered by sampling
several completions over the retrieved context and keeping the most
frequent normalized answer; a "None" winner triggers query rewrites. A
failing child either becomes a leaf itself (independent siblings) or turns
its parent into a leaf (dependent chain, or an answer that does not support
the parent). If the whole question still fails, it is reformulated and the
round is repeated, up to ``max_rounds``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

from .decomposition import (
    ANSWERED,
    FAILED_NONE,
    PARALLEL,
    PLACEHOLDER_RE,
    SEQUENTIAL,
    ConsensusFailure,
    Decomposer,
    DecompositionError,
    ReasoningTree,
    TreeNode,
    validate_tree,
)
from .gateway import GenerationParams, ModelGateway
from .prompts import TemplateStore
from .retrieval import ContextBundle, Retriever
from .text import normalize_answer
from .trace import Event, SolveTrace

logger = logging.getLogger(__name__)

UNANSWERED = "[unanswered]"
DEFAULT_NONE_LITERALS = ("none", "[none]", "")


@dataclass(frozen=True)
class SolverConfig:
    sample_count: int = 5
    max_rounds: int = 3
    max_depth: int = 4
    rewrite_attempts: int = 3
    candidate_count: int = 5
    none_literals: tuple[str, ...] = DEFAULT_NONE_LITERALS
    answer_temperature: float = 0.7
    decompose_temperature: float = 0.7
    max_children: int = 4
    max_output_tokens: int = 256

    def __post_init__(self):
        for name in ("sample_count", "max_rounds", "max_depth", "rewrite_attempts", "candidate_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_children < 2:
            raise ValueError("max_children must be >= 2")


@dataclass
class AnswerCandidate:
    raw_text: str
    normalized_text: str
    frequency: int
    sample_indices: list[int]
    is_none: bool = False


@dataclass
class RewriteSet:
    original: str
    variants: list[str] = field(default_factory=list)


class RewriteExhausted(RuntimeError):
    """The rewrite prompt produced no usable variant."""


class MissingAnswer(KeyError):
    """A placeholder refers to a node that has no answer yet."""


# ---------------------------------------------------------------------------
# Pure helpers


def substitute_placeholders(template: str | TreeNode, answers: dict[str, str]) -> str:
    text = template.question_template if isinstance(template, TreeNode) else template

    def repl(m: re.Match) -> str:
        try:
            return answers[m.group(1)]
        except KeyError:
            raise MissingAnswer(m.group(1)) from None

    return PLACEHOLDER_RE.sub(repl, text)


def is_none_answer(text: str, none_literals: Sequence[str] = DEFAULT_NONE_LITERALS) -> bool:
    t = text.strip().rstrip(".!").strip().lower()
    return t in {lit.lower() for lit in none_literals}


def clean_answer(text: str) -> str:
    """First non-empty line, minus an ``Answer:`` prefix and wrapping quotes."""
    for line in text.strip().splitlines():
        line = line.strip()
        if line:
            line = re.sub(r"^(final\s+)?answer\s*:\s*", "", line, flags=re.IGNORECASE)
            return line.strip().strip('"').strip()
    return ""


def vote(samples: Sequence[str], none_literals: Sequence[str] = DEFAULT_NONE_LITERALS) -> list[AnswerCandidate]:
    """Group samples by normalized answer, all none-literals forming one group.

    Sorted by frequency (descending), then by earliest sample index.
    """
    groups: dict[object, AnswerCandidate] = {}
    for i, raw in enumerate(samples):
        text = clean_answer(raw)
        none = is_none_answer(text, none_literals)
        key = None if none else normalize_answer(text)
        if key in groups:
            groups[key].frequency += 1
            groups[key].sample_indices.append(i)
        else:
            groups[key] = AnswerCandidate(text, "" if none else key, 1, [i], none)
    return sorted(groups.values(), key=lambda c: (-c.frequency, c.sample_indices[0]))


def _first_word(text: str) -> str:
    m = re.match(r"\W*(\w+)", text)
    return m.group(1).lower() if m else ""


def parse_rewrites(text: str, original: str, limit: int) -> list[str]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    tagged = [re.sub(r"^rewrite\s*\d*\s*:\s*", "", ln, flags=re.IGNORECASE) for ln in lines
              if re.match(r"^rewrite\s*\d*\s*:", ln, re.IGNORECASE)]
    candidates = tagged or [re.sub(r"^(\d+[.)]|[-*])\s*", "", ln) for ln in lines]

    def key(s: str) -> str:
        return " ".join(s.lower().split())

    seen = {key(original)}
    out = []
    for c in candidates:
        c = c.strip()
        if not c or is_none_answer(c) or key(c) in seen:
            continue
        seen.add(key(c))
        out.append(c)
    return out[:limit]


def call_bound(config: SolverConfig) -> int:
    """Upper bound on gateway calls made by one ``answer_question``.

    Per node: two expansions (at creation and the solve-time re-check), each
    analyze + decompose with one re-ask apiece (8 calls); one leaf answer
    with rewrites ``4 + 3R`` (embed, rerank, complete per attempt plus the
    rewrite call); one support check; one aggregation.
    """
    b, d = config.max_children, config.max_depth
    max_nodes = sum(b**i for i in range(d))
    expandable = sum(b**i for i in range(d - 1))
    leaf = 4 + 3 * config.rewrite_attempts
    per_round = config.candidate_count * 4 * expandable + max_nodes * (8 + leaf + 2)
    return config.max_rounds * per_round + (config.max_rounds - 1)


# ---------------------------------------------------------------------------


class TreeSolver:
    def __init__(
        self,
        gateway: ModelGateway,
        retriever: Retriever,
        config: SolverConfig | None = None,
        templates: TemplateStore | None = None,
        decomposer: Decomposer | None = None,
    ):
        self.gateway = gateway
        self.retriever = retriever
        self.config = config or SolverConfig()
        self.templates = templates or TemplateStore()
        self.decomposer = decomposer or Decomposer(
            gateway,
            self.templates,
            temperature=self.config.decompose_temperature,
            max_children=self.config.max_children,
        )

    # -- model steps -------------------------------------------------------

    def _greedy(self, seed: int = 0) -> GenerationParams:
        return GenerationParams(0.0, self.config.max_output_tokens, 1, (), seed)

    def retrieve_for(self, question: str) -> ContextBundle:
        return self.retriever.retrieve(question)

    def answer_leaf(self, question: str, context: ContextBundle) -> AnswerCandidate | None:
        return self._vote_leaf(question, context)[0]

    def _vote_leaf(self, question: str, context: ContextBundle) -> tuple[AnswerCandidate | None, list[AnswerCandidate]]:
        if PLACEHOLDER_RE.search(question):
            raise ValueError(f"question still has placeholders: {question}")
        prompt = self.templates.render("answer", question=question, context=context.render() or "(no passages)")
        n = self.config.sample_count
        temperature = self.config.answer_temperature if n > 1 else 0.0
        params = GenerationParams(temperature, self.config.max_output_tokens, n)
        samples = self.gateway.complete(prompt, params).texts
        groups = vote(samples, self.config.none_literals)
        winner = groups[0]
        return (None if winner.is_none else winner), groups

    def rewrite_query(self, question: str, attempts: int | None = None) -> RewriteSet:
        attempts = attempts or self.config.rewrite_attempts
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        prompt = self.templates.render("rewrite", question=question, count=attempts)
        reply = self.gateway.complete(prompt, self._greedy()).texts[0]
        variants = parse_rewrites(reply, question, attempts)
        if not variants:
            raise RewriteExhausted(question)
        return RewriteSet(question, variants)

    def verify_support(self, parent_question: str, child_answer: str, child_question: str = "",
                       trace: SolveTrace | None = None, node_id: str | None = None) -> bool:
        prompt = self.templates.render(
            "support", parent_question=parent_question, child_question=child_question, child_answer=child_answer
        )
        reply = self.gateway.complete(prompt, self._greedy()).texts[0]
        word = _first_word(reply)
        if word in ("yes", "no"):
            ok = word == "yes"
            parsed = True
        else:
            logger.warning("unparseable support judgment %r; treating as supported", reply[:80])
            ok, parsed = True, False
        if trace is not None:
            trace.add("support_check", node_id, supported=ok, parsed=parsed, answer=child_answer)
        return ok

    def aggregate(self, parent_question: str, child_qa_pairs: Sequence[tuple[str, str]]) -> str | None:
        pairs = "\n".join(f"- Q: {q}\n  A: {a}" for q, a in child_qa_pairs)
        prompt = self.templates.render("aggregate", question=parent_question, pairs=pairs)
        text = clean_answer(self.gateway.complete(prompt, self._greedy()).texts[0])
        return None if is_none_answer(text, self.config.none_literals) else text

    def reformulate(self, question: str, seed: int) -> str:
        prompt = self.templates.render("reformulate", question=question)
        reply = self.gateway.complete(prompt, self._greedy(seed)).texts[0]
        for line in reply.splitlines():
            m = re.match(r"\s*question\s*:\s*(.+)", line, re.IGNORECASE)
            if m and not is_none_answer(m.group(1)):
                return m.group(1).strip()
        text = clean_answer(reply)
        return question if is_none_answer(text) else text

    # -- tree traversal ----------------------------------------------------

    def _answer_as_leaf(self, tree: ReasoningTree, nid: str, ctx: "_SolveState") -> str | None:
        node = tree[nid]
        question = node.resolved_question
        attempts = [question]
        answer = None
        for i in range(1 + self.config.rewrite_attempts):
            if i == 1:
                try:
                    rewrites = self.rewrite_query(question)
                    attempts.extend(rewrites.variants)
                    ctx.trace.add("rewrite", nid, question=question, variants=rewrites.variants)
                except RewriteExhausted:
                    ctx.trace.add("rewrite", nid, question=question, variants=[], exhausted=True)
            if i >= len(attempts):
                break
            q = attempts[i]
            bundle = self.retrieve_for(q)
            ctx.trace.add("retrieve", nid, question=q, chunks=[c for c, _ in bundle.ranked_chunks],
                          total_tokens=bundle.total_tokens)
            winner, groups = self._vote_leaf(q, bundle)
            answer = winner.raw_text if winner else None
            ctx.trace.add(
                "leaf_answer", nid, question=q, answer=answer, variant=i > 0,
                tally=[[g.raw_text if not g.is_none else None, g.frequency] for g in groups],
            )
            if nid == tree.root:
                ctx.note_root_candidates(groups)
            if answer is not None:
                break
        if answer is None:
            node.status = FAILED_NONE
            return None
        node.status, node.answer = ANSWERED, answer
        return answer

    def _convert(self, tree: ReasoningTree, nid: str, reason: str, ctx: "_SolveState") -> None:
        dropped = tree.make_leaf(nid)
        for d in dropped:
            ctx.answers.pop(d, None)
        ctx.trace.add("none_convert", nid, reason=reason, dropped=dropped)
        validate_tree(tree)

    def _solve_children(self, tree: ReasoningTree, nid: str, ctx: "_SolveState") -> str | None:
        node = tree[nid]
        pairs: list[tuple[str, str]] = []
        for cid in list(node.children):
            child = tree[cid]
            question = substitute_placeholders(child, ctx.answers)
            if question != child.question_template:
                ctx.trace.add("substitute", cid, template=child.question_template, question=question)
            child.resolved_question = question
            answer = self.solve_node(tree, cid, ctx)
            if answer is None:
                if node.pattern == PARALLEL and tree[cid].children:
                    self._convert(tree, cid, "child_none", ctx)
                    answer = self._answer_as_leaf(tree, cid, ctx)
                if answer is None:
                    self._convert(tree, nid, "child_none", ctx)
                    return self._answer_as_leaf(tree, nid, ctx)
            elif node.pattern == SEQUENTIAL:
                if not self.verify_support(node.resolved_question, answer, question, ctx.trace, cid):
                    self._convert(tree, nid, "unsupported", ctx)
                    return self._answer_as_leaf(tree, nid, ctx)
            ctx.answers[cid] = answer
            pairs.append((question, answer))
        result = self.aggregate(node.resolved_question, pairs)
        ctx.trace.add("aggregate", nid, children=list(node.children), answer=result, is_root=nid == tree.root)
        if result is None:
            node.status = FAILED_NONE
            return None
        node.status, node.answer = ANSWERED, result
        return result

    def solve_node(self, tree: ReasoningTree, nid: str, ctx: "_SolveState | None" = None) -> str | None:
        ctx = ctx or _SolveState(SolveTrace())
        node = tree[nid]
        if node.resolved_question is None:
            node.resolved_question = substitute_placeholders(node, ctx.answers)
        if node.is_leaf:
            if nid != tree.root and not node.converted and node.depth < tree.max_depth:
                events: list[Event] = []
                try:
                    split = self.decomposer.expand(
                        tree, nid, node.resolved_question, 0, events, "solve", ctx.trace.round
                    )
                except DecompositionError as exc:
                    events.append(Event("decompose", nid, {"round": ctx.trace.round, "phase": "solve",
                                                           "error": str(exc)}))
                    split = False
                ctx.trace.extend(events)
                if split:
                    validate_tree(tree)
                    return self._solve_children(tree, nid, ctx)
            return self._answer_as_leaf(tree, nid, ctx)
        return self._solve_children(tree, nid, ctx)

    def answer_question(self, question: str) -> tuple[str | None, SolveTrace]:
        if not question.strip():
            raise ValueError("question must be non-empty")
        cfg = self.config
        trace = SolveTrace(question)
        best: AnswerCandidate | None = None
        answer = None
        current = question
        for r in range(1, cfg.max_rounds + 1):
            trace.round = r
            if r > 1:
                current = self.reformulate(question, seed=r - 1)
                trace.add("refine", None, question=current)
            try:
                tree = self.decomposer.select_consensus_tree(current, cfg.candidate_count, cfg.max_depth, trace)
            except ConsensusFailure as exc:
                trace.add("consensus_pick", None, error=str(exc), fallback="single_node")
                tree = ReasoningTree({"N0": TreeNode("N0", current)}, "N0", cfg.max_depth)
            tree = tree.copy()
            ctx = _SolveState(trace)
            answer = self.solve_node(tree, tree.root, ctx)
            trace.final_tree = tree.to_dict()
            trace.rounds_used = r
            if ctx.root_best and (best is None or ctx.root_best.frequency > best.frequency):
                best = ctx.root_best
            if answer is not None:
                trace.status = "answered"
                break
        if answer is None and best is not None:
            answer = best.raw_text
            trace.status = "best_effort"
        elif answer is None:
            trace.status = "unanswered"
        trace.final_answer = answer
        return answer, trace


@dataclass
class _SolveState:
    trace: SolveTrace
    answers: dict[str, str] = field(default_factory=dict)
    root_best: AnswerCandidate | None = None

    def note_root_candidates(self, groups: list[AnswerCandidate]) -> None:
        for g in groups:
            if not g.is_none:
                if self.root_best is None or g.frequency > self.root_best.frequency:
                    self.root_best = g
                return
