"""Question analysis, reasoning-tree construction and consensus tree selection."""

from __future__ import annotations

import copy
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .gateway import GenerationParams, ModelGateway
from .prompts import TemplateStore
from .trace import Event, SolveTrace

logger = logging.getLogger(__name__)

PARALLEL = "parallel"
SEQUENTIAL = "sequential"
DIRECT = "direct"
PATTERNS = (PARALLEL, SEQUENTIAL, DIRECT)

PENDING = "pending"
ANSWERED = "answered"
FAILED_NONE = "failed_none"

PLACEHOLDER_RE = re.compile(r"\[answer from (N\d+)\]")
# What the model writes: "[answer from #2]" (also tolerates "Q2", "sub-question 2", "N2").
LOCAL_REF_RE = re.compile(r"\[answer from\s*(?:#|q|n|sub-?question\s*)?(\d+)\]", re.IGNORECASE)
SLOT_RE = re.compile(r"(?<![\w'])([X-Z])(?![\w'])")

REASK_SUFFIX = "\n\nYour previous reply could not be read. Reply again using exactly the format above."


class DecompositionError(RuntimeError):
    """The model kept producing output that could not be parsed or validated."""


class ConsensusFailure(DecompositionError):
    """No candidate tree could be built; the question needs reformulating."""


@dataclass
class QuestionAnalysis:
    core_query: str
    known_entities: list[tuple[str, str]] = field(default_factory=list)
    unknown_entities: list[str] = field(default_factory=list)

    def slots(self) -> list[str]:
        return sorted(set(SLOT_RE.findall(self.core_query)))


@dataclass
class TreeNode:
    node_id: str
    question_template: str
    pattern: str = DIRECT
    children: list[str] = field(default_factory=list)
    status: str = PENDING
    resolved_question: str | None = None
    answer: str | None = None
    parent: str | None = None
    depth: int = 1
    converted: bool = False

    def placeholders(self) -> list[str]:
        return PLACEHOLDER_RE.findall(self.question_template)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True, order=True)
class TreeSignature:
    depth: int
    node_count: int


@dataclass
class ReasoningTree:
    nodes: dict[str, TreeNode]
    root: str
    max_depth: int

    def __getitem__(self, node_id: str) -> TreeNode:
        return self.nodes[node_id]

    def next_id(self) -> str:
        return f"N{max(int(n[1:]) for n in self.nodes) + 1}"

    def add_child(self, parent_id: str, question_template: str, node_id: str | None = None) -> TreeNode:
        parent = self.nodes[parent_id]
        node = TreeNode(node_id or self.next_id(), question_template, parent=parent_id, depth=parent.depth + 1)
        self.nodes[node.node_id] = node
        parent.children.append(node.node_id)
        return node

    def descendants(self, node_id: str) -> list[str]:
        out = []
        stack = list(reversed(self.nodes[node_id].children))
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.nodes[nid].children))
        return out

    def make_leaf(self, node_id: str) -> list[str]:
        """Drop the subtree below ``node_id``; returns the removed ids."""
        dropped = self.descendants(node_id)
        for nid in dropped:
            del self.nodes[nid]
        node = self.nodes[node_id]
        node.children = []
        node.pattern = DIRECT
        node.converted = True
        return dropped

    def preorder(self) -> list[str]:
        return [self.root] + self.descendants(self.root)

    def depth(self) -> int:
        return max(n.depth for n in self.nodes.values())

    def signature(self) -> TreeSignature:
        return tree_signature(self)

    def copy(self) -> "ReasoningTree":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "max_depth": self.max_depth,
            "nodes": {nid: asdict(self.nodes[nid]) for nid in self.preorder()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReasoningTree":
        nodes = {nid: TreeNode(**rec) for nid, rec in data["nodes"].items()}
        return cls(nodes, data["root"], data["max_depth"])

    def render(self) -> str:
        lines = []

        def walk(nid: str, indent: int) -> None:
            node = self.nodes[nid]
            label = "ROOT" if nid == self.root else nid
            tag = node.pattern if node.children else "leaf"
            lines.append(f"{'  ' * indent}{label} [{tag}] {node.question_template}")
            for child in node.children:
                walk(child, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines)


def tree_signature(tree: ReasoningTree) -> TreeSignature:
    """(levels on the longest root-to-leaf path, number of nodes)."""
    depth = 0
    stack = [(tree.root, 1)]
    while stack:
        nid, d = stack.pop()
        depth = max(depth, d)
        stack.extend((c, d + 1) for c in tree.nodes[nid].children)
    return TreeSignature(depth, len(tree.nodes))


def validate_tree(tree: ReasoningTree) -> None:
    """Raise ``ValueError`` if the tree breaks a structural invariant."""
    if tree.root not in tree.nodes:
        raise ValueError("root missing")
    seen: set[str] = set()
    stack = [(tree.root, None, 1)]
    while stack:
        nid, parent, depth = stack.pop()
        if nid in seen:
            raise ValueError(f"{nid} reached twice (cycle or shared child)")
        seen.add(nid)
        node = tree.nodes.get(nid)
        if node is None:
            raise ValueError(f"dangling child {nid}")
        if node.parent != parent:
            raise ValueError(f"{nid} parent link is {node.parent}, expected {parent}")
        if node.depth != depth:
            raise ValueError(f"{nid} depth is {node.depth}, expected {depth}")
        if depth > tree.max_depth:
            raise ValueError(f"{nid} at depth {depth} exceeds max_depth {tree.max_depth}")
        if node.pattern not in PATTERNS:
            raise ValueError(f"{nid} has unknown pattern {node.pattern!r}")
        if node.pattern == DIRECT and node.children:
            raise ValueError(f"{nid} is direct but has children")
        if node.status == ANSWERED and (node.answer is None or node.resolved_question is None):
            raise ValueError(f"{nid} answered without answer/resolved question")
        for i, child in enumerate(node.children):
            refs = PLACEHOLDER_RE.findall(tree.nodes[child].question_template) if child in tree.nodes else []
            earlier = set(node.children[:i])
            for ref in refs:
                if node.pattern != SEQUENTIAL or ref not in earlier:
                    raise ValueError(f"{child} refers to {ref}, which is not an earlier sequential sibling")
            stack.append((child, nid, depth + 1))
    if seen != set(tree.nodes):
        raise ValueError(f"unreachable nodes: {sorted(set(tree.nodes) - seen)}")
    if tree.nodes[tree.root].placeholders():
        raise ValueError("root question has placeholders")


def pick_consensus(signatures: Sequence[TreeSignature]) -> int:
    """Index of the representative candidate.

    Most frequent signature wins; ties go to fewer nodes, then smaller
    depth; within the winning signature the earliest candidate is returned.
    """
    if not signatures:
        raise ValueError("no candidates")
    tally = Counter(signatures)
    first = {}
    for i, sig in enumerate(signatures):
        first.setdefault(sig, i)
    best = min(tally, key=lambda s: (-tally[s], s.node_count, s.depth, first[s]))
    return first[best]


# ---------------------------------------------------------------------------
# Output parsing


def _field(line: str) -> tuple[str, str] | None:
    line = line.strip().lstrip("-*• ").strip()
    m = re.match(r"([A-Za-z][A-Za-z \-]*?)\s*:\s*(.*)$", line)
    if not m:
        return None
    return m.group(1).strip().upper().replace("-", " "), m.group(2).strip()


def _is_empty(value: str) -> bool:
    return value.strip().lower() in {"", "none", "n/a", "-", "[]", "(none)"}


def parse_analysis(text: str) -> QuestionAnalysis:
    core = None
    known: list[tuple[str, str]] = []
    unknown: list[str] = []
    for line in text.splitlines():
        parsed = _field(line)
        if parsed is None:
            continue
        key, value = parsed
        if key in ("CORE QUERY", "CORE"):
            core = value
        elif key in ("KNOWN", "KNOWN ENTITY", "KNOWN ENTITIES"):
            if not _is_empty(value):
                name, _, constraint = value.partition("|")
                known.append((name.strip(), constraint.strip()))
        elif key in ("UNKNOWN", "UNKNOWN ENTITY", "UNKNOWN ENTITIES"):
            if not _is_empty(value):
                unknown.append(value)
    if not core:
        raise ValueError("analysis has no core query")
    analysis = QuestionAnalysis(core, known, unknown)
    if len(analysis.slots()) > len(unknown):
        raise ValueError("core query has slots without matching unknown entities")
    return analysis


def parse_decomposition(text: str, max_children: int) -> tuple[str, list[str]]:
    """Parse and validate a decomposition reply.

    Sub-question references use sibling positions (``[answer from #k]``),
    returned here normalized to ``[answer from #k]``.
    """
    pattern = None
    subs: list[str] = []
    for line in text.splitlines():
        parsed = _field(line)
        if parsed is None:
            continue
        key, value = parsed
        if key == "PATTERN":
            pattern = value.strip().strip(".").lower()
        elif key in ("SUB QUESTION", "SUBQUESTION", "SUB QUESTIONS") and value:
            subs.append(value)
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}")
    if pattern == DIRECT:
        if subs:
            raise ValueError("direct pattern with sub-questions")
        return DIRECT, []
    if not 2 <= len(subs) <= max_children:
        raise ValueError(f"{pattern} split needs 2..{max_children} sub-questions, got {len(subs)}")
    out = []
    for i, sub in enumerate(subs, 1):
        refs = [int(k) for k in LOCAL_REF_RE.findall(sub)]
        if refs and pattern == PARALLEL:
            raise ValueError("parallel sub-questions must not reference each other")
        if any(not 1 <= k < i for k in refs):
            raise ValueError(f"sub-question {i} references a sibling that is not earlier")
        out.append(LOCAL_REF_RE.sub(lambda m: f"[answer from #{int(m.group(1))}]", sub))
    return pattern, out


# ---------------------------------------------------------------------------


@dataclass
class ConsensusResult:
    tree: ReasoningTree
    signatures: list[TreeSignature | None]
    chosen: int

    def tally(self) -> Counter:
        return Counter(s for s in self.signatures if s is not None)


class Decomposer:
    """Builds reasoning trees with the analysis and decomposition prompts."""

    def __init__(
        self,
        gateway: ModelGateway,
        templates: TemplateStore | None = None,
        temperature: float = 0.7,
        max_children: int = 4,
        max_output_tokens: int = 512,
        parallelism: int = 1,
    ):
        self.gateway = gateway
        self.templates = templates or TemplateStore()
        self.temperature = temperature
        self.max_children = max_children
        self.max_output_tokens = max_output_tokens
        self.parallelism = parallelism

    def _params(self, seed: int) -> GenerationParams:
        return GenerationParams(self.temperature, self.max_output_tokens, 1, (), seed)

    def _ask(self, prompt: str, seed: int, parse):
        reply = self.gateway.complete(prompt, self._params(seed)).texts[0]
        try:
            return parse(reply)
        except ValueError as first:
            logger.info("re-asking after unparseable reply: %s", first)
            reply = self.gateway.complete(prompt + REASK_SUFFIX, self._params(seed)).texts[0]
            try:
                return parse(reply)
            except ValueError as exc:
                raise DecompositionError(f"unusable model output after re-ask: {exc}") from None

    def analyze_question(self, question: str, seed: int = 0) -> QuestionAnalysis:
        if not question.strip():
            raise ValueError("question must be non-empty")
        prompt = self.templates.render("analyze", question=question)
        return self._ask(prompt, seed, parse_analysis)

    def decompose_once(self, question: str, analysis: QuestionAnalysis, seed: int = 0) -> tuple[str, list[str]]:
        known = "; ".join(f"{e} ({c})" if c else e for e, c in analysis.known_entities) or "none"
        unknown = "; ".join(analysis.unknown_entities) or "none"
        prompt = self.templates.render(
            "decompose", question=question, core_query=analysis.core_query, known=known, unknown=unknown
        )
        return self._ask(prompt, seed, lambda r: parse_decomposition(r, self.max_children))

    def expand(
        self, tree: ReasoningTree, node_id: str, question: str, seed: int, events: list[Event], phase: str, round_: int
    ) -> bool:
        """Analyze and try to split one node, growing the tree below it.

        Children are numbered in pre-order. A child whose wording still
        depends on a sibling's answer stays a leaf until that answer is known.
        Returns ``True`` when the node was split.
        """
        node = tree[node_id]
        analysis = self.analyze_question(question, seed)
        events.append(Event("analyze", node_id, {"round": round_, "phase": phase, "seed": seed, **asdict(analysis)}))
        pattern, templates = self.decompose_once(question, analysis, seed)
        children: list[str] = []
        events.append(
            Event(
                "decompose",
                node_id,
                {"round": round_, "phase": phase, "seed": seed, "pattern": pattern, "children": children,
                 "question": question},
            )
        )
        if pattern == DIRECT:
            return False
        node.pattern = pattern
        local: dict[int, str] = {}
        for i, tpl in enumerate(templates, 1):
            text = LOCAL_REF_RE.sub(lambda m: f"[answer from {local[int(m.group(1))]}]", tpl)
            child = tree.add_child(node_id, text)
            local[i] = child.node_id
            children.append(child.node_id)
            if child.depth < tree.max_depth and not child.placeholders():
                try:
                    self.expand(tree, child.node_id, text, seed, events, phase, round_)
                except DecompositionError as exc:
                    events.append(Event("decompose", child.node_id, {"round": round_, "phase": phase,
                                                                    "seed": seed, "error": str(exc)}))
        return True

    def build_tree(self, question: str, max_depth: int, seed: int = 0, events: list[Event] | None = None,
                   round_: int = 1) -> ReasoningTree:
        if max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        events = events if events is not None else []
        tree = ReasoningTree({"N0": TreeNode("N0", question)}, "N0", max_depth)
        if max_depth > 1:
            self.expand(tree, "N0", question, seed, events, "build", round_)
        validate_tree(tree)
        return tree

    def consensus(self, question: str, candidate_count: int, max_depth: int,
                  trace: SolveTrace | None = None) -> ConsensusResult:
        if candidate_count < 1:
            raise ValueError("candidate_count must be >= 1")
        round_ = trace.round if trace else 1

        def attempt(i: int):
            events: list[Event] = []
            try:
                return self.build_tree(question, max_depth, seed=i, events=events, round_=round_), events, None
            except DecompositionError as exc:
                return None, events, str(exc)

        if self.parallelism > 1 and candidate_count > 1:
            with ThreadPoolExecutor(self.parallelism) as pool:
                results = list(pool.map(attempt, range(candidate_count)))
        else:
            results = [attempt(i) for i in range(candidate_count)]

        trees = []
        sigs: list[TreeSignature | None] = []
        for i, (tree, events, error) in enumerate(results):
            for e in events:
                e.payload["candidate"] = i
            if trace is not None:
                trace.extend(events)
                if error:
                    trace.add("decompose", None, phase="build", candidate=i, error=error)
            trees.append(tree)
            sigs.append(tree.signature() if tree else None)

        ok = [i for i, t in enumerate(trees) if t is not None]
        if not ok:
            raise ConsensusFailure("every candidate tree failed to build")
        chosen = ok[pick_consensus([sigs[i] for i in ok])]
        result = ConsensusResult(trees[chosen], sigs, chosen)
        if trace is not None:
            tally = result.tally()
            trace.add(
                "consensus_pick",
                trees[chosen].root,
                chosen=chosen,
                signatures=[[s.depth, s.node_count] if s else None for s in sigs],
                tally=[[s.depth, s.node_count, n] for s, n in sorted(tally.items())],
            )
        return result

    def select_consensus_tree(self, question: str, candidate_count: int = 5, max_depth: int = 4,
                              trace: SolveTrace | None = None) -> ReasoningTree:
        return self.consensus(question, candidate_count, max_depth, trace).tree
