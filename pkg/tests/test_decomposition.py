from __future__ import annotations

import random
from collections import deque

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import FnBackend
from oracles import consensus_oracle
from scenarios import SALTEN_FACTS, SALTEN_QUESTION, CABOT_FACTS, CABOT_QUESTION, RuleBackend
from treerag.decomposition import (
    ConsensusFailure,
    Decomposer,
    DecompositionError,
    QuestionAnalysis,
    ReasoningTree,
    TreeNode,
    TreeSignature,
    parse_analysis,
    parse_decomposition,
    pick_consensus,
    tree_signature,
    validate_tree,
)
from treerag.gateway import ModelGateway
from treerag.trace import SolveTrace

BTTF = "Who played the girlfriend of Chance's voice actor in Homeward Bound in Back to the Future?"
BTTF_REPLY = """CORE QUERY: Who played the girlfriend of X in Back to the Future?
KNOWN: Chance | from Homeward Bound
KNOWN: Back to the Future | film series
UNKNOWN: voice actor of Chance
UNKNOWN: girlfriend character"""


def decomposer_for(fn) -> tuple[Decomposer, FnBackend, ModelGateway]:
    backend = FnBackend(fn)
    gw = ModelGateway(backend)
    return Decomposer(gw, backend.templates), backend, gw


def rules_decomposer(facts) -> tuple[Decomposer, ModelGateway]:
    gw = ModelGateway(RuleBackend(facts))
    return Decomposer(gw), gw


# -- parsing ------------------------------------------------------------------


def test_analysis_of_a_multi_hop_question():
    dec, backend, _ = decomposer_for(lambda name, slots, params: BTTF_REPLY)
    analysis = dec.analyze_question(BTTF)
    assert analysis.core_query == "Who played the girlfriend of X in Back to the Future?"
    assert analysis.known_entities == [("Chance", "from Homeward Bound"), ("Back to the Future", "film series")]
    assert analysis.unknown_entities == ["voice actor of Chance", "girlfriend character"]
    assert BTTF in backend.prompts[0]


def test_analysis_of_a_single_hop_question():
    q = "Where was Ulises Solís born?"
    analysis = parse_analysis(f"CORE QUERY: {q}\nKNOWN: Ulises Solís\nUNKNOWN: none")
    assert analysis == QuestionAnalysis(q, [("Ulises Solís", "")], [])
    assert analysis.slots() == []


def test_analysis_rejects_unbacked_slots_and_missing_core():
    with pytest.raises(ValueError):
        parse_analysis("CORE QUERY: Who is the son of X?\nUNKNOWN: none")
    with pytest.raises(ValueError):
        parse_analysis("KNOWN: Vienna")


def test_analysis_reasks_once_then_fails():
    replies = iter(["garbage", "CORE QUERY: q?"])
    dec, backend, _ = decomposer_for(lambda *a: next(replies))
    assert dec.analyze_question("q?").core_query == "q?"
    assert len(backend.prompts) == 2 and backend.prompts[1].endswith("exactly the format above.")

    dec, backend, _ = decomposer_for(lambda *a: "still garbage")
    with pytest.raises(DecompositionError):
        dec.analyze_question("q?")
    assert len(backend.prompts) == 2


def test_parse_decomposition_patterns():
    assert parse_decomposition("PATTERN: direct", 4) == ("direct", [])
    pattern, subs = parse_decomposition(
        "PATTERN: sequential\nSUB-QUESTION: Who wrote Bambi?\nSUB-QUESTION: Where did [answer from #1] live?", 4
    )
    assert pattern == "sequential" and subs[1] == "Where did [answer from #1] live?"
    # tolerated spellings of a back-reference
    _, subs = parse_decomposition("PATTERN: sequential\nSUB-QUESTION: a\nSUB-QUESTION: b [answer from Q1]", 4)
    assert subs[1] == "b [answer from #1]"
    assert parse_decomposition("pattern: Parallel.\n- Sub-question: a\n- Sub-question: b", 4) == ("parallel", ["a", "b"])


@pytest.mark.parametrize(
    "reply",
    [
        "PATTERN: direct\nSUB-QUESTION: a",
        "PATTERN: sequential\nSUB-QUESTION: only one",
        "PATTERN: parallel\nSUB-QUESTION: a\nSUB-QUESTION: b [answer from #1]",
        "PATTERN: sequential\nSUB-QUESTION: a [answer from #2]\nSUB-QUESTION: b",
        "PATTERN: sequential\nSUB-QUESTION: a\nSUB-QUESTION: b [answer from #2]",
        "PATTERN: sideways",
        "PATTERN: parallel\n" + "\n".join(f"SUB-QUESTION: q{i}" for i in range(5)),
    ],
)
def test_parse_decomposition_rejects_invalid_structures(reply):
    with pytest.raises(ValueError):
        parse_decomposition(reply, 4)


# -- trees --------------------------------------------------------------------


def test_cabot_initial_tree():
    dec, _ = rules_decomposer(CABOT_FACTS)
    tree = dec.build_tree(CABOT_QUESTION, max_depth=4)
    assert tree.preorder() == ["N0", "N1", "N2", "N3", "N4", "N5", "N6"]
    assert tree["N0"].children == ["N1", "N6"]
    assert tree["N1"].children == ["N2", "N5"]
    assert tree["N2"].children == ["N3", "N4"]
    assert tree["N4"].question_template == "In which continent is [answer from N3] located?"
    assert tree["N5"].question_template.endswith("eastern coast of [answer from N2]?")
    assert tree["N6"].question_template == "Who is the son of [answer from N1]?"
    assert tree_signature(tree) == TreeSignature(4, 7)


def test_cabot_depth_bound_3_stops_early():
    dec, _ = rules_decomposer(CABOT_FACTS)
    tree = dec.build_tree(CABOT_QUESTION, max_depth=3)
    assert tree.signature() == TreeSignature(3, 5)
    assert tree["N2"].is_leaf


def test_salten_tree():
    dec, _ = rules_decomposer(SALTEN_FACTS)
    tree = dec.build_tree(SALTEN_QUESTION, max_depth=4)
    assert tree["N0"].pattern == "sequential"
    assert tree["N2"].question_template == "What was the home city of [answer from N1]"
    assert tree.signature() == TreeSignature(2, 3)


def test_max_depth_one_makes_a_single_node_without_model_calls():
    dec, gw = rules_decomposer(CABOT_FACTS)
    tree = dec.build_tree(CABOT_QUESTION, max_depth=1)
    assert tree.signature() == TreeSignature(1, 1)
    assert gw.calls.total == 0


def test_single_hop_question_is_a_leaf():
    dec, _ = rules_decomposer(CABOT_FACTS)
    assert dec.build_tree("Where was Ulises Solís born?", 4).signature() == TreeSignature(1, 1)


def _chain_tree() -> ReasoningTree:
    tree = ReasoningTree({"N0": TreeNode("N0", "root", pattern="sequential")}, "N0", 4)
    tree.add_child("N0", "first")
    tree.add_child("N0", "second [answer from N1]")
    return tree


def test_validate_tree_catches_broken_structures():
    validate_tree(_chain_tree())

    tree = _chain_tree()
    tree["N0"].pattern = "parallel"
    with pytest.raises(ValueError, match="earlier sequential sibling"):
        validate_tree(tree)

    tree = _chain_tree()
    tree["N1"].question_template = "first [answer from N2]"
    with pytest.raises(ValueError):
        validate_tree(tree)

    tree = _chain_tree()
    tree["N1"].pattern = "sequential"
    tree.add_child("N1", "a")
    tree["N1"].pattern = "direct"
    with pytest.raises(ValueError, match="direct"):
        validate_tree(tree)

    tree = _chain_tree()
    tree.max_depth = 1
    with pytest.raises(ValueError, match="max_depth"):
        validate_tree(tree)

    tree = _chain_tree()
    tree["N2"].children.append("N0")
    with pytest.raises(ValueError):
        validate_tree(tree)

    tree = _chain_tree()
    tree["N1"].status = "answered"
    with pytest.raises(ValueError, match="answered"):
        validate_tree(tree)

    tree = _chain_tree()
    tree.nodes["N9"] = TreeNode("N9", "orphan", parent="N0", depth=2)
    with pytest.raises(ValueError, match="unreachable"):
        validate_tree(tree)


def test_make_leaf_drops_the_subtree():
    dec, _ = rules_decomposer(CABOT_FACTS)
    tree = dec.build_tree(CABOT_QUESTION, max_depth=4)
    assert tree.make_leaf("N2") == ["N3", "N4"]
    validate_tree(tree)
    assert tree["N2"].is_leaf and tree["N2"].pattern == "direct" and tree["N2"].converted
    assert tree.signature() == TreeSignature(3, 5)
    assert tree.next_id() == "N7"


def test_tree_dict_round_trip_and_render():
    dec, _ = rules_decomposer(CABOT_FACTS)
    tree = dec.build_tree(CABOT_QUESTION, max_depth=4)
    again = ReasoningTree.from_dict(tree.to_dict())
    assert again.to_dict() == tree.to_dict()
    lines = tree.render().splitlines()
    assert lines[0].startswith("ROOT [sequential]")
    assert lines[3] == "      N3 [leaf] Where was Ulises Solís born?"


def random_tree(rng: random.Random, max_nodes: int) -> ReasoningTree:
    tree = ReasoningTree({"N0": TreeNode("N0", "q0")}, "N0", 64)
    for _ in range(rng.randrange(max_nodes)):
        parent = rng.choice(list(tree.nodes))
        tree[parent].pattern = "parallel"
        tree.add_child(parent, "q")
    return tree


def bfs_signature(tree: ReasoningTree) -> tuple[int, int]:
    depth, seen = 0, 0
    queue = deque([(tree.root, 1)])
    while queue:
        nid, d = queue.popleft()
        seen += 1
        depth = max(depth, d)
        queue.extend((c, d + 1) for c in tree[nid].children)
    return depth, seen


@given(st.integers(0, 2**32 - 1))
def test_tree_signature_matches_bfs(seed):
    tree = random_tree(random.Random(seed), 40)
    validate_tree(tree)
    sig = tree_signature(tree)
    assert (sig.depth, sig.node_count) == bfs_signature(tree)
    assert sig.node_count >= sig.depth


# -- consensus ----------------------------------------------------------------


def S(d, n):
    return TreeSignature(d, n)


def test_consensus_examples():
    assert pick_consensus([S(3, 5)]) == 0
    assert pick_consensus([S(2, 3), S(2, 3), S(3, 5), S(2, 3), S(3, 4)]) == 0
    assert pick_consensus([S(3, 4), S(2, 3), S(3, 4), S(2, 3), S(4, 6)]) == 1
    # equal frequency and node count: shallower wins
    assert pick_consensus([S(3, 5), S(2, 5)]) == 1
    with pytest.raises(ValueError):
        pick_consensus([])


signatures = st.lists(st.tuples(st.integers(1, 4), st.integers(1, 8)).map(lambda t: S(t[0], max(t))), min_size=1, max_size=9)


@given(signatures)
def test_consensus_matches_brute_force_tally(sigs):
    chosen = pick_consensus(sigs)
    assert chosen == consensus_oracle([(s.depth, s.node_count) for s in sigs])
    assert sigs.count(sigs[chosen]) == max(sigs.count(s) for s in sigs)
    assert sigs.index(sigs[chosen]) == chosen


@given(signatures, st.randoms())
def test_strict_majority_is_permutation_invariant(sigs, rnd):
    winner = sigs[pick_consensus(sigs)]
    if sigs.count(winner) * 2 <= len(sigs):
        return
    shuffled = list(sigs)
    rnd.shuffle(shuffled)
    assert shuffled[pick_consensus(shuffled)] == winner


def test_consensus_selects_the_majority_tree_and_traces_it():
    split = "PATTERN: sequential\nSUB-QUESTION: a?\nSUB-QUESTION: b [answer from #1]?"
    split3 = "PATTERN: sequential\nSUB-QUESTION: a?\nSUB-QUESTION: b [answer from #1]?\nSUB-QUESTION: c [answer from #2]?"

    def fn(name, slots, params):
        if name == "analyze":
            return f"CORE QUERY: {slots['question']}"
        if slots["question"] == "root?":
            return [split3, split, "PATTERN: direct", split, split][params.seed]
        return "PATTERN: direct"

    dec, _, _ = decomposer_for(fn)
    trace = SolveTrace("root?")
    result = dec.consensus("root?", 5, 4, trace)
    assert result.chosen == 1
    assert result.tree.signature() == S(2, 3)
    assert result.tally() == {S(2, 3): 3, S(2, 4): 1, S(1, 1): 1}
    pick = trace.of_kind("consensus_pick")[0]
    assert pick.payload["signatures"] == [[2, 4], [2, 3], [1, 1], [2, 3], [2, 3]]
    assert {e.payload["candidate"] for e in trace.of_kind("analyze")} == set(range(5))


def test_consensus_candidates_in_parallel_match_sequential():
    def fn(name, slots, params):
        if name == "analyze":
            return f"CORE QUERY: {slots['question']}"
        if slots["question"] == "root?" and params.seed % 2:
            return "PATTERN: parallel\nSUB-QUESTION: a?\nSUB-QUESTION: b?"
        return "PATTERN: direct"

    seq, _, _ = decomposer_for(fn)
    par, _, _ = decomposer_for(fn)
    par.parallelism = 4
    t1, t2 = SolveTrace("root?"), SolveTrace("root?")
    assert seq.consensus("root?", 5, 4, t1).chosen == par.consensus("root?", 5, 4, t2).chosen
    assert t1.to_jsonl() == t2.to_jsonl()


def test_consensus_with_a_single_candidate_and_total_failure():
    dec, _ = rules_decomposer(SALTEN_FACTS)
    assert dec.select_consensus_tree(SALTEN_QUESTION, 1, 4).signature() == S(2, 3)
    bad, _, _ = decomposer_for(lambda *a: "unreadable")
    with pytest.raises(ConsensusFailure):
        bad.select_consensus_tree("q?", 3, 4)
