"""Multi-hop question answering over consensus-selected reasoning trees."""

__version__ = "0.1.0"

from .decomposition import Decomposer, QuestionAnalysis, ReasoningTree, TreeNode, TreeSignature, tree_signature
from .evaluation import EvalReport, exact_match, f1, load_dataset, normalize_answer, run_eval
from .gateway import GenerationParams, ModelGateway, ScriptedBackend, ScriptedOracle
from .retrieval import RetrievalConfig, Retriever, build_index, chunk_document, tokenize
from .solver import SolverConfig, TreeSolver
from .trace import SolveTrace, reasoning_steps

__all__ = [
    "Decomposer",
    "EvalReport",
    "GenerationParams",
    "ModelGateway",
    "QuestionAnalysis",
    "ReasoningTree",
    "RetrievalConfig",
    "Retriever",
    "ScriptedBackend",
    "ScriptedOracle",
    "SolveTrace",
    "SolverConfig",
    "TreeNode",
    "TreeSignature",
    "TreeSolver",
    "build_index",
    "chunk_document",
    "exact_match",
    "f1",
    "load_dataset",
    "normalize_answer",
    "reasoning_steps",
    "run_eval",
    "tokenize",
    "tree_signature",
]
