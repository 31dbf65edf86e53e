"""Command line: ``treerag ingest | ask | eval | inspect-tree``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, EngineConfig, RunManifest, build_gateway, file_digest, resolve_config
from .decomposition import Decomposer, DecompositionError
from .evaluation import load_dataset, run_eval
from .gateway import GatewayError
from .prompts import TemplateStore
from .retrieval import Retriever, VectorIndex, build_index, chunk_corpus, load_corpus, load_index, save_index
from .solver import UNANSWERED, TreeSolver
from .trace import reasoning_steps

logger = logging.getLogger("treerag")

# flag dest -> dotted config key
_FLAG_KEYS = {
    "backend": "backend",
    "embedder": "embedder",
    "parallelism": "parallelism",
    "templates": "templates",
    "chunk_size": "retrieval.chunk_size",
    "overlap": "retrieval.overlap",
    "coarse_k": "retrieval.coarse_k",
    "fine_k": "retrieval.fine_k",
    "budget": "retrieval.context_budget",
    "max_depth": "solver.max_depth",
    "candidates": "solver.candidate_count",
    "samples": "solver.sample_count",
    "rounds": "solver.max_rounds",
    "rewrites": "solver.rewrite_attempts",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("engine")
    g.add_argument("--config", help="JSON config file (or a run manifest)")
    g.add_argument("--backend", help="live | scripted:<fixture.jsonl>")
    g.add_argument("--embedder", choices=["backend", "lexical"], help="embedding/rerank source")
    g.add_argument("--cache-dir", help="enable the response cache in this directory")
    g.add_argument("--parallelism", type=int, help="max concurrent model calls")
    g.add_argument("--templates", help="prompt template version")
    g.add_argument("--chunk-size", type=int)
    g.add_argument("--overlap", type=int)
    g.add_argument("--coarse-k", type=int)
    g.add_argument("--fine-k", type=int)
    g.add_argument("--budget", type=int, help="context token budget")
    g.add_argument("--max-depth", type=int)
    g.add_argument("--candidates", type=int, help="candidate trees for consensus")
    g.add_argument("--samples", type=int, help="answer samples per leaf")
    g.add_argument("--rounds", type=int, help="refinement rounds")
    g.add_argument("--rewrites", type=int, help="rewrite attempts per failed leaf")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. solver.answer_temperature=0.5")
    g.add_argument("--manifest", help="write the run manifest here")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treerag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="chunk and embed a corpus into an index file")
    p.add_argument("corpus", help="JSON Lines corpus (doc_id/text, or LongBench records)")
    p.add_argument("--index", required=True, help="output index path")
    _add_common(p)

    p = sub.add_parser("ask", help="answer one question")
    p.add_argument("question")
    p.add_argument("--index", required=True)
    p.add_argument("--trace", help="write the solve trace (JSON Lines) here")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate on a LongBench-style dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory for report and traces")
    p.add_argument("--name", help="dataset name in the report (default: file stem)")
    p.add_argument("--scope", choices=["sample", "shared"], default="sample")
    p.add_argument("--index", help="shared index (scope=shared)")
    p.add_argument("--traces", action="store_true", help="write one trace per sample")
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("inspect-tree", help="show the consensus reasoning tree without solving")
    p.add_argument("question")
    p.add_argument("--json", action="store_true", help="also print a structured dump")
    _add_common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items() if getattr(args, dest, None) is not None}
    if args.cache_dir:
        out["cache.enabled"] = True
        out["cache.dir"] = args.cache_dir
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _emit_manifest(args, cfg: EngineConfig, inputs: dict, default_path: Path | None = None) -> None:
    manifest = RunManifest(args.command, cfg.to_dict(), inputs, cfg.templates)
    path = args.manifest or default_path
    if path:
        manifest.write(path)
    else:
        print("manifest: " + manifest.to_json(indent=None), end="", file=sys.stderr)


def _solver(cfg: EngineConfig, gateway, index: VectorIndex) -> TreeSolver:
    templates = TemplateStore(cfg.templates)
    retriever = Retriever(index, gateway, cfg.retrieval)
    decomposer = Decomposer(
        gateway, templates, cfg.solver.decompose_temperature, cfg.solver.max_children,
        parallelism=cfg.parallelism,
    )
    return TreeSolver(gateway, retriever, cfg.solver, templates, decomposer)


def cmd_ingest(args, cfg: EngineConfig) -> int:
    corpus = Path(args.corpus)
    if not corpus.exists():
        raise ConfigError(f"corpus not found: {corpus}")
    docs = load_corpus(corpus)
    if not docs:
        raise ConfigError(f"corpus is empty: {corpus}")
    chunks = chunk_corpus(docs, cfg.retrieval)
    if not chunks:
        raise ConfigError(f"corpus has no text: {corpus}")
    gateway = build_gateway(cfg)
    index = build_index(chunks, gateway)
    save_index(index, args.index)
    _emit_manifest(
        args, cfg,
        {"corpus": str(corpus), "corpus_sha256": file_digest(corpus), "index": str(args.index),
         "index_sha256": file_digest(args.index)},
        Path(str(args.index) + ".manifest.json"),
    )
    print(f"documents {len(docs)} chunks {len(chunks)} dimension {index.dimension}")
    return 0


def cmd_ask(args, cfg: EngineConfig) -> int:
    if not Path(args.index).exists():
        raise ConfigError(f"index not found: {args.index}")
    index = load_index(args.index)
    gateway = build_gateway(cfg)
    answer, trace = _solver(cfg, gateway, index).answer_question(args.question)
    print(answer if answer is not None else UNANSWERED)
    if args.verbose:
        for i, step in enumerate(reasoning_steps(trace), 1):
            print(f"  step {i}: {step}", file=sys.stderr)
    if args.trace:
        path = trace.write(args.trace)
        print(f"trace: {path}")
    _emit_manifest(args, cfg, {"index": str(args.index), "index_sha256": file_digest(args.index),
                               "question": args.question})
    return 0


def cmd_eval(args, cfg: EngineConfig) -> int:
    samples = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gateway = build_gateway(cfg)
    shared = None
    if args.scope == "shared":
        if not args.index:
            raise ConfigError("--scope shared needs --index")
        shared = load_index(args.index)
    name = args.name or Path(args.dataset).stem
    report = run_eval(
        samples,
        lambda index: _solver(cfg, gateway, index),
        gateway,
        cfg.retrieval,
        scope=args.scope,
        shared_index=shared,
        dataset=name,
        trace_dir=out / "traces" if args.traces else None,
        workers=args.workers,
    )
    report_path = out / "report.json"
    report_path.write_text(report.to_json(), encoding="utf-8")
    print(report.table())
    print(report.summary())
    _emit_manifest(args, cfg, {"dataset": str(args.dataset), "dataset_sha256": file_digest(args.dataset)},
                   out / "manifest.json")
    return 0


def cmd_inspect_tree(args, cfg: EngineConfig) -> int:
    gateway = build_gateway(cfg)
    decomposer = Decomposer(gateway, TemplateStore(cfg.templates), cfg.solver.decompose_temperature,
                            cfg.solver.max_children, parallelism=cfg.parallelism)
    result = decomposer.consensus(args.question, cfg.solver.candidate_count, cfg.solver.max_depth)
    tree = result.tree
    sig = tree.signature()
    print(tree.render())
    print(f"signature: depth={sig.depth} nodes={sig.node_count}")
    print(f"chosen candidate: {result.chosen}")
    for i, s in enumerate(result.signatures):
        print(f"  candidate {i}: " + (f"depth={s.depth} nodes={s.node_count}" if s else "failed"))
    tally = result.tally()
    print("tally: " + ", ".join(f"({s.depth},{s.node_count})x{n}" for s, n in sorted(tally.items())))
    if args.json:
        dump = {
            "tree": tree.to_dict(),
            "edges": [[n.parent, nid] for nid, n in tree.nodes.items() if n.parent],
            "signature": [sig.depth, sig.node_count],
            "candidates": [[s.depth, s.node_count] if s else None for s in result.signatures],
            "chosen": result.chosen,
        }
        print(json.dumps(dump, indent=2, ensure_ascii=False, sort_keys=True))
    _emit_manifest(args, cfg, {"question": args.question})
    return 0


COMMANDS = {"ingest": cmd_ingest, "ask": cmd_ask, "eval": cmd_eval, "inspect-tree": cmd_inspect_tree}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, echoed = resolve_config(args.config, _overrides(args))
        for line in echoed:
            print(f"override: {line}", file=sys.stderr)
        if args.verbose:
            print("config: " + json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, GatewayError, DecompositionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
