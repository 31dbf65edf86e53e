from __future__ import annotations

import json

import pytest

from helpers import FIXTURES
from scenarios import SALTEN_QUESTION, CABOT_QUESTION, TALLY_QUESTION, UNANSWERABLE_QUESTION
from treerag.cli import main
from treerag.config import ConfigError, EngineConfig, resolve_config
from treerag.trace import SolveTrace


def scripted(name: str) -> list[str]:
    return ["--backend", f"scripted:{FIXTURES / name}"]


def ingest(tmp_path, corpus: str, oracle: str):
    index = tmp_path / f"{corpus}.npz"
    assert main(["ingest", str(FIXTURES / corpus), "--index", str(index), *scripted(oracle)]) == 0
    return index


# -- configuration ------------------------------------------------------------


def test_flag_beats_file_beats_default(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"solver": {"max_depth": 3, "sample_count": 7}, "retrieval": {"chunk_size": 300}}))
    cfg, echoed = resolve_config(path, {"solver.max_depth": 2})
    assert (cfg.solver.max_depth, cfg.solver.sample_count, cfg.retrieval.chunk_size) == (2, 7, 300)
    assert cfg.solver.max_rounds == EngineConfig().solver.max_rounds
    assert echoed == ["retrieval.chunk_size=300 (file)", "solver.max_depth=2 (flag)", "solver.sample_count=7 (file)"]


def test_overrides_are_echoed_on_stderr(tmp_path, capsys):
    index = ingest(tmp_path, "salten_corpus.jsonl", "salten.oracle.jsonl")
    capsys.readouterr()
    main(["ask", SALTEN_QUESTION, "--index", str(index), *scripted("salten.oracle.jsonl"),
          "--samples", "3", "--set", "solver.answer_temperature=0.5"])
    err = capsys.readouterr().err
    assert "override: solver.sample_count=3 (flag)" in err
    assert "override: solver.answer_temperature=0.5 (flag)" in err


@pytest.mark.parametrize(
    "data",
    [{"live": {"api_key": "sk-123"}}, {"openai_api_key": "x"}, {"live": {"token": "t"}}],
)
def test_secrets_in_config_files_are_rejected(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigError, match="environment"):
        resolve_config(path)


def test_config_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "cfg.json"
    bad.write_text("{nope")
    assert main(["inspect-tree", "q?", "--config", str(bad)]) == 1
    assert "invalid JSON" in capsys.readouterr().err
    bad.write_text(json.dumps({"solver": {"max_depth": 0}}))
    assert main(["inspect-tree", "q?", "--config", str(bad)]) == 1
    bad.write_text(json.dumps({"colour": "blue"}))
    assert main(["inspect-tree", "q?", "--config", str(bad)]) == 1
    assert "unknown config keys" in capsys.readouterr().err


def test_manifest_replays_as_a_config(tmp_path):
    out = tmp_path / "out"
    assert main(["eval", str(FIXTURES / "eval2.jsonl"), "--out", str(out), *scripted("eval2.oracle.jsonl"),
                 "--max-depth", "3"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["format"] == "treerag.manifest/1"
    assert manifest["manifest"]["inputs"]["dataset_sha256"]
    cfg, _ = resolve_config(out / "manifest.json")
    assert cfg.solver.max_depth == 3 and cfg.backend.startswith("scripted:")


def test_verbose_prints_the_resolved_config(tmp_path, capsys):
    main(["inspect-tree", TALLY_QUESTION, *scripted("consensus.oracle.jsonl"), "-v"])
    err = capsys.readouterr().err
    line = next(ln for ln in err.splitlines() if ln.startswith("config: "))
    assert json.loads(line[len("config: "):])["solver"]["max_depth"] == 4


# -- ingest -------------------------------------------------------------------


def test_ingest_counts_and_reproducible_digest(tmp_path, capsys):
    index = ingest(tmp_path, "cabot_corpus.jsonl", "cabot.oracle.jsonl")
    out = capsys.readouterr().out
    assert out.startswith("documents 3 chunks 3 dimension ")
    first = json.loads((tmp_path / "cabot_corpus.jsonl.npz.manifest.json").read_text())["manifest"]["inputs"]
    again = tmp_path / "again.npz"
    main(["ingest", str(FIXTURES / "cabot_corpus.jsonl"), "--index", str(again), *scripted("cabot.oracle.jsonl")])
    second = json.loads((tmp_path / "again.npz.manifest.json").read_text())["manifest"]["inputs"]
    assert first["index_sha256"] == second["index_sha256"]
    assert index.read_bytes() == again.read_bytes()


def test_ingest_rejects_empty_or_missing_corpus(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["ingest", str(empty), "--index", str(tmp_path / "i.npz"), *scripted("salten.oracle.jsonl")]) == 1
    assert main(["ingest", str(tmp_path / "nope.jsonl"), "--index", str(tmp_path / "i.npz")]) == 1
    err = capsys.readouterr().err
    assert "corpus is empty" in err and "corpus not found" in err
    assert not (tmp_path / "i.npz").exists()


# -- ask ----------------------------------------------------------------------


def test_ask_salten_with_steps_and_trace(tmp_path, capsys):
    index = ingest(tmp_path, "salten_corpus.jsonl", "salten.oracle.jsonl")
    capsys.readouterr()
    trace_path = tmp_path / "t.jsonl"
    code = main(["ask", SALTEN_QUESTION, "--index", str(index), *scripted("salten.oracle.jsonl"), "-v",
                 "--trace", str(trace_path)])
    captured = capsys.readouterr()
    assert code == 0
    assert captured.out.splitlines()[0] == "Vienna"
    assert "  step 6: Aggregate N1 and N2 to answer original question -> Vienna" in captured.err
    trace = SolveTrace.read(trace_path)
    assert trace.final_answer == "Vienna" and trace.status == "answered"


def test_ask_cabot(tmp_path, capsys):
    index = ingest(tmp_path, "cabot_corpus.jsonl", "cabot.oracle.jsonl")
    capsys.readouterr()
    assert main(["ask", CABOT_QUESTION, "--index", str(index), *scripted("cabot.oracle.jsonl")]) == 0
    assert capsys.readouterr().out.strip() == "Sebastian Cabot"


def test_ask_unanswerable_prints_marker_and_succeeds(tmp_path, capsys):
    index = ingest(tmp_path, "salten_corpus.jsonl", "salten.oracle.jsonl")
    capsys.readouterr()
    assert main(["ask", UNANSWERABLE_QUESTION, "--index", str(index), *scripted("salten.oracle.jsonl")]) == 0
    assert capsys.readouterr().out.strip() == "[unanswered]"


def test_ask_with_unknown_prompt_fails_cleanly(tmp_path, capsys):
    index = ingest(tmp_path, "salten_corpus.jsonl", "salten.oracle.jsonl")
    assert main(["ask", "A question nobody recorded?", "--index", str(index), *scripted("salten.oracle.jsonl")]) == 1
    assert "error:" in capsys.readouterr().err


def test_ask_missing_index(tmp_path, capsys):
    assert main(["ask", "q?", "--index", str(tmp_path / "none.npz"), *scripted("salten.oracle.jsonl")]) == 1
    assert "index not found" in capsys.readouterr().err


# -- eval ---------------------------------------------------------------------


def test_eval_two_samples(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["eval", str(FIXTURES / "eval2.jsonl"), "--out", str(out), *scripted("eval2.oracle.jsonl"),
                 "--traces"]) == 0
    stdout = capsys.readouterr().out.splitlines()
    assert stdout[-1] == "F1 75.00 EM 50.00"
    report = json.loads((out / "report.json").read_text())
    assert report["format"] == "treerag.report/1"
    assert [r["trace_path"] for r in report["records"]] == ["traces/exact.jsonl", "traces/half.jsonl"]
    assert (out / "traces" / "half.jsonl").exists()


def test_eval_missing_dataset(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 1
    assert "dataset not found" in capsys.readouterr().err


# -- inspect-tree -------------------------------------------------------------


def test_inspect_tree_tally(capsys):
    assert main(["inspect-tree", TALLY_QUESTION, *scripted("consensus.oracle.jsonl")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "signature: depth=2 nodes=3" in out
    assert "chosen candidate: 0" in out
    assert "tally: (1,1)x1, (2,3)x3, (2,4)x1" in out


def test_inspect_tree_json(capsys):
    assert main(["inspect-tree", CABOT_QUESTION, *scripted("consensus.oracle.jsonl"), "--json"]) == 0
    out = capsys.readouterr().out
    dump = json.loads(out[out.index("\n{") + 1:])
    assert dump["signature"] == [4, 7]
    assert ["N2", "N3"] in dump["edges"] and ["N0", "N6"] in dump["edges"]
    assert dump["candidates"] == [[4, 7]] * 5
