"""Engine configuration, its JSON file format, and run manifests.

Config file (JSON, every key optional)::

    {
      "retrieval": {"chunk_size": 200, "overlap": 100, "coarse_k": 45,
                    "fine_k": 15, "context_budget": 3000},
      "solver": {"sample_count": 5, "max_rounds": 3, "max_depth": 4,
                 "rewrite_attempts": 3, "candidate_count": 5,
                 "none_literals": ["none", "[none]", ""],
                 "answer_temperature": 0.7, "decompose_temperature": 0.7,
                 "max_children": 4, "max_output_tokens": 256},
      "backend": "live" | "scripted:<fixture.jsonl>",
      "live": {"base_url": "...", "chat_model": "...", "embed_model": "...",
               "rerank_model": "...", "rerank_url": "..."},
      "embedder": "backend" | "lexical",
      "cache": {"enabled": false, "dir": ".treerag-cache"},
      "templates": "v1",
      "parallelism": 4
    }

API keys are read from the environment only (``TREERAG_API_KEY`` or
``OPENAI_API_KEY``); a config file containing a key is rejected.
Precedence: command-line flag > config file > built-in default.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .gateway import HttpBackend, LexicalBackend, ModelGateway, ResponseCache, ScriptedBackend, ScriptedOracle
from .retrieval import RetrievalConfig
from .solver import SolverConfig

MANIFEST_FORMAT = "treerag.manifest/1"


_SECRET_KEYS = {"api_key", "apikey", "key", "secret", "password", "token"}


class ConfigError(ValueError):
    pass


@dataclass
class EngineConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    backend: str = "live"
    live: dict = field(default_factory=dict)
    embedder: str = "backend"
    cache_enabled: bool = False
    cache_dir: str = ".treerag-cache"
    templates: str = "v1"
    parallelism: int = 4

    @property
    def candidate_count(self) -> int:
        return self.solver.candidate_count

    def to_dict(self) -> dict:
        solver = dataclasses.asdict(self.solver)
        solver["none_literals"] = list(solver["none_literals"])
        return {
            "retrieval": dataclasses.asdict(self.retrieval),
            "solver": solver,
            "backend": self.backend,
            "live": dict(self.live),
            "embedder": self.embedder,
            "cache": {"enabled": self.cache_enabled, "dir": self.cache_dir},
            "templates": self.templates,
            "parallelism": self.parallelism,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        data = copy.deepcopy(data)
        if "manifest" in data:
            data = data["manifest"]["config"]
        _reject_secrets(data)
        known = {"retrieval", "solver", "backend", "live", "embedder", "cache", "templates", "parallelism"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            retrieval = RetrievalConfig(**data.get("retrieval", {}))
            solver_data = data.get("solver", {})
            if "none_literals" in solver_data:
                solver_data["none_literals"] = tuple(solver_data["none_literals"])
            solver = SolverConfig(**solver_data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cache = data.get("cache", {})
        cfg = cls(
            retrieval=retrieval,
            solver=solver,
            backend=data.get("backend", "live"),
            live=data.get("live", {}),
            embedder=data.get("embedder", "backend"),
            cache_enabled=bool(cache.get("enabled", False)),
            cache_dir=cache.get("dir", ".treerag-cache"),
            templates=data.get("templates", "v1"),
            parallelism=int(data.get("parallelism", 4)),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not (self.backend == "live" or self.backend.startswith("scripted:")):
            raise ConfigError(f"backend must be 'live' or 'scripted:<path>', got {self.backend!r}")
        if self.embedder not in ("backend", "lexical"):
            raise ConfigError("embedder must be 'backend' or 'lexical'")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


def _reject_secrets(data, path: str = "") -> None:
    if isinstance(data, dict):
        for key, value in data.items():
            k = key.lower()
            if (k in _SECRET_KEYS or k.endswith("_api_key")) and value:
                raise ConfigError(f"secrets are read from the environment, not config files ({path}{key})")
            _reject_secrets(value, f"{path}{key}.")


def _set_dotted(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = data
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def _get_dotted(data: dict, dotted: str):
    cur = data
    for p in dotted.split("."):
        if not isinstance(cur, dict) or p not in cur:
            return None
        cur = cur[p]
    return cur


def resolve_config(config_path: str | Path | None = None, overrides: dict | None = None) -> tuple[EngineConfig, list[str]]:
    """Merge defaults, the config file and flag overrides.

    Returns the config and one line per value that differs from the default,
    tagged with where it came from.
    """
    defaults = EngineConfig().to_dict()
    merged = copy.deepcopy(defaults)
    source: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if "manifest" in file_data:
            file_data = file_data["manifest"]["config"]
        _reject_secrets(file_data)
        for dotted in _leaves(file_data):
            _set_dotted(merged, dotted, _get_dotted(file_data, dotted))
            source[dotted] = "file"
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        _set_dotted(merged, dotted, value)
        source[dotted] = "flag"
    cfg = EngineConfig.from_dict(merged)
    resolved = cfg.to_dict()
    echoed = []
    for dotted in sorted(_leaves(resolved)):
        value = _get_dotted(resolved, dotted)
        if value != _get_dotted(defaults, dotted):
            echoed.append(f"{dotted}={json.dumps(value)} ({source.get(dotted, 'file')})")
    return cfg, echoed


def _leaves(data: dict, prefix: str = "") -> list[str]:
    out = []
    for key, value in data.items():
        if isinstance(value, dict) and value and key != "live":
            out.extend(_leaves(value, f"{prefix}{key}."))
        else:
            out.append(f"{prefix}{key}")
    return out


def build_gateway(cfg: EngineConfig) -> ModelGateway:
    if cfg.backend.startswith("scripted:"):
        fixture = cfg.backend.split(":", 1)[1]
        if not Path(fixture).exists():
            raise ConfigError(f"scripted fixture not found: {fixture}")
        backend = ScriptedBackend(ScriptedOracle.from_jsonl(fixture, strict=True))
    else:
        backend = HttpBackend.from_env(**cfg.live)
    retrieval_backend = LexicalBackend() if cfg.embedder == "lexical" else None
    cache = ResponseCache(cfg.cache_dir) if cfg.cache_enabled else None
    return ModelGateway(backend, retrieval_backend, cache, cfg.parallelism)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    templates: str
    engine_version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps({"format": MANIFEST_FORMAT, "manifest": dataclasses.asdict(self)},
                          indent=indent, sort_keys=True, ensure_ascii=False) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path
