"""Versioned prompt templates.

Templates are plain text files under ``templates/<version>/<name>.txt`` using
``$slot`` placeholders (``string.Template`` syntax). The gateway never looks
inside prompts; template ids (``name@version``) go into solve traces.
"""

from __future__ import annotations

import re
import string
from functools import cached_property
from importlib import resources
from pathlib import Path

DEFAULT_VERSION = "v1"
TEMPLATE_NAMES = ("analyze", "decompose", "answer", "rewrite", "support", "aggregate", "reformulate")


class TemplateStore:
    def __init__(self, version: str = DEFAULT_VERSION, root: str | Path | None = None):
        self.version = version
        if root is None:
            base = resources.files("treerag") / "templates" / version
        else:
            base = Path(root) / version
        self._templates: dict[str, string.Template] = {}
        for name in TEMPLATE_NAMES:
            text = (base / f"{name}.txt").read_text(encoding="utf-8")
            self._templates[name] = string.Template(text)

    def template_id(self, name: str) -> str:
        return f"{name}@{self.version}"

    def render(self, name: str, **slots) -> str:
        return self._templates[name].substitute(**{k: str(v) for k, v in slots.items()})

    @cached_property
    def _matchers(self) -> list[tuple[str, re.Pattern]]:
        out = []
        for name, tpl in self._templates.items():
            parts = []
            last = 0
            seen: set[str] = set()
            for m in tpl.pattern.finditer(tpl.template):
                parts.append(re.escape(tpl.template[last : m.start()]))
                slot = m.group("named") or m.group("braced")
                if slot is None:
                    parts.append(re.escape("$"))
                elif slot in seen:
                    parts.append(f"(?P={slot})")
                else:
                    seen.add(slot)
                    parts.append(f"(?P<{slot}>.*?)")
                last = m.end()
            parts.append(re.escape(tpl.template[last:]))
            out.append((name, re.compile("".join(parts), re.DOTALL)))
        return out

    def match(self, prompt: str) -> tuple[str, dict[str, str]] | None:
        """Recover ``(template name, slots)`` from a rendered prompt."""
        for name, rx in self._matchers:
            m = rx.fullmatch(prompt)
            if m:
                return name, m.groupdict()
        return None
