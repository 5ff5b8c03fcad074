"""Deterministic fixture projects and keys for tests, benchmarks and the attack harness."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from .canonical import sha256
from .identity import KeyPair, PublisherIdentity, generate_keypair

MODULE_SIZE = 203

_MODULE = '''"""Fixture module {i}."""


def step_{i}(state: dict) -> dict:
    value = state.get("value", 0)
    state["value"] = value + {i}
    state.setdefault("trace", []).append("step_{i}")
    return state
'''


def module_source(i: int, payload: str = "") -> bytes:
    """A module of exactly MODULE_SIZE bytes (plus the payload, if any)."""
    text = _MODULE.format(i=i)
    body = text.encode("utf-8")
    pad = MODULE_SIZE - len(body)
    if pad < 0:
        raise ValueError("fixture template too large")
    body += b"#" * max(pad - 1, 0) + (b"\n" if pad else b"")
    return body + payload.encode("utf-8")


def make_fixture_project(
    root: os.PathLike | str,
    *,
    modules: int = 1,
    namespace: str = "@acme",
    name: str = "utils",
    version: str = "1.0.0",
    payload: str = "",
    dependencies: Optional[dict[str, str]] = None,
) -> Path:
    root = Path(root)
    (root / "src").mkdir(parents=True, exist_ok=True)
    lines = ["[package]", f'name = "{name}"', f'version = "{version}"', f'namespace = "{namespace}"', ""]
    if dependencies:
        lines.append("[dependencies]")
        lines += [f'"{dep}" = "{constraint}"' for dep, constraint in sorted(dependencies.items())]
        lines.append("")
    (root / "manifest.toml").write_text("\n".join(lines), "utf-8")
    for i in range(1, modules + 1):
        (root / "src" / f"module_{i:02d}.py").write_bytes(module_source(i, payload if i == 1 else ""))
    return root


def source_size(root: os.PathLike | str) -> int:
    return sum(p.stat().st_size for p in sorted(Path(root, "src").rglob("*")) if p.is_file())


def seeded_keypair(label: str) -> KeyPair:
    return generate_keypair(sha256(label.encode("utf-8")).value)


def seeded_publisher(label: str, publisher_id: Optional[str] = None) -> PublisherIdentity:
    return PublisherIdentity.from_key_pair(seeded_keypair(label), publisher_id or label)
