"""A reproducible byte corpus built offline from the Python standard library.

Docstrings of stdlib modules give about 1.4 MB of English-ish technical text
without any download. Module order is sorted, so the bytes are identical on
every machine with the same Python version.
"""
from __future__ import annotations

import ast
import sysconfig
from pathlib import Path

MIN_BYTES = 1_000_000


def _docstrings(path: Path) -> list[str]:
    try:
        tree = ast.parse(path.read_text(encoding="utf-8"))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return []
    out = []
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node)
            if doc and len(doc) > 40:
                out.append(doc)
    return out


def build_stdlib_corpus(max_bytes: int | None = None) -> bytes:
    """Concatenated stdlib docstrings (tests and site-packages excluded), ASCII only."""
    root = Path(sysconfig.get_paths()["stdlib"])
    files = sorted(p for p in root.rglob("*.py")
                   if "site-packages" not in p.parts and "test" not in p.parts
                   and "tests" not in p.parts and "idlelib" not in p.parts)
    chunks, total = [], 0
    for f in files:
        for doc in _docstrings(f):
            b = doc.encode("ascii", errors="ignore") + b"\n\n"
            chunks.append(b)
            total += len(b)
            if max_bytes is not None and total >= max_bytes:
                return b"".join(chunks)[:max_bytes]
    return b"".join(chunks)


def load_corpus(path: str | Path | None = None) -> bytes:
    """Read a corpus file, or build the stdlib corpus when ``path`` is None."""
    if path is None:
        return build_stdlib_corpus()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus not found: {p}")
    return p.read_bytes()


def write_stdlib_corpus(path: str | Path) -> int:
    data = build_stdlib_corpus()
    Path(path).write_bytes(data)
    return len(data)
