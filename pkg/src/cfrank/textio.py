"""Versioned plain-text persistence for matrices and metadata.

One format serves every checkpoint in the package: a version line, `#meta`
key=value lines, then named blocks of `name rows cols` followed by one
space-separated row per line. Floats are written with repr-exact precision
so saved and reloaded arrays compare equal bit for bit.
"""

from __future__ import annotations

import numpy as np

FORMAT_VERSION = "cfrank-matrix v1"


def save_matrices(path, arrays: dict, meta: dict | None = None) -> None:
    lines = [f"#{FORMAT_VERSION}"]
    for key in sorted((meta or {})):
        lines.append(f"#meta {key}={meta[key]}")
    for name, arr in arrays.items():
        a = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
        for row in a:
            lines.append(" ".join(repr(float(x)) for x in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_matrices(path) -> tuple[dict, dict]:
    """Returns (arrays, meta). 1xN blocks come back as 2-D; callers ravel."""
    arrays: dict = {}
    meta: dict = {}
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != f"#{FORMAT_VERSION}":
        raise ValueError(f"{path}: not a {FORMAT_VERSION} file")
    i = 1
    while i < len(lines) and lines[i].startswith("#meta "):
        key, _, value = lines[i][len("#meta "):].partition("=")
        meta[key] = value
        i += 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        block = lines[i + 1 : i + 1 + rows]
        arrays[name] = np.array(
            [[float(x) for x in row.split()] for row in block], dtype=np.float64
        ).reshape(rows, cols)
        i += 1 + rows
    return arrays, meta
