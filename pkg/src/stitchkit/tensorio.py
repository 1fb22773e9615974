"""Plain-text tensor files: a dims header per tensor followed by row-major floats.

::

    # stitchkit tensors v1
    # kind: random_projection
    tensor weights 2 4
    0.5 -0.5 0.5 -0.5
    0.5 0.5 -0.5 -0.5
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datamodel import ParseError


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = ["# stitchkit tensors v1"]
    lines += [f"# {k}: {v}" for k, v in (meta or {}).items()]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=float)
        lines.append(" ".join(["tensor", name, *map(str, arr.shape)]))
        rows = arr.reshape(1, -1) if arr.ndim <= 1 else arr.reshape(arr.shape[0], -1)
        if arr.size:
            lines += [" ".join(repr(float(x)) for x in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    current: tuple[str, tuple[int, ...]] | None = None
    values: list[float] = []

    def flush():
        if current is not None:
            name, shape = current
            if len(values) != int(np.prod(shape)):
                raise ParseError(f"{path}: tensor {name} expects {int(np.prod(shape))} values, got {len(values)}")
            tensors[name] = np.asarray(values, dtype=float).reshape(shape)

    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition(":")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        parts = line.split()
        if parts[0] == "tensor":
            flush()
            try:
                current = (parts[1], tuple(int(p) for p in parts[2:]))
            except (IndexError, ValueError):
                raise ParseError(f"{path}:{lineno}: malformed tensor header")
            values = []
            continue
        if current is None:
            raise ParseError(f"{path}:{lineno}: values before any tensor header")
        try:
            values.extend(float(p) for p in parts)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}")
    flush()
    return tensors, meta
