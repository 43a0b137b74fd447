"""Small shared helpers: deterministic parallel map and plain-text exports."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np


def parallel_map(fn, items, workers: int = 1) -> list:
    """Map fn over items, optionally on a thread pool.

    Results are merged in input order, so the output is independent of the
    worker count. Each item must be computable independently (no shared
    mutable state inside fn).
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def save_matrix_txt(path, array) -> None:
    """Write a matrix as plain text, one row per line, full precision."""
    arr = np.atleast_2d(np.asarray(array))
    np.savetxt(path, arr, fmt="%.17g")


def load_matrix_txt(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path))


def write_csv(path, header: list[str], rows) -> None:
    """Write rows of mixed scalars as CSV; floats at full round-trip precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return int(value)
    return value
