"""CSV output with a metadata comment line and round-trip-safe numbers.

Every file starts with ``# key=value ...`` carrying at least the config hash
and seed, followed by a header row.  Floats are written with 17 significant
digits so re-parsing reproduces them bit for bit.
"""

from __future__ import annotations

import os

import numpy as np


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: str, header: list[str], rows, meta: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_value(v) for v in row) + "\n")


def read_csv(path: str):
    """Read back a file written by :func:`write_csv`.

    Returns ``(meta, header, cells)`` where cells is a list of string rows;
    use :func:`read_matrix` for purely numeric payloads.
    """
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        meta = {}
        if first.startswith("#"):
            for tok in first[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
            header_line = fh.readline().rstrip("\n")
        else:
            header_line = first
        header = header_line.split(",")
        cells = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return meta, header, cells


def read_matrix(path: str):
    """Numeric contents of a CSV as ``(meta, header, float array)``."""
    meta, header, cells = read_csv(path)
    data = np.array([[float(v) for v in row] for row in cells], dtype=float)
    if data.size == 0:
        data = data.reshape(0, len(header))
    return meta, header, data
