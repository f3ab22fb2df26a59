"""CSV output shared by every module: one ``#`` comment line, a header row, then data."""
from __future__ import annotations

import csv
import io
import os

from . import __version__


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def dumps_csv(header, rows, seed=None, **extra) -> str:
    buf = io.StringIO()
    notes = " ".join(f"{k}={v}" for k, v in extra.items())
    buf.write(f"# kalab {__version__} seed={seed}{' ' + notes if notes else ''}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, seed=None, **extra) -> None:
    text = dumps_csv(header, rows, seed, **extra)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def read_csv(path) -> tuple:
    """``(comment, header, rows)`` with rows as lists of strings."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    comment = lines[0] if lines and lines[0].startswith("#") else ""
    body = lines[1:] if comment else lines
    rows = list(csv.reader(body))
    return comment, rows[0] if rows else [], rows[1:]
