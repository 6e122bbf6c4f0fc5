"""Output files with provenance headers.

CSV files start with one comment line ``# config_hash=..., seed=..., version=...``;
JSON-lines files start with a header object carrying the same keys.  Writes
go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__


def provenance(config_hash: str, seed: int | None) -> dict:
    return {"config_hash": config_hash, "seed": seed, "version": __version__}


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path, meta: dict, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write("# " + ", ".join(f"{k}={meta[k]}" for k in meta) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows([_fmt(v) for v in row] for row in rows)
    _atomic_write(path, buf.getvalue())
    return path


def write_jsonl(path: str | Path, meta: dict, rows: Iterable[dict]) -> Path:
    path = Path(path)
    lines = [json.dumps({"header": True, **meta}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in rows]
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def write_text(path: str | Path, meta: dict, body: str, comment: str = "#") -> Path:
    path = Path(path)
    head = f"{comment} " + ", ".join(f"{k}={meta[k]}" for k in meta)
    _atomic_write(path, head + "\n" + body)
    return path


def read_header(path: str | Path) -> dict:
    """Provenance header of a CSV or JSON-lines output file."""
    with open(path) as fh:
        first = fh.readline().strip()
    if first.startswith("{"):
        head = json.loads(first)
        head.pop("header", None)
        return head
    if first.startswith("#"):
        out = {}
        for part in first[1:].split(","):
            if "=" in part:
                k, v = part.strip().split("=", 1)
                out[k] = v
        return out
    raise ValueError(f"{path} has no provenance header")


def read_csv(path: str | Path) -> tuple[dict, list[dict]]:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    head = read_header(path)
    rows = list(csv.DictReader(lines[1:]))
    return head, rows


def read_jsonl(path: str | Path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        objs = [json.loads(line) for line in fh if line.strip()]
    head = objs[0]
    head.pop("header", None)
    return head, objs[1:]


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
