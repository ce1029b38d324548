"""Per-step experiment records and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

TRACE_HEADER = ("t", "ux", "uy", "uz", "entropy", "boundary_energy", "pcd", "pug", "event")


@dataclass(frozen=True)
class TraceRecord:
    t: int
    u: tuple[float, float, float]
    entropy: float
    boundary_energy: float
    pcd: float | None
    pug: float | None
    event: str = ""


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    return f"{float(v):.9g}"


def _parse(s: str) -> float | None:
    return None if s == "" else float(s)


def trace_rows(records: Iterable[TraceRecord]) -> list[list[str]]:
    return [[str(r.t), *(_fmt(c) for c in r.u), _fmt(r.entropy), _fmt(r.boundary_energy),
             _fmt(r.pcd), _fmt(r.pug), r.event] for r in records]


def export_trace(records: Iterable[TraceRecord], path, comments: dict | None = None) -> Path:
    """Write the trace CSV; ``comments`` become leading ``# key: value`` lines."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for k, v in (comments or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        w.writerows(trace_rows(records))
    return path


def load_trace(path) -> list[TraceRecord]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if tuple(header) != TRACE_HEADER:
        raise ValueError(f"unexpected trace header {header}")
    out = []
    for row in reader:
        out.append(TraceRecord(int(row[0]), (float(row[1]), float(row[2]), float(row[3])), float(row[4]),
                               float(row[5]), _parse(row[6]), _parse(row[7]), row[8]))
    return out


def round_record(r: TraceRecord) -> TraceRecord:
    """The record as it reads back after serialisation (9 significant digits)."""
    def q(v):
        return None if v is None else float(_fmt(v))
    return TraceRecord(r.t, tuple(q(c) for c in r.u), q(r.entropy), q(r.boundary_energy), q(r.pcd), q(r.pug), r.event)
