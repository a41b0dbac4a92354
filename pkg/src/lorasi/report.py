"""Report files: loss curves, eval rows, summary, importance heatmap, tables.

Curve and eval files are CSV written one flushed row at a time, so a run
killed at any point leaves a parseable prefix. The summary is a JSON document.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from .importance import ImportanceState

__all__ = [
    "CURVE_COLUMNS",
    "EVAL_COLUMNS",
    "HEATMAP_COLUMNS",
    "COMPARE_COLUMNS",
    "CsvLog",
    "write_csv",
    "read_csv",
    "write_summary",
    "heatmap_rows",
    "format_table",
]

CURVE_COLUMNS = ("step", "phase", "task_loss", "reg_loss", "weighted_total")
EVAL_COLUMNS = ("phase", "epoch", "split", "ce", "ppl", "acc")
HEATMAP_COLUMNS = ("block", "matrix_name", "l2_norm", "log10_l2_norm")
COMPARE_COLUMNS = ("strategy", "ppl_nu", "acc_mu", "forgetting", "nu_ce_after_mu", "mu_ce")


def _fmt(v) -> str:
    # repr keeps every bit of a float; csv readers parse it back exactly
    return repr(v) if isinstance(v, float) else str(v)


class CsvLog:
    """Append-only CSV writer that flushes after every row."""

    def __init__(self, path: str | Path, columns: Sequence[str], rows: Iterable[Sequence] = ()):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._f = open(self.path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(self.columns)
        for row in rows:
            self._w.writerow([_fmt(v) for v in row])
        self._f.flush()

    def append(self, row: Sequence) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"{self.path.name}: expected {len(self.columns)} fields, got {len(row)}")
        self._w.writerow([_fmt(v) for v in row])
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(target: str | Path | TextIO, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a whole CSV to a path or an open text stream."""
    if isinstance(target, (str, Path)):
        CsvLog(target, columns, rows).close()
        return
    w = csv.writer(target, lineterminator="\n")
    w.writerow(columns)
    w.writerows([_fmt(v) for v in row] for row in rows)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_summary(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")


def heatmap_rows(importance: ImportanceState) -> list[tuple[int, str, float, float]]:
    """One row per adapted matrix: block index, matrix name, ||Omega||, log10 of it.

    Layer ids are expected in the ``block{b}.{name}`` form used by the model.
    """
    rows = []
    for lid, norm in importance.layer_l2_norms().items():
        block, name = lid.split(".", 1)
        log_norm = math.log10(norm) if norm > 0 else -math.inf
        rows.append((int(block.removeprefix("block")), name, norm, log_norm))
    return rows


def format_table(rows: Sequence[dict], columns: Sequence[str], digits: int = 4) -> str:
    """Fixed-width text table."""

    def cell(v):
        return f"{v:.{digits}f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    line = lambda cells: "  ".join(s.rjust(w) if i else s.ljust(w) for i, (s, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(columns), line(["-" * w for w in widths]), *map(line, body)])
