"""Accuracy tables and preprocessing-filter exports."""

from __future__ import annotations

import csv
import io
import math
import re
from pathlib import Path

import numpy as np

from .data.pgm import atomic_write_bytes, write_pgm
from .evaluation import EvalResult
from .networks import DISPLAY_NAMES

# Reference macro accuracies of the five architectures on a nine-brand
# real-camera benchmark.  Documentation only: the corpus is not bundled.
REFERENCE_AVERAGES = {"HP-CNN": 81.62, "CA3-CNN": 87.72, "CA5-CNN": 90.11, "CA7-CNN": 90.68, "CAF-CNN": 94.17}

AVERAGE_ROW = "AVE"


def _column_name(result: EvalResult) -> str:
    return DISPLAY_NAMES.get(result.tag, result.tag or "model")


def _pct(value: float) -> str:
    return "n/a" if math.isnan(value) else f"{100 * value:.2f}%"


def table_rows(results: list[EvalResult]) -> tuple[list[str], list[str], list[list[float]]]:
    if not results:
        raise ValueError("no results to tabulate")
    labels = results[0].labels
    for r in results[1:]:
        if r.labels != labels:
            raise ValueError(f"inconsistent class sets: {labels} vs {r.labels}")
    columns = [_column_name(r) for r in results]
    rows = [[r.per_class[name] for r in results] for name in labels]
    rows.append([r.average for r in results])
    return columns, [*labels, AVERAGE_ROW], rows


def render_table(results: list[EvalResult]) -> str:
    """Per-class accuracy table with an AVE (macro) row; best per row in ``**bold**``.

    The line after the table lists micro accuracies, which may differ from
    AVE when classes are unbalanced.
    """
    columns, names, rows = table_rows(results)
    cells = []
    for values in rows:
        finite = [v for v in values if not math.isnan(v)]
        best = round(100 * max(finite), 2) if finite else None
        cells.append([
            f"**{_pct(v)}**" if best is not None and not math.isnan(v) and round(100 * v, 2) == best
            else _pct(v)
            for v in values
        ])
    widths = [max(len(x) for x in [""] + names)] + [
        max(len(columns[j]), *(len(row[j]) for row in cells)) for j in range(len(columns))
    ]

    def line(first, rest):
        return "| " + " | ".join([first.ljust(widths[0])] + [c.rjust(w) for c, w in zip(rest, widths[1:])]) + " |"

    out = [line("", columns), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [line(name, row) for name, row in zip(names, cells)]
    out.append("micro: " + ", ".join(f"{c} {_pct(r.micro)}" for c, r in zip(columns, results)))
    return "\n".join(out) + "\n"


_CELL = re.compile(r"^\**(n/a|-?[0-9.]+)%?\**$")


def parse_table(text: str) -> dict[str, dict[str, float]]:
    """Inverse of :func:`render_table`: ``{row: {column: percent}}``."""
    lines = [ln for ln in text.splitlines() if ln.startswith("|")]
    header = [c.strip() for c in lines[0].strip("|").split("|")][1:]
    table = {}
    for ln in lines[2:]:
        cells = [c.strip() for c in ln.strip("|").split("|")]
        values = {}
        for col, cell in zip(header, cells[1:]):
            m = _CELL.match(cell)
            if not m:
                raise ValueError(f"unparseable cell {cell!r}")
            values[col] = float("nan") if m.group(1) == "n/a" else float(m.group(1))
        table[cells[0]] = values
    return table


def table_csv(results: list[EvalResult]) -> str:
    columns, names, rows = table_rows(results)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", *columns])
    for name, values in zip(names, rows):
        writer.writerow([name, *("" if math.isnan(v) else f"{100 * v:.2f}" for v in values)])
    writer.writerow(["MICRO", *(f"{100 * r.micro:.2f}" for r in results)])
    return buf.getvalue()


def kernel_to_gray(kernel: np.ndarray) -> np.ndarray:
    """Min-max scale a kernel to 0..255; a constant kernel maps to 128."""
    k = np.asarray(kernel, dtype=np.float64)
    lo, hi = k.min(), k.max()
    if hi == lo:
        return np.full(k.shape, 128, dtype=np.uint8)
    return np.round((k - lo) / (hi - lo) * 255.0).astype(np.uint8)


def kernel_csv(kernel: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(kernel))


def read_kernel_csv(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([[float(v) for v in ln.split(",")] for ln in rows])


def render_filters(kernels, out_dir, names=None) -> list[tuple[Path, Path]]:
    """Write each square kernel as ``<name>.pgm`` (8-bit) and ``<name>.csv`` (exact values)."""
    out_dir = Path(out_dir)
    kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
    names = names or [f"kernel{i}_{k.shape[0]}x{k.shape[1]}" for i, k in enumerate(kernels)]
    written = []
    for name, k in zip(names, kernels):
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise ValueError(f"kernel {name!r} is not square: shape {k.shape}")
        pgm, csv_path = out_dir / f"{name}.pgm", out_dir / f"{name}.csv"
        write_pgm(pgm, kernel_to_gray(k))
        atomic_write_bytes(csv_path, kernel_csv(k).encode("ascii"))
        written.append((pgm, csv_path))
    return written
