"""CSV ingestion and emission for input-output tables.

Formats (UTF-8, decimal point, comma separator):
  A.csv  header row of sector names, then d rows of d coefficients
  R.csv  header "impact" followed by sector names, then one row per impact:
         impact name followed by d intensities
  y.csv  d rows of one final-demand value each, no header

Floats are written with repr so a write/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NegativeEntry, ParseError
from .modelzoo import IoTable


def _read_rows(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh)]


def _parse_cell(text: str, path, line: int, column: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{path}: {text!r} is not a number", line=line, column=column) from None


def load_iotable_csv(a_path, y_path, r_path=None) -> IoTable:
    """Load and validate a table; R defaults to a single zero impact row."""
    a_rows = _read_rows(a_path)
    if not a_rows:
        raise ParseError(f"{a_path}: empty file", line=1)
    sectors = tuple(name.strip() for name in a_rows[0])
    d = len(sectors)
    if len(a_rows) != d + 1:
        raise DimensionMismatch(f"{a_path}: expected {d} coefficient rows, found {len(a_rows) - 1}")
    A = np.zeros((d, d))
    for i, row in enumerate(a_rows[1:], start=2):
        if len(row) != d:
            raise ParseError(f"{a_path}: expected {d} columns", line=i)
        for j, cell in enumerate(row):
            value = _parse_cell(cell, a_path, i, j + 1)
            if value < 0:
                raise NegativeEntry(f"{a_path}: A[{i - 2}, {j}] = {value} is negative")
            A[i - 2, j] = value

    y_rows = _read_rows(y_path)
    if len(y_rows) != d:
        raise DimensionMismatch(f"{y_path}: expected {d} demand rows, found {len(y_rows)}")
    y = np.zeros(d)
    for i, row in enumerate(y_rows, start=1):
        if len(row) != 1:
            raise ParseError(f"{y_path}: expected one value per row", line=i)
        value = _parse_cell(row[0], y_path, i, 1)
        if value < 0:
            raise NegativeEntry(f"{y_path}: y[{i - 1}] = {value} is negative")
        y[i - 1] = value

    if r_path is None:
        R = np.zeros((1, d))
        impacts = ("impact",)
    else:
        r_rows = _read_rows(r_path)
        if not r_rows:
            raise ParseError(f"{r_path}: empty file", line=1)
        header = tuple(name.strip() for name in r_rows[0][1:])
        if header != sectors:
            raise DimensionMismatch(f"{r_path}: sector header does not match {a_path}")
        impacts = tuple(row[0].strip() for row in r_rows[1:])
        R = np.zeros((len(impacts), d))
        for i, row in enumerate(r_rows[1:], start=2):
            if len(row) != d + 1:
                raise ParseError(f"{r_path}: expected {d + 1} columns", line=i)
            for j, cell in enumerate(row[1:]):
                value = _parse_cell(cell, r_path, i, j + 2)
                if value < 0:
                    raise NegativeEntry(f"{r_path}: R[{i - 2}, {j}] = {value} is negative")
                R[i - 2, j] = value

    return IoTable(A=A, R=R, y=y, sectors=sectors, impacts=impacts)


def write_iotable_csv(table: IoTable, a_path, y_path, r_path=None):
    """Inverse of load_iotable_csv; floats are repr'd for exact round trips."""
    with open(a_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.sectors)
        for row in table.A:
            writer.writerow([repr(float(v)) for v in row])
    with open(y_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for v in table.y:
            writer.writerow([repr(float(v))])
    if r_path is not None:
        with open(r_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("impact",) + table.sectors)
            for name, row in zip(table.impacts, table.R):
                writer.writerow([name] + [repr(float(v)) for v in row])
