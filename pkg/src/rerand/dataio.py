"""CSV input with row and column diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError


class DataError(DomainError):
    """Malformed tabular input."""


@dataclass
class Table:
    header: list[str]
    rows: list[list[str]]
    source: str = "<memory>"

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def _col(self, name: str) -> int:
        try:
            return self.header.index(name)
        except ValueError:
            raise DataError(f"{self.source}: no column named {name!r}; have {self.header}") from None

    def text(self, name: str) -> list[str]:
        j = self._col(name)
        out = []
        for i, row in enumerate(self.rows):
            value = row[j].strip()
            if value == "":
                raise DataError(f"{self.source}: missing value at line {i + 2}, column {name!r}")
            out.append(value)
        return out

    def numeric(self, name: str) -> np.ndarray:
        out = np.empty(self.n_rows)
        for i, value in enumerate(self.text(name)):
            try:
                out[i] = float(value)
            except ValueError:
                raise DataError(
                    f"{self.source}: non-numeric value {value!r} at line {i + 2}, column {name!r}"
                ) from None
            if not math.isfinite(out[i]):
                raise DataError(f"{self.source}: non-finite value at line {i + 2}, column {name!r}")
        return out

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([self.numeric(c) for c in names])


def read_table(path) -> Table:
    """Read a headed CSV file; ragged rows and empty files are errors."""
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {reader.line_num} has {len(row)} fields, expected {len(header)}"
                )
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Table(header, rows, str(path))


def read_matrix(path, columns=None) -> tuple[np.ndarray, list[str]]:
    """Numeric matrix from ``columns`` (all columns when None)."""
    table = read_table(path)
    names = list(columns) if columns else table.header
    return table.matrix(names), names


def write_curve_csv(path, rows, header=("p_a", "value", "stderr")) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
