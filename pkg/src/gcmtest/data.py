"""Column-tagged data container and CSV ingestion."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_COLUMN = re.compile(r"^([xyz])(\d*)$", re.IGNORECASE)


def _as_block(a, n: int | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise DataError(f"expected a 1-d or 2-d block, got shape {a.shape}")
    if n is not None and a.shape[0] != n:
        raise DataError(f"block has {a.shape[0]} rows, expected {n}")
    return a


@dataclass(frozen=True)
class DataSet:
    """An i.i.d. sample of ``(X, Y, Z)`` stored as three row-aligned blocks.

    Blocks are always 2-d float arrays of shape ``(n, d)``; 1-d input is
    promoted to a single column.
    """

    x_block: np.ndarray
    y_block: np.ndarray
    z_block: np.ndarray

    def __post_init__(self):
        x = _as_block(self.x_block)
        n = x.shape[0]
        y = _as_block(self.y_block, n)
        z = _as_block(self.z_block, n)
        if n < 2:
            raise DataError(f"need at least 2 rows, got {n}")
        for name, b in (("x", x), ("y", y), ("z", z)):
            if b.shape[1] == 0:
                raise DataError(f"{name} block has no columns")
            if not np.all(np.isfinite(b)):
                raise DataError(f"{name} block contains non-finite values")
        object.__setattr__(self, "x_block", x)
        object.__setattr__(self, "y_block", y)
        object.__setattr__(self, "z_block", z)

    @property
    def n(self) -> int:
        return self.x_block.shape[0]

    @property
    def d_x(self) -> int:
        return self.x_block.shape[1]

    @property
    def d_y(self) -> int:
        return self.y_block.shape[1]

    @property
    def d_z(self) -> int:
        return self.z_block.shape[1]

    def swap(self) -> "DataSet":
        """Return the sample with the roles of X and Y exchanged."""
        return DataSet(self.y_block, self.x_block, self.z_block)

    def subset(self, rows) -> "DataSet":
        rows = np.asarray(rows)
        return DataSet(self.x_block[rows], self.y_block[rows], self.z_block[rows])


def read_csv(path: str | Path) -> DataSet:
    """Load a CSV whose header names columns ``x*``, ``y*`` and ``z*``.

    Columns are grouped into blocks by their leading letter, in file order.
    Ragged rows, non-numeric cells and missing blocks raise
    :class:`DataError` with the offending line number.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        groups: dict[str, list[int]] = {"x": [], "y": [], "z": []}
        for i, name in enumerate(header):
            m = _COLUMN.match(name)
            if m is None:
                raise DataError(f"{path}:1: column {name!r} is not of the form x*, y* or z*")
            groups[m.group(1).lower()].append(i)
        for key, idx in groups.items():
            if not idx:
                raise DataError(f"{path}: missing {key} block")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{line}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric cell in {row!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")
    return DataSet(arr[:, groups["x"]], arr[:, groups["y"]], arr[:, groups["z"]])


def write_csv(data: DataSet, path: str | Path) -> None:
    cols = (
        [f"x{j + 1}" for j in range(data.d_x)]
        + [f"y{j + 1}" for j in range(data.d_y)]
        + [f"z{j + 1}" for j in range(data.d_z)]
    )
    arr = np.hstack([data.x_block, data.y_block, data.z_block])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])
