"""Observed-data schema for combined trial + target samples.

Each row is either a trial unit (``r = 1``) carrying assignment ``a``, received
treatment ``c`` and outcome ``y``, or a target-population unit (``r = 0``) for
which only the covariates ``x`` are observed.  On disk the layout is the CSV
header ``r,a,c,y,x1,...,xp`` with empty cells for the fields a target row does
not have.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from ptx.errors import ConsistencyError, EmptyPopulationError, SchemaError

__all__ = [
    "ObservedUnit",
    "ValidatedDataset",
    "DatasetSummary",
    "load_dataset",
    "write_csv",
    "summarize",
]


@dataclass(frozen=True)
class ObservedUnit:
    r: int
    x: tuple
    a: Optional[int] = None
    c: Optional[int] = None
    y: Optional[float] = None


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ValidatedDataset:
    """Immutable column store for a validated combined sample.

    ``a``, ``c`` and ``y`` are float arrays holding NaN on target rows; use
    :meth:`filled` for arithmetic that multiplies by trial indicators.
    """

    r: np.ndarray
    a: np.ndarray
    c: np.ndarray
    y: np.ndarray
    x: np.ndarray
    n_trial: int = field(init=False)
    n_target: int = field(init=False)

    def __post_init__(self):
        r = np.asarray(self.r)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        a = np.asarray(self.a, dtype=float)
        c = np.asarray(self.c, dtype=float)
        y = np.asarray(self.y, dtype=float)
        n = r.shape[0]
        if x.ndim != 2 or x.shape[0] != n or not (a.shape == c.shape == y.shape == (n,)):
            raise SchemaError("column lengths disagree")
        if not np.all((r == 0) | (r == 1)):
            bad = int(np.flatnonzero((r != 0) & (r != 1))[0]) + 1
            raise SchemaError(f"row {bad}: r must be 0 or 1")
        r = r.astype(np.int8)
        trial = r == 1
        present = np.column_stack([~np.isnan(a), ~np.isnan(c), ~np.isnan(y)])
        bad = (trial & ~present.all(axis=1)) | (~trial & present.any(axis=1))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            what = "trial row must have a, c and y" if trial[i] else "target row must leave a, c and y empty"
            raise ConsistencyError(f"row {i + 1}: {what}")
        for name, col in (("a", a), ("c", c)):
            vals = col[trial]
            if not np.all((vals == 0) | (vals == 1)):
                bad = int(np.flatnonzero(trial)[np.flatnonzero((vals != 0) & (vals != 1))[0]]) + 1
                raise SchemaError(f"row {bad}: {name} must be 0 or 1")
        if not np.all(np.isfinite(y[trial])):
            bad = int(np.flatnonzero(trial & ~np.isfinite(y))[0]) + 1
            raise SchemaError(f"row {bad}: y must be finite")
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0]) + 1
            raise SchemaError(f"row {bad}: covariates must be finite")
        n_trial = int(trial.sum())
        if n_trial == 0:
            raise EmptyPopulationError("no trial rows (r=1)")
        if n_trial == n:
            raise EmptyPopulationError("no target rows (r=0)")
        arms = a[trial]
        for arm in (1, 0):
            if not np.any(arms == arm):
                raise EmptyPopulationError(f"no trial rows with a={arm}")
        object.__setattr__(self, "r", _readonly(r))
        object.__setattr__(self, "a", _readonly(a))
        object.__setattr__(self, "c", _readonly(c))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "n_trial", n_trial)
        object.__setattr__(self, "n_target", n - n_trial)

    @classmethod
    def from_arrays(cls, r, x, a=None, c=None, y=None):
        """Build a dataset from columns; ``a``/``c``/``y`` may be given for
        trial rows only (length ``n_trial``) or for all rows with NaN on
        target rows."""
        r = np.asarray(r)
        n = r.shape[0]
        trial = r == 1

        def expand(col):
            if col is None:
                return np.full(n, np.nan)
            col = np.asarray(col, dtype=float)
            if col.shape[0] == n:
                return col
            full = np.full(n, np.nan)
            full[trial] = col
            return full

        return cls(r=r, a=expand(a), c=expand(c), y=expand(y), x=x)

    @classmethod
    def from_units(cls, units: Iterable[ObservedUnit]):
        units = list(units)
        nan = float("nan")
        return cls(
            r=np.array([u.r for u in units]),
            a=np.array([nan if u.a is None else u.a for u in units], dtype=float),
            c=np.array([nan if u.c is None else u.c for u in units], dtype=float),
            y=np.array([nan if u.y is None else u.y for u in units], dtype=float),
            x=np.array([u.x for u in units], dtype=float),
        )

    @property
    def n(self) -> int:
        return int(self.r.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def units(self) -> list:
        out = []
        for i in range(self.n):
            if self.r[i] == 1:
                out.append(ObservedUnit(1, tuple(self.x[i]), int(self.a[i]), int(self.c[i]), float(self.y[i])))
            else:
                out.append(ObservedUnit(0, tuple(self.x[i])))
        return out

    def filled(self):
        """Return ``(a, c, y)`` with zeros on target rows."""
        return (
            np.nan_to_num(self.a, nan=0.0),
            np.nan_to_num(self.c, nan=0.0),
            np.nan_to_num(self.y, nan=0.0),
        )

    def take(self, index) -> "ValidatedDataset":
        """Row subset (boolean mask or integer index), re-validated."""
        index = np.asarray(index)
        return ValidatedDataset(
            r=self.r[index], a=self.a[index], c=self.c[index], y=self.y[index], x=self.x[index]
        )

    def with_outcome(self, y) -> "ValidatedDataset":
        """Copy with the trial outcomes replaced by ``y`` (length n, NaN on target rows)."""
        y = np.where(self.r == 1, np.asarray(y, dtype=float), np.nan)
        return ValidatedDataset(r=self.r, a=self.a, c=self.c, y=y, x=self.x)

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, ValidatedDataset):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
            for k in ("r", "a", "c", "y", "x")
        )


def _open_text(source):
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline="")
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    # binary file-like object
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def _parse_float(cell, row, col):
    try:
        return float(cell)
    except ValueError:
        raise SchemaError(f"row {row}: non-numeric value {cell!r} in column {col}") from None


def load_dataset(source) -> ValidatedDataset:
    """Read a combined trial/target CSV.

    Parameters
    ----------
    source : path, bytes, or file object (text or binary)
        CSV with header ``r,a,c,y,x1,...,xp``.  Target rows leave ``a``, ``c``
        and ``y`` empty.

    Raises
    ------
    SchemaError, ConsistencyError, EmptyPopulationError
        Messages carry the 1-based data-row index.
    """
    handle = _open_text(source)
    try:
        reader = csv.reader(handle)
        try:
            header = [h.strip().lstrip("﻿") for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file") from None
        p = len(header) - 4
        expected = ["r", "a", "c", "y"] + [f"x{j}" for j in range(1, p + 1)]
        if p < 1 or header != expected:
            raise SchemaError(f"header must be r,a,c,y,x1,...,xp; got {','.join(header)}")
        rows = []
        for i, raw in enumerate(reader, start=1):
            if not raw or all(not cell.strip() for cell in raw):
                continue
            if len(raw) != len(header):
                raise SchemaError(f"row {i}: expected {len(header)} cells, got {len(raw)}")
            cells = [cell.strip() for cell in raw]
            r = _parse_float(cells[0], i, "r")
            if r not in (0.0, 1.0):
                raise SchemaError(f"row {i}: r must be 0 or 1")
            acy = [None if cells[k] == "" else _parse_float(cells[k], i, header[k]) for k in (1, 2, 3)]
            if r == 1 and any(v is None for v in acy):
                raise ConsistencyError(f"row {i}: trial row must have a, c and y")
            if r == 0 and any(v is not None for v in acy):
                raise ConsistencyError(f"row {i}: target row must leave a, c and y empty")
            x = [_parse_float(cells[k], i, header[k]) for k in range(4, len(header))]
            rows.append((int(r), acy, x))
    finally:
        if handle is not source:
            handle.close()
    if not rows:
        raise EmptyPopulationError("file has no data rows")
    nan = math.nan
    return ValidatedDataset(
        r=np.array([row[0] for row in rows]),
        a=np.array([nan if row[1][0] is None else row[1][0] for row in rows]),
        c=np.array([nan if row[1][1] is None else row[1][1] for row in rows]),
        y=np.array([nan if row[1][2] is None else row[1][2] for row in rows]),
        x=np.array([row[2] for row in rows], dtype=float),
    )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(dataset: ValidatedDataset, dest=None) -> Optional[str]:
    """Write ``dataset`` as CSV (17 significant digits).  Returns the text if
    ``dest`` is None, otherwise writes to the path or text stream."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["r", "a", "c", "y"] + [f"x{j}" for j in range(1, dataset.p + 1)])
    for i in range(dataset.n):
        xs = [_fmt(v) for v in dataset.x[i]]
        if dataset.r[i] == 1:
            writer.writerow(["1", str(int(dataset.a[i])), str(int(dataset.c[i])), _fmt(dataset.y[i])] + xs)
        else:
            writer.writerow(["0", "", "", ""] + xs)
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        dest.write(text)
    return None


@dataclass(frozen=True)
class DatasetSummary:
    counts: dict
    cells: dict
    covariates: list

    def to_dict(self):
        return {
            "counts": dict(self.counts),
            "cells": {f"a={a},c={c}": n for (a, c), n in self.cells.items()},
            "covariates": list(self.covariates),
        }


def summarize(dataset: ValidatedDataset) -> DatasetSummary:
    """Counts by population and by (a, c) cell in the trial, plus per-covariate
    mean/min/max over the combined sample."""
    trial = dataset.r == 1
    counts = {"trial": dataset.n_trial, "target": dataset.n_target, "total": dataset.n}
    cells = {}
    for a in (1, 0):
        for c in (1, 0):
            cells[(a, c)] = int(np.sum(trial & (dataset.a == a) & (dataset.c == c)))
    covariates = []
    for j in range(dataset.p):
        col = dataset.x[:, j]
        covariates.append(
            {"name": f"x{j + 1}", "mean": float(col.mean()), "min": float(col.min()), "max": float(col.max())}
        )
    return DatasetSummary(counts=counts, cells=cells, covariates=covariates)
