"""Observation tables: CSV ingestion, validation, fold assignment, standardization.

Tables are immutable after construction (arrays are marked read-only), so
they can be shared freely across threads; all mutation-like operations
return new tables.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DegenerateColumnError,
    ParseError,
    SchemaError,
    ValidationError,
)

_MISSING_TOKENS = {"", "nan", "na", "null", "none", "n/a"}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ObservationTable:
    """Validated estimation table.

    Attributes
    ----------
    y : (n,) outcome vector
    t : (n,) treatment dose vector
    x_num : (n, p) numeric covariates
    x_cat : (n, q) categorical covariates as dense integer codes starting at 0
    n : row count
    """

    y: np.ndarray
    t: np.ndarray
    x_num: np.ndarray
    x_cat: np.ndarray
    n: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        x_num = np.asarray(self.x_num, dtype=np.float64)
        x_cat = np.asarray(self.x_cat, dtype=np.int64)
        if y.ndim != 1 or t.ndim != 1:
            raise ValidationError("dataset: y and t must be 1-d vectors")
        n = y.shape[0]
        if n < 2:
            raise ValidationError(f"dataset: need at least 2 rows, got {n}")
        if x_num.size == 0:
            x_num = x_num.reshape(n, 0)
        if x_cat.size == 0:
            x_cat = x_cat.reshape(n, 0)
        for name, col in (("t", t), ("x_num", x_num), ("x_cat", x_cat)):
            if col.shape[0] != n:
                raise ValidationError(f"dataset: column {name} has length "
                                      f"{col.shape[0]}, expected {n}")
        if not np.isfinite(y).all() or not np.isfinite(t).all() \
                or not np.isfinite(x_num).all():
            raise ValidationError("dataset: NaN or infinite value in table")
        for j in range(x_cat.shape[1]):
            codes = x_cat[:, j]
            if codes.min(initial=0) < 0:
                raise ValidationError(f"dataset: negative code in c{j}")
            present = np.unique(codes)
            if codes.size and not np.array_equal(present,
                                                 np.arange(present.size)):
                raise ValidationError(
                    f"dataset: codes in c{j} are not dense integers from 0")
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "t", _readonly(t))
        object.__setattr__(self, "x_num", _readonly(x_num))
        object.__setattr__(self, "x_cat", _readonly(x_cat))
        object.__setattr__(self, "n", int(n))

    def column(self, label: str) -> np.ndarray:
        """Look up a column by label: 'y', 't', 'x<j>' or 'c<j>'."""
        if label == "y":
            return self.y
        if label == "t":
            return self.t
        if label.startswith("x"):
            return self.x_num[:, int(label[1:])]
        if label.startswith("c"):
            return self.x_cat[:, int(label[1:])].astype(np.float64)
        raise ConfigError(f"dataset: unknown column label {label!r}")

    def column_labels(self) -> list[str]:
        return (["y", "t"]
                + [f"x{j}" for j in range(self.x_num.shape[1])]
                + [f"c{j}" for j in range(self.x_cat.shape[1])])


def make_table(y, t, x_num=None, x_cat=None) -> ObservationTable:
    """Build a validated table from raw arrays."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if x_num is None:
        x_num = np.empty((n, 0))
    if x_cat is None:
        x_cat = np.empty((n, 0), dtype=np.int64)
    x_num = np.asarray(x_num, dtype=np.float64)
    x_cat = np.asarray(x_cat)
    if x_num.ndim == 1:
        x_num = x_num.reshape(-1, 1)
    if x_cat.ndim == 1:
        x_cat = x_cat.reshape(-1, 1)
    return ObservationTable(y=y, t=np.asarray(t, dtype=np.float64),
                            x_num=x_num, x_cat=x_cat, n=n)


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV column names onto table roles."""

    y: str
    t: str
    x: tuple[str, ...] = ()
    cat: tuple[str, ...] = ()


def _parse_numeric(series: pd.Series, name: str) -> np.ndarray:
    # numpy's str->float conversion is correctly rounded, so a write/load
    # cycle with repr() is value-identical; pd.to_numeric is not.
    try:
        vals = series.to_numpy(dtype=np.float64)
    except (ValueError, TypeError):
        for row, cell in enumerate(series):
            text = str(cell).strip()
            try:
                float(text)
            except ValueError:
                if text.lower() in _MISSING_TOKENS:
                    raise ValidationError(f"dataset: missing value in column "
                                          f"{name!r} at row {row}")
                raise ParseError(f"dataset: non-numeric value {text!r} in "
                                 f"column {name!r} at row {row}")
        raise ParseError(f"dataset: could not parse column {name!r}")
    bad = ~np.isfinite(vals)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ValidationError(
            f"dataset: NaN or non-finite value in column {name!r} at row {row}")
    return vals


def _encode_categorical(series: pd.Series, name: str) -> np.ndarray:
    raw = series.to_numpy(dtype=object)
    cleaned = np.array([str(v).strip() for v in raw], dtype=object)
    if any(v.lower() in _MISSING_TOKENS for v in cleaned):
        row = next(i for i, v in enumerate(cleaned)
                   if v.lower() in _MISSING_TOKENS)
        raise ValidationError(
            f"dataset: missing value in column {name!r} at row {row}")
    # Integer-looking categories are ordered numerically so that a
    # write -> load round trip preserves the codes; anything else is
    # ordered lexicographically.
    try:
        as_int = np.array([int(v) for v in cleaned], dtype=np.int64)
        _, codes = np.unique(as_int, return_inverse=True)
    except ValueError:
        _, codes = np.unique(cleaned, return_inverse=True)
    return codes.astype(np.int64)


def load_csv(path, schema: ColumnSchema) -> ObservationTable:
    """Load a header-anchored CSV into a validated ObservationTable.

    Numeric columns must parse cleanly; the first offending cell is
    reported with its 0-based data row index.  Missing values are
    rejected, not imputed.
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    needed = [schema.y, schema.t, *schema.x, *schema.cat]
    missing = [c for c in needed if c not in raw.columns]
    if missing:
        raise SchemaError(f"dataset: missing column(s) {missing} in {path}")
    y = _parse_numeric(raw[schema.y], schema.y)
    t = _parse_numeric(raw[schema.t], schema.t)
    x_num = (np.column_stack([_parse_numeric(raw[c], c) for c in schema.x])
             if schema.x else None)
    x_cat = (np.column_stack([_encode_categorical(raw[c], c) for c in schema.cat])
             if schema.cat else None)
    return make_table(y, t, x_num=x_num, x_cat=x_cat)


def write_csv(table: ObservationTable, path, schema: ColumnSchema | None = None) -> None:
    """Write a table using full-precision floats so load round-trips exactly."""
    if schema is None:
        schema = ColumnSchema(
            y="y", t="t",
            x=tuple(f"x{j}" for j in range(table.x_num.shape[1])),
            cat=tuple(f"c{j}" for j in range(table.x_cat.shape[1])))
    cols: dict[str, np.ndarray] = {schema.y: table.y, schema.t: table.t}
    for j, name in enumerate(schema.x):
        cols[name] = table.x_num[:, j]
    for j, name in enumerate(schema.cat):
        cols[name] = table.x_cat[:, j]
    frame = pd.DataFrame({k: [repr(float(v)) if np.issubdtype(a.dtype, np.floating)
                               else str(int(v)) for v in a]
                          for k, a in ((k, np.asarray(a)) for k, a in cols.items())})
    frame.to_csv(path, index=False)


@dataclass(frozen=True)
class FoldAssignment:
    """Balanced random partition of row indices into folds."""

    fold_of: np.ndarray
    n_folds: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of",
                           _readonly(np.asarray(self.fold_of, dtype=np.int64)))
        counts = np.bincount(self.fold_of, minlength=self.n_folds)
        if counts.min() == 0:
            raise ValidationError("dataset: fold assignment has an empty fold")
        if counts.max() - counts.min() > 1:
            raise ValidationError("dataset: fold sizes differ by more than 1")

    def test_mask(self, fold: int) -> np.ndarray:
        return self.fold_of == fold


def make_folds(n: int, n_folds: int, seed: int) -> FoldAssignment:
    """Deterministic balanced random fold assignment."""
    if not 2 <= n_folds <= n:
        raise ConfigError(
            f"dataset: need 2 <= n_folds <= n, got n_folds={n_folds}, n={n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[rng.permutation(n)] = np.arange(n) % n_folds
    return FoldAssignment(fold_of=fold_of, n_folds=n_folds)


@dataclass(frozen=True)
class StandardizationSpec:
    """Per-column means/sds used to standardize, enough to invert exactly."""

    columns: tuple[str, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]
    enabled: bool = True

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "means": list(self.means),
                "sds": list(self.sds), "enabled": self.enabled}


def _replace_column(table: ObservationTable, label: str,
                    values: np.ndarray) -> ObservationTable:
    if label == "y":
        return dataclasses.replace(table, y=values)
    if label == "t":
        return dataclasses.replace(table, t=values)
    if label.startswith("x"):
        x = table.x_num.copy()
        x[:, int(label[1:])] = values
        return dataclasses.replace(table, x_num=x)
    raise ConfigError(f"dataset: cannot standardize column {label!r}")


def standardize(table: ObservationTable,
                columns: tuple[str, ...] = ("y", "t"),
                ) -> tuple[ObservationTable, StandardizationSpec]:
    """Center and scale selected numeric columns to mean 0, sd 1.

    Categorical columns are not standardizable.  Raises
    DegenerateColumnError on a zero-variance column.
    """
    means, sds = [], []
    out = table
    for label in columns:
        if label.startswith("c"):
            raise ConfigError(f"dataset: cannot standardize categorical {label!r}")
        col = table.column(label)
        mu = float(col.mean())
        sd = float(col.std())
        if sd <= 0.0:
            raise DegenerateColumnError(
                f"dataset: column {label!r} has zero variance")
        out = _replace_column(out, label, (col - mu) / sd)
        means.append(mu)
        sds.append(sd)
    spec = StandardizationSpec(columns=tuple(columns), means=tuple(means),
                               sds=tuple(sds))
    return out, spec


def destandardize(table: ObservationTable,
                  spec: StandardizationSpec) -> ObservationTable:
    """Invert a standardization (exact up to float rounding)."""
    out = table
    for label, mu, sd in zip(spec.columns, spec.means, spec.sds):
        out = _replace_column(out, label, out.column(label) * sd + mu)
    return out
