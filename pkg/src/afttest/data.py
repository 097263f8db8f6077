"""Survival dataset container, CSV ingestion and covariate scaling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    MissingColumn,
    NoEvents,
    NonPositiveTime,
    UnparseableValue,
    ZeroVariance,
)
from .formula import ModelSpec, Term

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"
KINDS = (CONTINUOUS, BINARY)

MISSING_TOKENS = frozenset({"", "NA", "na", "NaN", "nan", "N/A"})

Table = dict  # column name -> list of raw cell strings (None for missing)


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Right-censored observations ``(X_i, Delta_i, Z_i)``.

    ``covariates`` holds the (possibly scaled) design used downstream;
    ``center`` and ``scale`` record the affine map applied to each column so
    that ``raw = covariates * scale + center``.
    """

    time: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    center: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float)
        status = np.asarray(self.status, dtype=float)
        z = np.asarray(self.covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        p = z.shape[1]
        center = np.zeros(p) if self.center is None else np.asarray(self.center, float)
        scale = np.ones(p) if self.scale is None else np.asarray(self.scale, float)
        for name, arr in (("time", time), ("status", status), ("covariates", z),
                          ("center", center), ("scale", scale)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        self.validate()

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def log_time(self) -> np.ndarray:
        return np.log(self.time)

    @property
    def raw_covariates(self) -> np.ndarray:
        return self.covariates * self.scale + self.center

    @property
    def is_standardized(self) -> bool:
        return bool(np.any(self.scale != 1.0) or np.any(self.center != 0.0))

    def validate(self):
        n = self.time.shape[0]
        if self.time.ndim != 1 or self.status.shape != (n,):
            raise DataError("time and status must be vectors of equal length")
        if self.covariates.shape[0] != n:
            raise DataError("covariate matrix row count does not match time")
        if n < 2:
            raise DataError("at least two observations are required")
        if self.p < 1:
            raise DataError("at least one covariate is required")
        if len(self.names) != self.p or len(self.kinds) != self.p:
            raise DataError("names/kinds must have one entry per covariate column")
        if self.center.shape != (self.p,) or self.scale.shape != (self.p,):
            raise DataError("center/scale must have one entry per covariate column")
        for arr in (self.time, self.status, self.covariates):
            if not np.all(np.isfinite(arr)):
                raise DataError("missing or non-finite values are not allowed")
        bad = np.flatnonzero(self.time <= 0)
        if bad.size:
            raise NonPositiveTime(int(bad[0]) + 1)
        if not np.all((self.status == 0) | (self.status == 1)):
            raise DataError("status must be 0 or 1")
        if not np.any(self.status == 1):
            raise NoEvents()
        for q, kind in enumerate(self.kinds):
            if kind not in KINDS:
                raise DataError(f"unknown column kind {kind!r}")
            if kind == BINARY and np.unique(self.covariates[:, q]).size != 2:
                raise DataError(
                    f"column {self.names[q]!r} flagged binary but does not take "
                    "exactly two distinct values"
                )

    def with_covariates(self, z: np.ndarray, **changes) -> "SurvivalDataset":
        return replace(self, covariates=z, **changes)

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            time=self.time[idx],
            status=self.status[idx],
            covariates=self.covariates[idx],
        )

    def equals(self, other: "SurvivalDataset") -> bool:
        return (
            self.names == other.names
            and self.kinds == other.kinds
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.status, other.status)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.center, other.center)
            and np.array_equal(self.scale, other.scale)
        )


def detect_kind(values: np.ndarray) -> str:
    return BINARY if np.unique(values).size == 2 else CONTINUOUS


def read_table(path) -> Table:
    """Read a CSV file into a column -> raw-string mapping (missing as None)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty CSV file") from None
        cols: Table = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}"
                )
            for h, cell in zip(header, row):
                cell = cell.strip()
                cols[h].append(None if cell in MISSING_TOKENS else cell)
    return cols


def write_table(table: Table, path):
    names = list(table)
    nrow = len(table[names[0]]) if names else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in range(nrow):
            w.writerow(["NA" if table[h][r] is None else table[h][r] for h in names])


def _parse_column(table: Table, name: str) -> np.ndarray:
    if name not in table:
        raise MissingColumn(name)
    out = np.empty(len(table[name]))
    for r, cell in enumerate(table[name], start=1):
        if cell is None:
            out[r - 1] = np.nan
            continue
        try:
            out[r - 1] = float(cell)
        except ValueError:
            raise UnparseableValue(r, name) from None
    return out


def _fmt(x: float) -> str:
    if math.isnan(x):
        return None
    return repr(float(x))


def ingest_table(table: Table, spec: ModelSpec, kinds: dict | None = None,
                 standardize: bool = False) -> SurvivalDataset:
    """Build a dataset from a parsed table according to ``spec``.

    Rows with a missing value in any referenced column are dropped.  Row
    numbers in errors are 1-based data rows of the original table.
    """
    raw = {c: _parse_column(table, c) for c in spec.columns}
    nrow = len(next(iter(raw.values())))
    keep = np.ones(nrow, dtype=bool)
    for arr in raw.values():
        keep &= ~np.isnan(arr)
    rows = np.flatnonzero(keep)
    dropped = nrow - rows.size
    log.info("ingested %d complete cases (%d of %d rows dropped for missing values)",
             rows.size, dropped, nrow)

    time = raw[spec.time_col][rows]
    bad = np.flatnonzero(time <= 0)
    if bad.size:
        raise NonPositiveTime(int(rows[bad[0]]) + 1)
    status = raw[spec.status_col][rows]
    badst = np.flatnonzero((status != 0) & (status != 1))
    if badst.size:
        raise DataError(f"status must be 0 or 1 (row {int(rows[badst[0]]) + 1})")
    if not np.any(status == 1):
        raise NoEvents()

    columns = []
    for term in spec.terms:
        v = raw[term.source][rows]
        if term.transform == "log":
            badv = np.flatnonzero(v <= 0)
            if badv.size:
                raise DataError(
                    f"log({term.source}) undefined in row {int(rows[badv[0]]) + 1}"
                )
            v = np.log(v)
        columns.append(v)
    z = np.column_stack(columns)
    names = tuple(spec.labels)
    kinds = kinds or {}
    resolved = []
    for q, name in enumerate(names):
        kind = kinds.get(name) or kinds.get(spec.terms[q].source)
        resolved.append(kind or detect_kind(z[:, q]))
    d = SurvivalDataset(time, status, z, names, tuple(resolved))
    return standardize_covariates(d) if standardize else d


def ingest_csv(path, spec: ModelSpec, kinds: dict | None = None,
               standardize: bool = False) -> SurvivalDataset:
    return ingest_table(read_table(path), spec, kinds=kinds, standardize=standardize)


def standardize_covariates(d: SurvivalDataset) -> SurvivalDataset:
    """Center and scale continuous columns to mean 0, sample SD 1.

    Binary columns are left untouched.  The recorded ``center``/``scale``
    compose with any earlier scaling so the raw values stay recoverable.
    """
    z = d.covariates.copy()
    center = d.center.copy()
    scale = d.scale.copy()
    for q, kind in enumerate(d.kinds):
        if kind != CONTINUOUS:
            continue
        col = z[:, q]
        mu = col.mean()
        sd = col.std(ddof=1)
        if not sd > 1e-12 * max(1.0, abs(mu)):
            raise ZeroVariance(d.names[q])
        z[:, q] = (col - mu) / sd
        center[q] = center[q] + scale[q] * mu
        scale[q] = scale[q] * sd
    return d.with_covariates(z, center=center, scale=scale)


def dataset_to_table(d: SurvivalDataset) -> tuple[Table, ModelSpec]:
    """Serialize a dataset to a table plus the spec that re-ingests it."""
    names = [_column_name(n) for n in d.names]
    table: Table = {"time": [_fmt(x) for x in d.time],
                    "status": [_fmt(x) for x in d.status]}
    for q, name in enumerate(names):
        table[name] = [_fmt(x) for x in d.covariates[:, q]]
    spec = ModelSpec("time", "status", tuple(Term(n) for n in names))
    return table, spec


def _column_name(label: str) -> str:
    if label.startswith("log(") and label.endswith(")"):
        return f"log_{label[4:-1]}"
    return label


def recode_pbc(raw: Table) -> Table:
    """Recode the Mayo PBC table.

    ``trt`` 1/2 becomes 0/1, ``status`` becomes 1 for death (2) and 0
    otherwise (censored or transplant), and ``log_bili = log(bili)`` is added.
    """
    for col in ("trt", "status", "bili"):
        if col not in raw:
            raise MissingColumn(col)
    out = dict(raw)
    trt = _parse_column(raw, "trt")
    status = _parse_column(raw, "status")
    bili = _parse_column(raw, "bili")
    out["trt"] = [_fmt(v - 1.0) for v in trt]
    out["status"] = [None if np.isnan(s) else _fmt(1.0 if s == 2 else 0.0)
                     for s in status]
    with np.errstate(divide="ignore", invalid="ignore"):
        out["log_bili"] = [_fmt(v) for v in np.where(bili > 0, np.log(bili), np.nan)]
    return out


def pbc_path() -> Path:
    return Path(str(resources.files("afttest") / "data" / "pbc.csv"))


def load_pbc() -> Table:
    """The bundled Mayo Clinic PBC table (418 rows), recoded."""
    return recode_pbc(read_table(pbc_path()))
