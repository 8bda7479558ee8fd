"""Binary datasets, cell tabulation and the default hyperparameters.

Confounder vectors are packed little-endian into integer codes: bit ``j`` of
the code is ``c_j``. Only observed codes are ever stored; the set of absent
codes (``M0``) is implied by ``2**p`` minus the observed ones.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

MAX_P = 30


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


def pack_codes(c: np.ndarray) -> np.ndarray:
    """Pack an (n, p) bit matrix into little-endian integer codes."""
    c = np.asarray(c)
    if c.ndim != 2:
        raise ValueError("confounder matrix must be 2-d")
    weights = np.left_shift(np.int64(1), np.arange(c.shape[1], dtype=np.int64))
    return (c.astype(np.int64) * weights).sum(axis=1)


def unpack_codes(codes: np.ndarray, p: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return ((codes[:, None] >> np.arange(p, dtype=np.int64)) & 1).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class BinaryDataset:
    """n rows of (y, x, c) with y, x bits and c a length-p bit vector."""

    y: np.ndarray
    x: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.uint8).reshape(-1)
        x = np.ascontiguousarray(self.x, dtype=np.uint8).reshape(-1)
        c = np.ascontiguousarray(self.c, dtype=np.uint8)
        if c.ndim != 2:
            raise SchemaError("confounders must form an (n, p) matrix")
        if not (len(y) == len(x) == c.shape[0]):
            raise SchemaError("y, x and c must have the same number of rows")
        if c.shape[1] < 1 or c.shape[1] > MAX_P:
            raise SchemaError(f"confounder count must be in [1, {MAX_P}], got {c.shape[1]}")
        for name, arr in (("y", y), ("x", x), ("c", c)):
            if arr.size and arr.max() > 1:
                raise ParseError(f"column group {name!r} contains values other than 0/1")
        for name, arr in (("y", y), ("x", x), ("c", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.c.shape[1]

    @property
    def codes(self) -> np.ndarray:
        return pack_codes(self.c)

    def rows(self) -> Iterable[tuple[int, int, list[int]]]:
        for i in range(self.n):
            yield int(self.y[i]), int(self.x[i]), self.c[i].tolist()

    def __eq__(self, other):
        if not isinstance(other, BinaryDataset):
            return NotImplemented
        return (
            np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.c, other.c)
        )

    __hash__ = None

    def __repr__(self):
        return f"BinaryDataset(n={self.n}, p={self.p})"


def ingest_csv(
    source: IO[bytes] | IO[str] | bytes | str,
    outcome_col: str,
    treatment_col: str,
    confounder_cols: Sequence[str] | None = None,
) -> BinaryDataset:
    """Read a header-first CSV of 0/1 fields into a :class:`BinaryDataset`.

    ``source`` may be a binary or text stream, raw bytes, or a string holding
    the CSV body. When ``confounder_cols`` is None every column other than the
    outcome and treatment is used, in file order.
    """
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyDatasetError("CSV has no header row") from None
    if confounder_cols is None:
        confounder_cols = [h for h in header if h not in (outcome_col, treatment_col)]
    wanted = [outcome_col, treatment_col, *confounder_cols]
    missing = [col for col in wanted if col not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    if not confounder_cols:
        raise SchemaError("at least one confounder column is required")
    if len(confounder_cols) > MAX_P:
        raise SchemaError(f"at most {MAX_P} confounders are supported")
    idx = [header.index(col) for col in wanted]

    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        vals = []
        for j, col in zip(idx, wanted):
            tok = row[j].strip()
            if tok == "0":
                vals.append(0)
            elif tok == "1":
                vals.append(1)
            else:
                raise ParseError(f"row {lineno}, column {col!r}: expected 0 or 1, got {tok!r}")
        out.append(vals)
    if not out:
        raise EmptyDatasetError("CSV has a header but no data rows")
    arr = np.asarray(out, dtype=np.uint8)
    return BinaryDataset(y=arr[:, 0], x=arr[:, 1], c=arr[:, 2:])


def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def to_csv(d: BinaryDataset, sink: IO[str] | None = None, names: Sequence[str] | None = None) -> str:
    """Write ``d`` as CSV (``y,x,c1..cp`` by default); returns the text."""
    if names is None:
        names = ["y", "x", *(f"c{j + 1}" for j in range(d.p))]
    lines = [",".join(names)]
    block = np.column_stack([d.y, d.x, d.c]).astype(np.uint8)
    lines.extend(",".join("1" if v else "0" for v in row) for row in block)
    text = "\n".join(lines) + "\n"
    if sink is not None:
        sink.write(text)
    return text


@dataclass(frozen=True)
class DichotomizeSpec:
    """Per-column rules: ``"binary"`` (pass through) or ``"median"`` (split)."""

    rules: Mapping[str, str] = field(default_factory=dict)

    def rule(self, column: str) -> str:
        return self.rules.get(column, "median")


def median_split(values: np.ndarray) -> np.ndarray:
    """1 where value > median, else 0 (ties with the median go to 0)."""
    values = np.asarray(values, dtype=float)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise DataError("median split needs at least one finite value")
    med = np.median(finite)
    out = (values > med).astype(np.uint8)
    if not out.any():
        warnings.warn("degenerate column: no value exceeds the median", RuntimeWarning, stacklevel=2)
    return out


def dichotomize(
    table: Mapping[str, Sequence[float]],
    spec: DichotomizeSpec,
    outcome_col: str,
    treatment_col: str,
    confounder_cols: Sequence[str] | None = None,
) -> BinaryDataset:
    """Turn a column table of reals into a :class:`BinaryDataset`."""
    if confounder_cols is None:
        confounder_cols = [k for k in table if k not in (outcome_col, treatment_col)]
    cols = {}
    for name in (outcome_col, treatment_col, *confounder_cols):
        if name not in table:
            raise SchemaError(f"missing column {name!r}")
        vals = np.asarray(table[name], dtype=float)
        if spec.rule(name) == "binary":
            if not np.isin(vals, (0.0, 1.0)).all():
                raise ParseError(f"column {name!r} is flagged binary but holds other values")
            cols[name] = vals.astype(np.uint8)
        elif spec.rule(name) == "median":
            cols[name] = median_split(vals)
        else:
            raise ValueError(f"unknown rule {spec.rule(name)!r} for column {name!r}")
    c = np.column_stack([cols[k] for k in confounder_cols])
    return BinaryDataset(y=cols[outcome_col], x=cols[treatment_col], c=c)


def read_real_table(source) -> dict[str, np.ndarray]:
    """Read a header-first CSV of real numbers into a column mapping."""
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    rows = [r for r in reader if r and any(f.strip() for f in r)]
    if not rows:
        raise EmptyDatasetError("CSV has a header but no data rows")
    arr = np.asarray([[float(v) for v in r] for r in rows], dtype=float)
    return {h: arr[:, j] for j, h in enumerate(header)}


@dataclass(frozen=True, eq=False)
class CellTable:
    """Sufficient statistics of a dataset, stored over observed codes only.

    ``codes`` is the sorted array of confounder codes seen in either arm
    (``M1``). The per-code arrays align with it: ``y1, n1`` are successes and
    totals in the treated cell ``(1, c)``, ``y0, n0`` in the control cell.
    """

    n: int
    p: int
    codes: np.ndarray
    y1: np.ndarray
    n1: np.ndarray
    y0: np.ndarray
    n0: np.ndarray

    @property
    def n_codes(self) -> int:
        return 1 << self.p

    @property
    def a(self) -> np.ndarray:
        """Treated-row count per observed code (``a_c``)."""
        return self.n1

    @property
    def m1(self) -> frozenset[int]:
        return frozenset(self.codes.tolist())

    @property
    def m1_size(self) -> int:
        return len(self.codes)

    @property
    def m0_size(self) -> int:
        return self.n_codes - len(self.codes)

    @property
    def n_treated(self) -> int:
        return int(self.n1.sum())

    @property
    def counts(self) -> dict[tuple[int, int], tuple[int, int]]:
        """Map ``(x, c) -> (successes, total)`` over cells with data."""
        out = {}
        for code, y1, n1, y0, n0 in zip(self.codes.tolist(), self.y1.tolist(), self.n1.tolist(),
                                        self.y0.tolist(), self.n0.tolist()):
            if n1:
                out[(1, code)] = (y1, n1)
            if n0:
                out[(0, code)] = (y0, n0)
        return out

    def contains(self, codes: np.ndarray) -> np.ndarray:
        """Boolean mask: which of ``codes`` are in ``M1``."""
        codes = np.asarray(codes, dtype=np.int64)
        if len(self.codes) == 0:
            return np.zeros(codes.shape, dtype=bool)
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == codes

    def missing_codes(self) -> np.ndarray:
        """Enumerate ``M0`` in ascending order. O(2**p) memory."""
        mask = np.ones(self.n_codes, dtype=bool)
        mask[self.codes] = False
        return np.flatnonzero(mask).astype(np.int64)

    def __eq__(self, other):
        if not isinstance(other, CellTable):
            return NotImplemented
        return (self.n, self.p) == (other.n, other.p) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("codes", "y1", "n1", "y0", "n0")
        )

    __hash__ = None


def tabulate(d: BinaryDataset) -> CellTable:
    if d.n == 0:
        raise EmptyDatasetError("cannot tabulate an empty dataset")
    codes, inv = np.unique(d.codes, return_inverse=True)
    k = len(codes)
    x = d.x.astype(bool)
    y = d.y.astype(np.int64)
    n1 = np.bincount(inv[x], minlength=k)
    n0 = np.bincount(inv[~x], minlength=k)
    y1 = np.bincount(inv[x], weights=y[x], minlength=k).astype(np.int64)
    y0 = np.bincount(inv[~x], weights=y[~x], minlength=k).astype(np.int64)
    arrays = dict(codes=codes.astype(np.int64), y1=y1, n1=n1.astype(np.int64),
                  y0=y0, n0=n0.astype(np.int64))
    for arr in arrays.values():
        arr.setflags(write=False)
    return CellTable(n=d.n, p=d.p, **arrays)


def default_hyperparams(n: int, p: int) -> tuple[float, float]:
    """phi = epsilon = n / 2**p."""
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    value = math.ldexp(float(n), -p)
    if value == 0.0:
        raise ValueError(f"n / 2**p underflows for n={n}, p={p}")
    return value, value


def default_b(t: CellTable) -> float:
    """Share of confounder codes absent from the data, clipped to [0.1, 0.9]."""
    raw = t.m0_size / t.n_codes
    return min(max(raw, 0.1), 0.9)


@dataclass(frozen=True)
class Hyperparams:
    phi: float
    epsilon: float
    b: float

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"phi must be > 0, got {self.phi}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")

    @classmethod
    def defaults(cls, t: CellTable) -> "Hyperparams":
        phi, eps = default_hyperparams(t.n, t.p)
        return cls(phi=phi, epsilon=eps, b=default_b(t))
