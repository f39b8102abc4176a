"""Two-period, two-group panel data: containers, CSV I/O and design matrices."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateDesign, MalformedFile, NonPositiveLog, SchemaViolation

logger = logging.getLogger(__name__)

OUTCOME_FAMILIES = ("count", "continuous")
MAX_POWER_ORDER = 5


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PanelUnit:
    id: str
    y_before: float
    y_after: float
    treated: int
    covariates: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Column-oriented panel sample ``{(Y_t, Y_t+1, G, X)_i}``.

    Arrays are made read-only on construction. Use :meth:`from_units` to
    build from row records and :meth:`take` to resample rows.
    """

    ids: np.ndarray
    y_before: np.ndarray
    y_after: np.ndarray
    treated: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    outcome_family: str = "count"
    n_dropped: int = 0

    def __post_init__(self):
        n = len(self.y_before)
        y0 = np.asarray(self.y_before, dtype=float)
        y1 = np.asarray(self.y_after, dtype=float)
        g = np.asarray(self.treated)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1 and n == 0:
            x = x.reshape(0, len(self.covariate_names))
        if x.ndim == 1:
            x = x.reshape(n, -1) if len(self.covariate_names) else x.reshape(n, 0)
        names = tuple(self.covariate_names)
        if self.outcome_family not in OUTCOME_FAMILIES:
            raise SchemaViolation(f"unknown outcome family {self.outcome_family!r}")
        if len(set(names)) != len(names):
            raise SchemaViolation("duplicate covariate names")
        if not (len(y1) == len(g) == x.shape[0] == len(self.ids) == n):
            raise SchemaViolation("column lengths differ")
        if x.shape[1] != len(names):
            raise SchemaViolation(
                f"{x.shape[1]} covariate columns but {len(names)} names")
        if not np.all(np.isin(g, (0, 1))):
            raise SchemaViolation("treatment indicator must be 0 or 1")
        if not (np.all(np.isfinite(y0)) and np.all(np.isfinite(y1)) and np.all(np.isfinite(x))):
            raise SchemaViolation("non-finite values in data")
        if self.outcome_family == "count" and (np.any(y0 < 0) or np.any(y1 < 0)):
            raise SchemaViolation("count outcomes must be non-negative")
        g = g.astype(np.int8)
        n1 = int(g.sum())
        if n1 == 0 or n1 == n:
            raise DegenerateDesign(
                f"need both groups non-empty (N1={n1}, N0={n - n1})")
        object.__setattr__(self, "ids", _frozen(np.asarray(self.ids, dtype=object)))
        object.__setattr__(self, "y_before", _frozen(y0.copy()))
        object.__setattr__(self, "y_after", _frozen(y1.copy()))
        object.__setattr__(self, "treated", _frozen(g))
        object.__setattr__(self, "covariates", _frozen(x.copy()))
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_units(cls, units: Sequence[PanelUnit], covariate_names: Sequence[str],
                   outcome_family: str = "count") -> "PanelDataset":
        p = len(covariate_names)
        for u in units:
            if len(u.covariates) != p:
                raise SchemaViolation(f"unit {u.id}: expected {p} covariates")
        cov = np.array([u.covariates for u in units], dtype=float).reshape(len(units), p)
        return cls(
            ids=np.array([u.id for u in units], dtype=object),
            y_before=np.array([u.y_before for u in units], dtype=float),
            y_after=np.array([u.y_after for u in units], dtype=float),
            treated=np.array([u.treated for u in units]),
            covariates=cov,
            covariate_names=tuple(covariate_names),
            outcome_family=outcome_family,
        )

    @property
    def n(self) -> int:
        return len(self.y_before)

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def treated_share(self) -> float:
        return self.n_treated / self.n

    @property
    def units(self) -> list[PanelUnit]:
        return [
            PanelUnit(str(i), float(a), float(b), int(g), tuple(float(v) for v in x))
            for i, a, b, g, x in zip(self.ids, self.y_before, self.y_after,
                                     self.treated, self.covariates)
        ]

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise SchemaViolation(f"no covariate named {name!r}") from None
        return self.covariates[:, j]

    def take(self, indices: np.ndarray) -> "PanelDataset":
        """Row subset / resample. Raises DegenerateDesign if a group empties."""
        idx = np.asarray(indices)
        return PanelDataset(
            ids=self.ids[idx], y_before=self.y_before[idx], y_after=self.y_after[idx],
            treated=self.treated[idx], covariates=self.covariates[idx],
            covariate_names=self.covariate_names, outcome_family=self.outcome_family,
        )

    def with_outcomes(self, y_before: np.ndarray, y_after: np.ndarray) -> "PanelDataset":
        return PanelDataset(
            ids=self.ids, y_before=y_before, y_after=y_after, treated=self.treated,
            covariates=self.covariates, covariate_names=self.covariate_names,
            outcome_family=self.outcome_family,
        )


@dataclass(frozen=True)
class CsvSchema:
    """Maps CSV columns to panel roles."""

    treatment: str
    before: str
    after: str
    covariates: tuple[str, ...] = ()
    id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


def _parse_float(text: str, col: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise SchemaViolation(f"line {lineno}: column {col!r}: not a number: {text!r}") from None


def load_csv(path: str | Path, schema: CsvSchema, outcome_family: str = "count",
             strict: bool = True) -> PanelDataset:
    """Read a header-row CSV into a validated :class:`PanelDataset`.

    In strict mode a row with a missing value in any mapped column raises
    :class:`SchemaViolation`; otherwise such rows are dropped and counted in
    ``n_dropped``.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if not rows:
        raise MalformedFile(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    mapped = [schema.treatment, schema.before, schema.after, *schema.covariates]
    if schema.id is not None:
        mapped.append(schema.id)
    missing = [c for c in mapped if c not in header]
    if missing:
        raise SchemaViolation(f"missing columns: {', '.join(missing)}")
    pos = {name: header.index(name) for name in mapped}

    ids, y0, y1, g, x = [], [], [], [], []
    dropped = 0
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedFile(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        cells = {name: row[j].strip() for name, j in pos.items()}
        if any(v == "" or v.upper() in ("NA", "NAN") for v in cells.values()):
            if strict:
                raise SchemaViolation(f"line {lineno}: missing value in a mapped column")
            dropped += 1
            continue
        gv = _parse_float(cells[schema.treatment], schema.treatment, lineno)
        if gv not in (0.0, 1.0):
            raise SchemaViolation(
                f"line {lineno}: treatment {schema.treatment!r} must be 0/1, got {cells[schema.treatment]!r}")
        ids.append(cells[schema.id] if schema.id else str(lineno - 1))
        y0.append(_parse_float(cells[schema.before], schema.before, lineno))
        y1.append(_parse_float(cells[schema.after], schema.after, lineno))
        g.append(int(gv))
        x.append([_parse_float(cells[c], c, lineno) for c in schema.covariates])
    if dropped:
        logger.warning("dropped %d rows with missing values", dropped)
    if not g:
        raise DegenerateDesign("no data rows")
    data = PanelDataset(
        ids=np.array(ids, dtype=object), y_before=np.array(y0), y_after=np.array(y1),
        treated=np.array(g), covariates=np.array(x, dtype=float).reshape(len(g), len(schema.covariates)),
        covariate_names=schema.covariates, outcome_family=outcome_family, n_dropped=dropped,
    )
    return data


def write_csv(data: PanelDataset, path: str | Path, schema: CsvSchema | None = None) -> CsvSchema:
    """Write ``data`` as CSV; returns the schema that reads it back."""
    if schema is None:
        schema = CsvSchema("treated", "y_before", "y_after", data.covariate_names, id="id")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([schema.id or "id", schema.treatment, schema.before, schema.after, *schema.covariates])
        for i in range(data.n):
            w.writerow([data.ids[i], int(data.treated[i]), repr(float(data.y_before[i])),
                        repr(float(data.y_after[i])), *(repr(float(v)) for v in data.covariates[i])])
    return schema


@dataclass(frozen=True)
class FeatureSpec:
    """How covariates become model columns.

    ``base_columns`` enter linearly, ``log_transform`` columns enter as
    ``ln(x)``, and each ``power_orders`` column contributes ``x, x^2, ..., x^l``.
    With ``standardize`` the power-series columns are centred and scaled by
    their sample mean and SD before expansion.
    """

    base_columns: tuple[str, ...] = ()
    power_orders: tuple[tuple[str, int], ...] = ()
    log_transform: tuple[str, ...] = ()
    include_intercept: bool = True
    standardize: bool = False

    def __post_init__(self):
        po = self.power_orders
        if isinstance(po, Mapping):
            po = tuple(po.items())
        po = tuple((str(c), int(l)) for c, l in po)
        object.__setattr__(self, "power_orders", po)
        object.__setattr__(self, "base_columns", tuple(self.base_columns))
        object.__setattr__(self, "log_transform", tuple(self.log_transform))
        for c, l in po:
            if not 1 <= l <= MAX_POWER_ORDER:
                raise ValueError(f"power order for {c!r} must be in [1, {MAX_POWER_ORDER}], got {l}")
        names = list(self.base_columns) + list(self.log_transform) + [c for c, _ in po]
        if len(set(names)) != len(names):
            raise ValueError("a column may appear in only one of base/log/power")

    @property
    def columns_used(self) -> tuple[str, ...]:
        return self.base_columns + self.log_transform + tuple(c for c, _ in self.power_orders)

    def with_power_order(self, order: int) -> "FeatureSpec":
        return FeatureSpec(self.base_columns, tuple((c, order) for c, _ in self.power_orders),
                           self.log_transform, self.include_intercept, self.standardize)

    def to_dict(self) -> dict:
        return {
            "base_columns": list(self.base_columns),
            "power_orders": dict(self.power_orders),
            "log_transform": list(self.log_transform),
            "include_intercept": self.include_intercept,
            "standardize": self.standardize,
        }


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    columns: tuple[str, ...]
    spec: FeatureSpec | None = field(default=None)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def rows(self, mask: np.ndarray) -> np.ndarray:
        return self.values[mask]


def expand_features(data: PanelDataset, spec: FeatureSpec) -> DesignMatrix:
    """Build the N x q design for ``spec`` in a fixed column order.

    Order: intercept, base columns, log columns, then each power-series
    column in declaration order with ascending powers.
    """
    cols: list[np.ndarray] = []
    names: list[str] = []
    if spec.include_intercept:
        cols.append(np.ones(data.n))
        names.append("(intercept)")
    for c in spec.base_columns:
        cols.append(data.column(c))
        names.append(c)
    for c in spec.log_transform:
        v = data.column(c)
        if np.any(v <= 0):
            raise NonPositiveLog(f"column {c!r} has non-positive values; cannot take log")
        cols.append(np.log(v))
        names.append(f"log({c})")
    for c, order in spec.power_orders:
        v = data.column(c)
        if spec.standardize:
            sd = v.std(ddof=1) if len(v) > 1 else 0.0
            v = (v - v.mean()) / (sd if sd > 0 else 1.0)
        p = np.ones_like(v)
        for k in range(1, order + 1):
            p = p * v
            cols.append(p)
            names.append(c if k == 1 else f"{c}^{k}")
    values = np.column_stack(cols) if cols else np.empty((data.n, 0))
    return DesignMatrix(_frozen(np.ascontiguousarray(values, dtype=float)), tuple(names), spec)


def infer_power_columns(data: PanelDataset, columns: Iterable[str]) -> tuple[str, ...]:
    """Columns with more than two distinct values (treated as continuous)."""
    return tuple(c for c in columns if len(np.unique(data.column(c))) > 2)

