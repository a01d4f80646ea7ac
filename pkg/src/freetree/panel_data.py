"""Panel data container, role declarations, CSV I/O, and subject-level splits.

A panel dataset is a long-format table: one row per (cluster, occasion), one
column per variable. Variables are assigned roles once, up front:

* ``var_select``    high-dimensional block that screening may select from
* ``fixed_regress`` columns always available as within-leaf regressors
* ``fixed_split``   columns always available as split candidates
* cluster id, response, and an optional time column

Role lists plus the cluster/time/response columns must be pairwise disjoint.
Datasets are treated as immutable after construction; every operation here
returns a new object. ``fixed_split`` columns may be categorical: any column
that does not parse as numeric gets a level set enumerated in first-appearance
order, which downstream split search relies on for determinism.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ParseError, RowError, SchemaError


@dataclass(frozen=True)
class FeatureRoles:
    """Immutable assignment of dataset columns to modeling roles."""

    var_select: tuple[str, ...]
    fixed_regress: tuple[str, ...]
    fixed_split: tuple[str, ...]
    cluster_col: str
    response_col: str
    time_col: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "var_select", tuple(self.var_select))
        object.__setattr__(self, "fixed_regress", tuple(self.fixed_regress))
        object.__setattr__(self, "fixed_split", tuple(self.fixed_split))
        if not self.cluster_col:
            raise SchemaError("cluster_col must be a non-empty column name")
        if not self.response_col:
            raise SchemaError("response_col must be a non-empty column name")
        groups = [
            list(self.var_select),
            list(self.fixed_regress),
            list(self.fixed_split),
            [self.cluster_col, self.response_col],
            [] if self.time_col is None else [self.time_col],
        ]
        flat = [c for g in groups for c in g]
        if len(set(flat)) != len(flat):
            dupes = sorted({c for c in flat if flat.count(c) > 1})
            raise SchemaError(f"roles overlap on columns: {', '.join(dupes)}")

    @property
    def numeric_cols(self) -> tuple[str, ...]:
        cols = list(self.var_select) + list(self.fixed_regress)
        if self.time_col is not None:
            cols.append(self.time_col)
        return tuple(cols)

    @property
    def all_cols(self) -> tuple[str, ...]:
        cols = [self.cluster_col, self.response_col]
        if self.time_col is not None:
            cols.append(self.time_col)
        cols += list(self.var_select) + list(self.fixed_regress) + list(self.fixed_split)
        return tuple(cols)


@dataclass(frozen=True)
class ColumnStats:
    """Per-column means and standard deviations from a standardize() call."""

    mean: dict[str, float]
    sd: dict[str, float]

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(self.mean)


@dataclass
class PanelDataset:
    """Long-format panel table plus its role assignment.

    Construct through :func:`load_csv` or :meth:`from_frame`; both validate
    the schema, coerce dtypes, and freeze categorical level sets.
    """

    frame: pd.DataFrame
    roles: FeatureRoles
    categorical_levels: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, roles: FeatureRoles) -> "PanelDataset":
        """Validate and adopt an in-memory frame (used by the generator)."""
        frame = frame.reset_index(drop=True)
        for col in roles.all_cols:
            if col not in frame.columns:
                raise SchemaError(f"missing required column: {col}")
        out = {}
        for col in frame.columns:
            series = frame[col]
            if col == roles.cluster_col:
                vals = series.astype(str).to_numpy(dtype=object)
                _check_no_empty(vals, col, RowError)
                out[col] = vals
            elif col == roles.response_col:
                out[col] = _coerce_numeric(series, col, required=True)
            elif col in roles.numeric_cols:
                out[col] = _coerce_numeric(series, col, required=False)
            elif col in roles.fixed_split:
                out[col] = _coerce_split_column(series, col)
            else:
                out[col] = series.to_numpy()
        ds = cls(pd.DataFrame(out, columns=list(frame.columns)), roles)
        ds._finalize()
        return ds

    def _finalize(self):
        levels = {}
        for col in self.roles.fixed_split:
            series = self.frame[col]
            if not pd.api.types.is_float_dtype(series):
                seen: dict[str, None] = {}
                for v in series:
                    seen.setdefault(str(v))
                levels[col] = list(seen)
        self.categorical_levels = levels

    # -- accessors ---------------------------------------------------------

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def clusters(self) -> list[str]:
        """Distinct cluster ids in first-appearance order."""
        seen: dict[str, None] = {}
        for v in self.frame[self.roles.cluster_col]:
            seen.setdefault(v)
        return list(seen)

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise SchemaError(f"missing required column: {name}")
        return self.frame[name].to_numpy()

    def matrix(self, cols: list[str] | tuple[str, ...]) -> np.ndarray:
        """Stack numeric columns into an (n_rows, len(cols)) float array."""
        if not cols:
            return np.empty((self.n_rows, 0))
        arrays = []
        for c in cols:
            a = self.column(c)
            if not np.issubdtype(a.dtype, np.floating):
                raise SchemaError(f"column {c} is not numeric")
            arrays.append(a)
        return np.column_stack(arrays)

    def is_categorical(self, col: str) -> bool:
        return col in self.categorical_levels

    def subset_rows(self, mask: np.ndarray) -> "PanelDataset":
        sub = PanelDataset(self.frame.loc[mask].reset_index(drop=True), self.roles)
        # Keep the parent's level enumeration: a subset must not renumber
        # levels that happen to be absent from it.
        sub.categorical_levels = {k: list(v) for k, v in self.categorical_levels.items()}
        return sub

    def subset_clusters(self, ids: list[str]) -> "PanelDataset":
        wanted = set(ids)
        mask = np.fromiter(
            (v in wanted for v in self.frame[self.roles.cluster_col]),
            dtype=bool,
            count=self.n_rows,
        )
        return self.subset_rows(mask)


@dataclass(frozen=True)
class SubjectSplit:
    """Disjoint cluster-level partition of a dataset."""

    parts: tuple[PanelDataset, ...]
    cluster_ids: tuple[tuple[str, ...], ...]


# ---------------------------------------------------------------------------
# coercion helpers
# ---------------------------------------------------------------------------


def _check_no_empty(values, col, err):
    for i, v in enumerate(values):
        if v is None or str(v).strip() == "" or str(v) == "nan":
            raise err(f"empty value in column {col}", row=i + 1)


def _coerce_numeric(series: pd.Series, col: str, required: bool) -> np.ndarray:
    try:
        arr = pd.to_numeric(series, errors="raise").to_numpy(dtype=np.float64)
    except (ValueError, TypeError):
        row, bad = _first_non_numeric(series)
        if required and (bad is None or str(bad).strip() == ""):
            raise RowError(f"missing value in column {col}", row=row) from None
        raise ParseError(f"non-numeric value {bad!r} in column {col}", row=row) from None
    if not np.all(np.isfinite(arr)):
        row = int(np.flatnonzero(~np.isfinite(arr))[0]) + 1
        if required and math.isnan(arr[row - 1]):
            raise RowError(f"missing value in column {col}", row=row)
        raise ParseError(f"non-finite value in column {col}", row=row)
    return arr


def _first_non_numeric(series: pd.Series) -> tuple[int, object]:
    for i, v in enumerate(series):
        try:
            x = float(v)
        except (ValueError, TypeError):
            return i + 1, v
        if not math.isfinite(x):
            return i + 1, v
    return len(series), None


def _coerce_split_column(series: pd.Series, col: str) -> np.ndarray:
    """Numeric if every cell parses as a finite float, else categorical."""
    try:
        arr = pd.to_numeric(series, errors="raise").to_numpy(dtype=np.float64)
        if np.all(np.isfinite(arr)):
            return arr
    except (ValueError, TypeError):
        pass
    vals = series.astype(str).to_numpy(dtype=object)
    _check_no_empty(vals, col, ParseError)
    return vals


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def load_csv(path: str, roles: FeatureRoles) -> PanelDataset:
    """Read a long-format CSV into a validated :class:`PanelDataset`.

    Row numbers in error messages are 1-based over data rows (the header
    line is not counted).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            dupes = sorted({c for c in header if header.count(c) > 1})
            raise SchemaError(f"duplicate columns in header: {', '.join(dupes)}")
        for col in roles.all_cols:
            if col not in header:
                raise SchemaError(f"missing required column: {col}")
        columns: list[list[str]] = [[] for _ in header]
        for i, row in enumerate(reader):
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", row=i + 1
                )
            for c, cell in zip(columns, row):
                c.append(cell)
    frame = pd.DataFrame({h: pd.Series(c, dtype=object) for h, c in zip(header, columns)})
    return PanelDataset.from_frame(frame, roles)


def write_csv(ds: PanelDataset, path: str):
    """Write a dataset back to CSV, round-trip exact for all role columns.

    Floats are rendered with ``repr``, which is the shortest string that
    parses back to the identical double.
    """
    cols = list(ds.frame.columns)
    arrays = [ds.frame[c].to_numpy() for c in cols]
    is_float = [np.issubdtype(a.dtype, np.floating) for a in arrays]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for i in range(ds.n_rows):
            writer.writerow(
                [
                    repr(float(a[i])) if f else str(a[i])
                    for a, f in zip(arrays, is_float)
                ]
            )


# ---------------------------------------------------------------------------
# roles config files
# ---------------------------------------------------------------------------

_ROLE_KEYS = ("var_select", "fixed_regress", "fixed_split", "cluster", "response", "time")


def parse_roles_text(text: str) -> FeatureRoles:
    """Parse a roles config: ``key = comma,separated,names`` lines.

    Recognized keys: var_select, fixed_regress, fixed_split, cluster,
    response, time. Blank lines and ``#`` comments are ignored. cluster and
    response are required and must name a single column each.
    """
    values: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"roles line {lineno}: expected 'key = names'")
        key, _, rhs = line.partition("=")
        key = key.strip()
        if key not in _ROLE_KEYS:
            raise SchemaError(f"roles line {lineno}: unknown key {key!r}")
        if key in values:
            raise SchemaError(f"roles line {lineno}: duplicate key {key!r}")
        values[key] = [tok.strip() for tok in rhs.split(",") if tok.strip()]
    for key in ("cluster", "response"):
        if len(values.get(key, [])) != 1:
            raise SchemaError(f"roles config must set exactly one {key} column")
    time = values.get("time", [])
    if len(time) > 1:
        raise SchemaError("roles config must set at most one time column")
    return FeatureRoles(
        var_select=tuple(values.get("var_select", [])),
        fixed_regress=tuple(values.get("fixed_regress", [])),
        fixed_split=tuple(values.get("fixed_split", [])),
        cluster_col=values["cluster"][0],
        response_col=values["response"][0],
        time_col=time[0] if time else None,
    )


def parse_roles_file(path: str) -> FeatureRoles:
    with open(path) as fh:
        return parse_roles_text(fh.read())


def format_roles(roles: FeatureRoles) -> str:
    lines = [
        f"cluster = {roles.cluster_col}",
        f"response = {roles.response_col}",
    ]
    if roles.time_col is not None:
        lines.append(f"time = {roles.time_col}")
    for key, cols in (
        ("fixed_regress", roles.fixed_regress),
        ("fixed_split", roles.fixed_split),
        ("var_select", roles.var_select),
    ):
        if cols:
            lines.append(f"{key} = {','.join(cols)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# splits and standardization
# ---------------------------------------------------------------------------


def split_subjects(ds: PanelDataset, counts: list[int] | tuple[int, ...], seed: int) -> SubjectSplit:
    """Partition clusters (not rows) into parts of the given sizes.

    The assignment is a seeded permutation of the distinct cluster ids in
    first-appearance order, so it is reproducible and uniform over
    partitions. Row order within each part preserves the input order.
    """
    clusters = ds.clusters
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("split counts must be non-negative")
    if sum(counts) != len(clusters):
        raise ValueError(
            f"split counts sum to {sum(counts)} but dataset has {len(clusters)} clusters"
        )
    order = np.random.default_rng(seed).permutation(len(clusters))
    parts = []
    ids = []
    pos = 0
    for c in counts:
        chosen = [clusters[j] for j in order[pos : pos + c]]
        pos += c
        ids.append(tuple(chosen))
        parts.append(ds.subset_clusters(chosen))
    return SubjectSplit(parts=tuple(parts), cluster_ids=tuple(ids))


def standardize(
    ds: PanelDataset, stats: ColumnStats | None = None
) -> tuple[PanelDataset, ColumnStats]:
    """Center and scale var_select and fixed_regress columns.

    When ``stats`` is None the transform is derived from this dataset
    (sample sd, ddof=1; constant columns keep sd 1 so they pass through
    centered). When ``stats`` is given it must cover every column to be
    transformed, and is applied as-is: the use case is deriving stats on a
    training part and applying them to validation/test parts.
    """
    cols = list(ds.roles.var_select) + list(ds.roles.fixed_regress)
    if stats is None:
        mean = {}
        sd = {}
        for c in cols:
            a = ds.column(c)
            mean[c] = float(np.mean(a)) if a.size else 0.0
            s = float(np.std(a, ddof=1)) if a.size > 1 else 0.0
            sd[c] = s if s > 0 else 1.0
        stats = ColumnStats(mean=mean, sd=sd)
    else:
        missing = [c for c in cols if c not in stats.mean or c not in stats.sd]
        if missing:
            raise SchemaError(f"stats missing columns: {', '.join(missing)}")
    frame = ds.frame.copy()
    for c in cols:
        frame[c] = (ds.column(c) - stats.mean[c]) / stats.sd[c]
    out = PanelDataset(frame, ds.roles)
    out.categorical_levels = {k: list(v) for k, v in ds.categorical_levels.items()}
    return out, stats
