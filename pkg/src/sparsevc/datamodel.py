"""Longitudinal cohort containers, CSV ingestion and wave truncation.

A cohort is a ragged collection of subjects, each observed at its own
irregular set of scaled visit times in ``[0, 1]``.  Every visit carries a
response and ``p`` covariate values.  Arrays handed to the solver are laid
out subject-major, time-minor.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

VISIT_RULES = ("drop-incomplete-visit", "impute-subject-mean", "impute-cohort-mean")


class DataError(ValueError):
    """Raised for malformed or inconsistent longitudinal input."""


class MissingDataWarning(UserWarning):
    """Emitted when covariates or visits are discarded for missingness."""


@dataclass(frozen=True)
class Visit:
    time: float
    response: float
    covariates: tuple[float | None, ...]

    def __post_init__(self):
        if not (0.0 <= self.time <= 1.0):
            raise DataError(f"visit time {self.time!r} outside [0, 1]")


@dataclass(frozen=True)
class Subject:
    id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise DataError(f"subject {self.id!r} has no visits")
        times = [v.time for v in self.visits]
        if any(b < a for a, b in zip(times, times[1:])):
            raise DataError(f"visits of subject {self.id!r} are not sorted by time")

    @property
    def m(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class MissingPolicy:
    """How to get rid of missing covariate values.

    Covariates missing in more than ``covariate_drop_fraction`` of visits are
    removed entirely; remaining gaps are handled by ``visit_rule``.
    """

    covariate_drop_fraction: float = 0.2
    visit_rule: str = "impute-subject-mean"

    def __post_init__(self):
        if not (0.0 <= self.covariate_drop_fraction <= 1.0):
            raise ValueError("covariate_drop_fraction must lie in [0, 1]")
        if self.visit_rule not in VISIT_RULES:
            raise ValueError(f"visit_rule must be one of {VISIT_RULES}")


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    subjects: tuple[Subject, ...]
    covariate_names: tuple[str, ...]
    time_divisor: float = 1.0
    # covariate name -> fraction of visits missing before any policy was applied
    raw_missingness: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.subjects:
            raise DataError("dataset has no subjects")
        if not self.covariate_names:
            raise DataError("dataset has no covariates")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DataError("covariate names must be unique")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("subject ids must be unique")
        p = len(self.covariate_names)
        for s in self.subjects:
            for v in s.visits:
                if len(v.covariates) != p:
                    raise DataError(
                        f"subject {s.id!r}: visit carries {len(v.covariates)} "
                        f"covariates, expected {p}"
                    )

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return (
            self.subjects == other.subjects
            and self.covariate_names == other.covariate_names
            and self.time_divisor == other.time_divisor
        )

    __hash__ = None

    @classmethod
    def from_arrays(
        cls,
        subject_ids: Sequence[str],
        times: Sequence[float],
        y: Sequence[float],
        X,
        covariate_names: Sequence[str] | None = None,
        time_divisor: float = 1.0,
    ) -> "LongitudinalDataset":
        """Build a dataset from flat per-visit arrays (NaN in ``X`` = missing).

        Rows may come in any order; subjects are sorted by id and visits by time.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if covariate_names is None:
            covariate_names = [f"x{j + 1}" for j in range(X.shape[1])]
        groups: dict[str, list[Visit]] = {}
        for sid, t, yy, row in zip(subject_ids, times, y, X):
            cov = tuple(None if math.isnan(v) else float(v) for v in row)
            groups.setdefault(str(sid), []).append(Visit(float(t), float(yy), cov))
        subjects = []
        for sid in sorted(groups):
            visits = sorted(groups[sid], key=lambda v: v.time)
            subjects.append(Subject(sid, tuple(visits)))
        return cls(tuple(subjects), tuple(covariate_names), float(time_divisor))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def N(self) -> int:
        return sum(s.m for s in self.subjects)

    @property
    def visit_counts(self) -> list[int]:
        return [s.m for s in self.subjects]

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([v.time for s in self.subjects for v in s.visits])

    @cached_property
    def y(self) -> np.ndarray:
        return np.array([v.response for s in self.subjects for v in s.visits])

    @cached_property
    def X(self) -> np.ndarray:
        """``N x p`` covariate matrix, NaN where missing."""
        rows = [
            [np.nan if c is None else c for c in v.covariates]
            for s in self.subjects
            for v in s.visits
        ]
        return np.array(rows, dtype=float).reshape(self.N, self.p)

    @cached_property
    def subject_index(self) -> np.ndarray:
        """Row -> position of the owning subject in ``subjects``."""
        return np.repeat(np.arange(self.n), self.visit_counts)

    @property
    def subject_ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def has_missing(self) -> bool:
        return bool(np.isnan(self.X).any())

    def subset(self, subject_ids: Iterable[str]) -> "LongitudinalDataset":
        keep = set(subject_ids)
        subjects = tuple(s for s in self.subjects if s.id in keep)
        return LongitudinalDataset(
            subjects, self.covariate_names, self.time_divisor, self.raw_missingness
        )

    def select_covariates(self, names: Sequence[str]) -> "LongitudinalDataset":
        idx = [self.covariate_names.index(nm) for nm in names]
        subjects = tuple(
            Subject(
                s.id,
                tuple(
                    Visit(v.time, v.response, tuple(v.covariates[j] for j in idx))
                    for v in s.visits
                ),
            )
            for s in self.subjects
        )
        miss = {nm: self.raw_missingness[nm] for nm in names if nm in self.raw_missingness}
        return LongitudinalDataset(subjects, tuple(names), self.time_divisor, miss)


@dataclass(frozen=True)
class CohortSummary:
    n: int
    p: int
    N: int
    visit_histogram: dict[int, int]
    missingness: dict[str, float]
    response_mean: float
    response_sd: float

    def binned_histogram(self, low: int = 3) -> dict[str, int]:
        """Visit-count histogram with every count ``<= low`` pooled."""
        out = {f"<={low}": sum(c for m, c in self.visit_histogram.items() if m <= low)}
        for m in sorted(self.visit_histogram):
            if m > low:
                out[str(m)] = self.visit_histogram[m]
        return out

    def to_text(self) -> str:
        lines = [
            f"subjects (n)        {self.n}",
            f"covariates (p)      {self.p}",
            f"visits (N)          {self.N}",
            f"response mean       {self.response_mean:.6g}",
            f"response sd         {self.response_sd:.6g}",
            "",
            "visits  subjects",
        ]
        lines += [f"{m:>6}  {c:>8}" for m, c in sorted(self.visit_histogram.items())]
        if self.missingness:
            lines += ["", "covariate  missing_fraction"]
            lines += [f"{k}  {v:.4f}" for k, v in self.missingness.items()]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            for key in ("n", "p", "N", "response_mean", "response_sd"):
                w.writerow([key, repr(getattr(self, key))])
            for m, c in sorted(self.visit_histogram.items()):
                w.writerow([f"visits_{m}", c])
            for k, v in self.missingness.items():
                w.writerow([f"missing_{k}", repr(v)])


def summarize(ds: LongitudinalDataset) -> CohortSummary:
    y = ds.y
    hist = dict(sorted(Counter(ds.visit_counts).items()))
    miss = {nm: float(ds.raw_missingness.get(nm, 0.0)) for nm in ds.covariate_names}
    sd = float(np.std(y, ddof=1)) if len(y) > 1 else 0.0
    return CohortSummary(ds.n, ds.p, ds.N, hist, miss, float(np.mean(y)), sd)


def restrict_waves(ds: LongitudinalDataset, max_time: float) -> LongitudinalDataset:
    """Keep visits at or before ``max_time``; subjects left empty are dropped."""
    if not (0.0 < max_time <= 1.0):
        raise ValueError("max_time must lie in (0, 1]")
    subjects = []
    for s in ds.subjects:
        kept = tuple(v for v in s.visits if v.time <= max_time)
        if kept:
            subjects.append(Subject(s.id, kept))
    if not subjects:
        raise DataError(f"no visits at or before time {max_time}")
    return LongitudinalDataset(
        tuple(subjects), ds.covariate_names, ds.time_divisor, ds.raw_missingness
    )


def apply_missing_policy(
    ds: LongitudinalDataset, policy: MissingPolicy = MissingPolicy()
) -> LongitudinalDataset:
    """Drop heavily-missing covariates, then fill or drop the remaining gaps."""
    X = ds.X
    frac = np.isnan(X).mean(axis=0)
    raw = dict(ds.raw_missingness) or {nm: float(f) for nm, f in zip(ds.covariate_names, frac)}
    keep = [j for j in range(ds.p) if frac[j] <= policy.covariate_drop_fraction]
    dropped = [ds.covariate_names[j] for j in range(ds.p) if j not in keep]
    if dropped:
        warnings.warn(
            f"dropping covariates with > {policy.covariate_drop_fraction:g} missing: "
            + ", ".join(dropped),
            MissingDataWarning,
            stacklevel=2,
        )
    if not keep:
        raise DataError("every covariate exceeds the missingness threshold")
    X = X[:, keep]
    names = tuple(ds.covariate_names[j] for j in keep)

    if policy.visit_rule == "drop-incomplete-visit":
        row_ok = ~np.isnan(X).any(axis=1)
        if not row_ok.all():
            warnings.warn(
                f"dropping {int((~row_ok).sum())} visits with missing covariates",
                MissingDataWarning,
                stacklevel=2,
            )
    else:
        row_ok = np.ones(len(X), dtype=bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cohort_mean = np.nanmean(X, axis=0)
        if policy.visit_rule == "impute-subject-mean":
            sidx = ds.subject_index
            for i in range(ds.n):
                rows = sidx == i
                block = X[rows]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    mu = np.nanmean(block, axis=0)
                mu = np.where(np.isnan(mu), cohort_mean, mu)
                X[rows] = np.where(np.isnan(block), mu, block)
        else:
            X = np.where(np.isnan(X), cohort_mean, X)

    subjects = []
    row = 0
    for s in ds.subjects:
        visits = []
        for v in s.visits:
            if row_ok[row]:
                visits.append(Visit(v.time, v.response, tuple(float(a) for a in X[row])))
            row += 1
        if visits:
            subjects.append(Subject(s.id, tuple(visits)))
    if not subjects:
        raise DataError("no complete visits remain after applying the missing policy")
    return LongitudinalDataset(tuple(subjects), names, ds.time_divisor, raw)


def _parse_number(cell: str, lineno: int, column: str) -> float | None:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        val = float(cell)
    except ValueError:
        raise DataError(f"line {lineno}: column {column!r}: cannot parse {cell!r}") from None
    if not math.isfinite(val):
        raise DataError(f"line {lineno}: column {column!r}: non-finite value {cell!r}")
    return val


def ingest_csv(
    path,
    schema: Mapping[str, str] | None = None,
    policy: MissingPolicy = MissingPolicy(),
    time_divisor: float | None = None,
) -> LongitudinalDataset:
    """Read a long-format cohort CSV (one row per visit).

    Parameters
    ----------
    path : path-like
        CSV with header ``subject_id,time,response,<cov1>,...``.
    schema : mapping, optional
        Renames for the three fixed columns, e.g. ``{"subject_id": "RID"}``.
        An optional ``"covariates"`` entry (comma-separated) restricts the
        covariate columns; otherwise every other column is a covariate.
    policy : MissingPolicy
        Applied after parsing.
    time_divisor : float, optional
        Raw times are divided by this value; defaults to the largest raw time.
    """
    path = Path(path)
    schema = dict(schema or {})
    col_id = schema.get("subject_id", "subject_id")
    col_t = schema.get("time", "time")
    col_y = schema.get("response", "response")

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for col in (col_id, col_t, col_y):
            if col not in header:
                raise DataError(f"{path}: missing required column {col!r}")
        if "covariates" in schema:
            cov_cols = [c.strip() for c in schema["covariates"].split(",") if c.strip()]
            for c in cov_cols:
                if c not in header:
                    raise DataError(f"{path}: missing covariate column {c!r}")
        else:
            cov_cols = [h for h in header if h not in (col_id, col_t, col_y)]
        if not cov_cols:
            raise DataError(f"{path}: no covariate columns")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        pos = {h: k for k, h in enumerate(header)}

        rows = []
        seen: set[tuple[str, float]] = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(
                    f"line {lineno}: expected {len(header)} fields, found {len(rec)}"
                )
            sid = rec[pos[col_id]].strip()
            if not sid:
                raise DataError(f"line {lineno}: empty subject id")
            t = _parse_number(rec[pos[col_t]], lineno, col_t)
            if t is None:
                raise DataError(f"line {lineno}: missing time")
            if t < 0:
                raise DataError(f"line {lineno}: negative time {t}")
            if (sid, t) in seen:
                raise DataError(f"line {lineno}: duplicate visit ({sid!r}, time {t})")
            seen.add((sid, t))
            yv = _parse_number(rec[pos[col_y]], lineno, col_y)
            xs = [_parse_number(rec[pos[c]], lineno, c) for c in cov_cols]
            rows.append((sid, t, yv, xs))

    if not rows:
        raise DataError(f"{path}: no data rows")
    if all(r[2] is None for r in rows):
        raise DataError(f"{path}: response column is entirely missing")

    if time_divisor is None:
        time_divisor = max(r[1] for r in rows) or 1.0
    if time_divisor <= 0:
        raise DataError("time divisor must be positive")
    if max(r[1] for r in rows) > time_divisor:
        raise DataError("raw times exceed the time divisor")

    X_all = np.array([[np.nan if v is None else v for v in r[3]] for r in rows], dtype=float)
    raw_miss = {c: float(f) for c, f in zip(cov_cols, np.isnan(X_all).mean(axis=0))}

    kept = [r for r in rows if r[2] is not None]
    if len(kept) < len(rows):
        warnings.warn(
            f"dropping {len(rows) - len(kept)} visits with missing response",
            MissingDataWarning,
            stacklevel=2,
        )
    ds = LongitudinalDataset.from_arrays(
        [r[0] for r in kept],
        [r[1] / time_divisor for r in kept],
        [r[2] for r in kept],
        np.array([[np.nan if v is None else v for v in r[3]] for r in kept], dtype=float),
        cov_cols,
        time_divisor,
    )
    ds = LongitudinalDataset(ds.subjects, ds.covariate_names, ds.time_divisor, raw_miss)
    return apply_missing_policy(ds, policy)


def export_csv(ds: LongitudinalDataset, path, raw_times: bool = False) -> None:
    """Write the cohort in long format with round-trip exact reals.

    Scaled times are written by default, so ``ingest_csv(path, time_divisor=1)``
    restores the same visits bit for bit.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "time", "response", *ds.covariate_names])
        for s in ds.subjects:
            for v in s.visits:
                t = v.time * ds.time_divisor if raw_times else v.time
                w.writerow(
                    [s.id, repr(t), repr(v.response)]
                    + ["" if c is None else repr(c) for c in v.covariates]
                )
