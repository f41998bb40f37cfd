"""Panel data structures for micro-randomized-trial analyses.

The long format is one row per (subject, decision point). A validated
:class:`MrtDataset` stores every named column once and materializes the
design roles (moderator features ``f``, auxiliary variables ``z``, control
features ``g``, weight-numerator ``p_tilde``) from a list of
:class:`FeatureSpec` entries, so the same panel can be re-viewed under a
different role mapping without copying data.

Outcome alignment: the ``y`` column supplied at load time is the proximal
series (row ``t`` holds the outcome observed right after decision ``t``).
For a lag-``delta`` analysis the column is shifted once at construction so
row ``t`` carries the outcome ``delta`` steps ahead; estimators never
re-index. Rows with ``t > T - delta + 1`` stay in the panel for bookkeeping
but are excluded from every estimating sum via ``usable_mask``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    MissingColumn,
    MissingValue,
    NonBinaryTreatment,
    NonContiguousTime,
    ProbabilityOutOfRange,
)

BASE_COLUMNS = ("subject_id", "t", "a", "p", "y")

ROLE_MODERATOR = "moderator_f"
ROLE_AUXILIARY = "auxiliary_z"
ROLE_CONTROL = "control_g"
ROLE_NUMERATOR = "numerator_ptilde"
_ROLES = (ROLE_MODERATOR, ROLE_AUXILIARY, ROLE_CONTROL, ROLE_NUMERATOR)


@dataclass(frozen=True)
class FeatureSpec:
    """Maps named columns onto one design role.

    ``intercept=True`` on the moderator role prepends a constant-1 column
    exactly once; the same flag on the control role does likewise.
    """

    role: str
    source_columns: tuple[str, ...] = ()
    intercept: bool = False

    def __post_init__(self):
        if self.role not in _ROLES:
            raise DimensionMismatch(f"unknown feature role {self.role!r}")
        object.__setattr__(self, "source_columns", tuple(self.source_columns))


@dataclass(frozen=True)
class DecisionRecord:
    """One subject-decision-point row, mostly used in tests and diagnostics."""

    subject_id: int
    t: int
    a: int
    p: float
    y: float
    z: np.ndarray
    s_features: np.ndarray
    g_features: np.ndarray
    p_tilde: float


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MrtDataset:
    """Immutable long-format panel, sorted by subject then decision index.

    All subjects share the same horizon ``T``; rows are stored subject-major
    so any per-row column reshapes to ``(n_subjects, horizon)``.
    """

    subject_ids: np.ndarray
    t: np.ndarray
    a: np.ndarray
    p: np.ndarray
    y: np.ndarray          # aligned: row t holds the lag-delta outcome
    y_raw: np.ndarray      # proximal series as supplied (round-trip fidelity)
    f: np.ndarray          # (rows, q) moderator features, intercept included
    z: np.ndarray          # (rows, p_z) auxiliary variables
    g: np.ndarray          # (rows, d) control features
    p_tilde: np.ndarray
    n_subjects: int
    horizon: int
    lag: int
    schema: tuple[FeatureSpec, ...]
    columns: Mapping[str, np.ndarray] = field(repr=False)
    f_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    g_names: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        return self.subject_ids.shape[0]

    @property
    def q(self) -> int:
        return self.f.shape[1]

    @property
    def p_z(self) -> int:
        return self.z.shape[1]

    @property
    def d(self) -> int:
        return self.g.shape[1]

    @property
    def usable_mask(self) -> np.ndarray:
        return self.t <= self.horizon - self.lag + 1

    @property
    def n_usable(self) -> int:
        return self.horizon - self.lag + 1

    def per_subject(self, arr: np.ndarray) -> np.ndarray:
        """Reshape a row-aligned array to (n_subjects, horizon, ...)."""
        return arr.reshape((self.n_subjects, self.horizon) + arr.shape[1:])

    def shifted(self, arr: np.ndarray, steps: int = 1) -> np.ndarray:
        """Within-subject forward shift: row t receives the value at t+steps.

        Tail rows (no t+steps row) are filled with 0; they are never usable
        for a fit that needs the shifted value.
        """
        by_subj = self.per_subject(arr)
        out = np.zeros_like(by_subj)
        out[:, : self.horizon - steps] = by_subj[:, steps:]
        return out.reshape(arr.shape)

    def record(self, i: int) -> DecisionRecord:
        return DecisionRecord(
            subject_id=int(self.subject_ids[i]),
            t=int(self.t[i]),
            a=int(self.a[i]),
            p=float(self.p[i]),
            y=float(self.y[i]),
            z=self.z[i],
            s_features=self.f[i],
            g_features=self.g[i],
            p_tilde=float(self.p_tilde[i]),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.subject_ids, self.t, self.a, self.p, self.y,
                    self.f, self.z, self.g, self.p_tilde):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def with_schema(self, schema: Sequence[FeatureSpec]) -> "MrtDataset":
        """Re-view the same panel under a different role mapping."""
        return _build_dataset(dict(self.columns), list(schema), self.lag,
                              y_is_aligned=True)


def _column_matrix(columns: Mapping[str, np.ndarray], spec: FeatureSpec,
                   n_rows: int) -> tuple[np.ndarray, tuple[str, ...]]:
    cols, names = [], []
    if spec.intercept:
        cols.append(np.ones(n_rows))
        names.append("1")
    for name in spec.source_columns:
        if name not in columns:
            raise MissingColumn(f"column {name!r} not found")
        cols.append(np.asarray(columns[name], dtype=float))
        names.append(name)
    if not cols:
        return np.empty((n_rows, 0)), ()
    return np.column_stack(cols), tuple(names)


def _validate_base(columns: Mapping[str, np.ndarray]) -> tuple[np.ndarray, ...]:
    for name in ("subject_id", "t", "a", "p", "y"):
        if name not in columns:
            raise MissingColumn(f"required column {name!r} not found")
    subject = np.asarray(columns["subject_id"])
    t = np.asarray(columns["t"])
    a = np.asarray(columns["a"], dtype=float)
    p = np.asarray(columns["p"], dtype=float)
    y = np.asarray(columns["y"], dtype=float)
    return subject, t, a, p, y


def _first_bad(mask: np.ndarray, subject: np.ndarray, t: np.ndarray):
    i = int(np.argmax(mask))
    return subject[i], int(t[i])


def _build_dataset(columns: dict[str, np.ndarray], schema: list[FeatureSpec],
                   lag: int, y_is_aligned: bool) -> MrtDataset:
    if lag < 1:
        raise DimensionMismatch(f"lag must be >= 1, got {lag}")
    subject, t, a, p, y = _validate_base(columns)
    n_rows = subject.shape[0]

    order = np.lexsort((t, subject))
    if not np.array_equal(order, np.arange(n_rows)):
        columns = {k: np.asarray(v)[order] for k, v in columns.items()}
        subject, t, a, p, y = _validate_base(columns)

    bad = ~np.isin(a, (0.0, 1.0))
    if bad.any():
        sid, tt = _first_bad(bad, subject, t)
        raise NonBinaryTreatment("treatment a must be 0 or 1", sid, tt)
    bad = ~((p > 0.0) & (p < 1.0))
    if bad.any():
        sid, tt = _first_bad(bad, subject, t)
        raise ProbabilityOutOfRange("randomization probability p must lie in (0,1)", sid, tt)

    uniq, starts = np.unique(subject, return_index=True)
    n_subjects = uniq.shape[0]
    if n_rows % n_subjects != 0:
        sid = subject[starts[np.argmin(np.diff(np.append(starts, n_rows)))]]
        raise NonContiguousTime("subjects have unequal panel lengths", sid, -1)
    horizon = n_rows // n_subjects
    t_mat = t.reshape(n_subjects, horizon)
    expected = np.arange(1, horizon + 1)
    bad_rows = (t_mat != expected[None, :]).any(axis=1)
    if bad_rows.any():
        j = int(np.argmax(bad_rows))
        k = int(np.argmax(t_mat[j] != expected))
        raise NonContiguousTime("t must be contiguous from 1 within subject",
                                uniq[j], int(t_mat[j, k]))

    y_raw = y.copy()
    if y_is_aligned and "y_raw" in columns:
        y_raw = np.asarray(columns["y_raw"], dtype=float)
    if not y_is_aligned and lag > 1:
        # shift within subject: aligned row t <- raw row t + (lag - 1)
        y_mat = y.reshape(n_subjects, horizon)
        aligned = np.zeros_like(y_mat)
        aligned[:, : horizon - (lag - 1)] = y_mat[:, lag - 1:]
        y = aligned.reshape(-1)

    usable = t <= horizon - lag + 1
    mats, named = {}, {}
    for role in _ROLES:
        specs = [s for s in schema if s.role == role]
        if len(specs) > 1:
            raise DimensionMismatch(f"role {role!r} declared more than once")
        if specs:
            mats[role], named[role] = _column_matrix(columns, specs[0], n_rows)
        else:
            mats[role], named[role] = np.empty((n_rows, 0)), ()

    if mats[ROLE_NUMERATOR].shape[1] > 1:
        raise DimensionMismatch("numerator_ptilde must map a single column")
    if mats[ROLE_NUMERATOR].shape[1] == 1:
        p_tilde = mats[ROLE_NUMERATOR][:, 0]
    else:
        # legal default numerator: pooled treatment frequency, constant in t
        p_tilde = np.full(n_rows, float(np.mean(a)))
    bad = ~((p_tilde > 0.0) & (p_tilde < 1.0))
    if bad.any():
        sid, tt = _first_bad(bad, subject, t)
        raise ProbabilityOutOfRange("weight numerator p_tilde must lie in (0,1)", sid, tt)

    f = mats[ROLE_MODERATOR]
    if f.shape[1] == 0:
        f = np.ones((n_rows, 1))
        named[ROLE_MODERATOR] = ("1",)

    for label, arr in (("y", y[usable]), ("z", mats[ROLE_AUXILIARY]),
                       ("f", f), ("g", mats[ROLE_CONTROL])):
        if arr.size and not np.isfinite(arr).all():
            flat = np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
            idx = np.arange(n_rows)[usable] if label == "y" else np.arange(arr.shape[0])
            i = int(idx[np.argmax(~flat)])
            raise MissingValue(f"non-finite value in {label}", subject[i], int(t[i]))

    keep = dict(columns)
    keep["y_raw"] = y_raw
    keep["y"] = y
    return MrtDataset(
        subject_ids=_as_readonly(subject),
        t=_as_readonly(t.astype(int)),
        a=_as_readonly(a.astype(int)),
        p=_as_readonly(p),
        y=_as_readonly(y),
        y_raw=_as_readonly(y_raw),
        f=_as_readonly(f),
        z=_as_readonly(mats[ROLE_AUXILIARY]),
        g=_as_readonly(mats[ROLE_CONTROL]),
        p_tilde=_as_readonly(p_tilde),
        n_subjects=n_subjects,
        horizon=horizon,
        lag=lag,
        schema=tuple(schema),
        columns={k: _as_readonly(np.asarray(v, dtype=float) if k != "subject_id" else np.asarray(v))
                 for k, v in keep.items()},
        f_names=named[ROLE_MODERATOR],
        z_names=named[ROLE_AUXILIARY],
        g_names=named[ROLE_CONTROL],
    )


def from_columns(columns: Mapping[str, np.ndarray], schema: Sequence[FeatureSpec],
                 lag: int = 1, y_is_aligned: bool = False) -> MrtDataset:
    """Build and validate a dataset from in-memory columns.

    ``y`` is the raw proximal series unless ``y_is_aligned`` is set (used by
    panel generators that produce the lagged outcome directly).
    """
    return _build_dataset({k: np.asarray(v) for k, v in columns.items()},
                          list(schema), lag, y_is_aligned)


def load_csv(path, schema: Sequence[FeatureSpec], lag: int = 1) -> MrtDataset:
    """Load a long-format CSV and return a validated :class:`MrtDataset`.

    The header must name ``subject_id, t, a, p, y`` plus every column
    referenced by ``schema``. Non-finite tokens (NaN, Inf) are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn("empty CSV file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    needed = set(BASE_COLUMNS)
    for spec in schema:
        needed.update(spec.source_columns)
    for name in sorted(needed):
        if name not in header:
            raise MissingColumn(f"required column {name!r} not in CSV header")

    raw = {name: np.empty(len(rows), dtype=object) for name in header}
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise MissingValue(f"row {i + 2} has {len(row)} fields, expected {len(header)}")
        for name, val in zip(header, row):
            raw[name][i] = val

    columns: dict[str, np.ndarray] = {}
    for name in header:
        if name == "subject_id":
            columns[name] = raw[name].astype(str)
            continue
        try:
            vals = raw[name].astype(float)
        except ValueError as exc:
            raise MissingValue(f"column {name!r}: {exc}") from None
        if name in needed and not np.all(np.isfinite(vals)):
            i = int(np.argmax(~np.isfinite(vals)))
            raise MissingValue(f"non-finite value in column {name!r}",
                               raw["subject_id"][i], int(float(raw["t"][i])))
        columns[name] = vals
    return _build_dataset(columns, list(schema), lag, y_is_aligned=False)


def to_csv(ds: MrtDataset, path) -> None:
    """Serialize a dataset back to CSV, reproducing numeric fields exactly.

    The ``y`` column written is the raw proximal series (what ``load_csv``
    consumes), so a load/serialize round trip is bit-faithful.
    """
    names = ["subject_id", "t", "a", "p", "y"]
    extra = [n for n in ds.columns
             if n not in names and n not in ("y_raw", "y")]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + extra)
        for i in range(ds.n_rows):
            row = [str(ds.subject_ids[i]), repr(int(ds.t[i])), repr(int(ds.a[i])),
                   repr(float(ds.p[i])), repr(float(ds.y_raw[i]))]
            row += [repr(float(ds.columns[n][i])) for n in extra]
            writer.writerow(row)


@dataclass(frozen=True)
class DesignBlocks:
    """Per-row regression blocks shared by every weighted criterion."""

    f: np.ndarray
    z: np.ndarray
    g: np.ndarray
    centered_a: np.ndarray
    weight_w: np.ndarray


def design_blocks(ds: MrtDataset) -> DesignBlocks:
    """Centered treatment and likelihood-ratio weight for every row.

    ``weight_w = p_tilde(a|s) / p(a|h)`` with the numerator evaluated at the
    observed arm; ``centered_a = a - p_tilde``. Deterministic and
    order-preserving.
    """
    a = ds.a.astype(float)
    num = np.where(a == 1.0, ds.p_tilde, 1.0 - ds.p_tilde)
    den = np.where(a == 1.0, ds.p, 1.0 - ds.p)
    return DesignBlocks(
        f=ds.f,
        z=ds.z,
        g=ds.g,
        centered_a=a - ds.p_tilde,
        weight_w=num / den,
    )


def moderator_schema(moderators: Iterable[str] = (), aux: Iterable[str] = (),
                     controls: Iterable[str] = (), ptilde: str | None = None,
                     f_intercept: bool = True, g_intercept: bool = True) -> list[FeatureSpec]:
    """Convenience schema builder used by the CLI and the simulators."""
    schema = [FeatureSpec(ROLE_MODERATOR, tuple(moderators), intercept=f_intercept),
              FeatureSpec(ROLE_CONTROL, tuple(controls), intercept=g_intercept)]
    aux = tuple(aux)
    if aux:
        schema.append(FeatureSpec(ROLE_AUXILIARY, aux))
    if ptilde is not None:
        schema.append(FeatureSpec(ROLE_NUMERATOR, (ptilde,)))
    return schema
