"""Episode-level trial records: ingestion, validation, slicing.

Records are held column-wise (one numpy array per field) because every
downstream computation is vectorised over person-episodes. The row-wise
view, :class:`EpisodeRecord`, is available through :attr:`RecordSet.records`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

ROLES = ("participant_id", "episode", "arm", "outcome", "substudy")
REQUIRED_ROLES = ("participant_id", "episode", "arm", "outcome")
MISSING_TOKENS = ("", "NA")
DERIVED_FIELDS = ("prior_substudy", "prior_arm")
NO_HISTORY = "none"


@dataclass(frozen=True)
class EpisodeRecord:
    participant_id: str
    episode: int
    arm: str
    outcome: float
    z_values: Mapping[str, str] = field(default_factory=dict)
    x_values: Mapping[str, object] = field(default_factory=dict)
    substudy: str | None = None


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str  # "z", "x" or "both"
    type: str = "categorical"  # or "numeric"
    derived: str | None = None

    @property
    def is_z(self):
        return self.role in ("z", "both")

    @property
    def is_x(self):
        return self.role in ("x", "both")


@dataclass(frozen=True)
class Schema:
    """Column-role map for a trial CSV.

    ``roles`` maps each fixed role (participant_id, episode, arm, outcome,
    substudy) to its CSV header; ``columns`` tags every remaining column as
    a randomisation input (z), an adjustment covariate (x), or both.
    """

    roles: Mapping[str, str]
    columns: tuple[ColumnSpec, ...]

    @classmethod
    def from_dict(cls, d):
        roles = {r: r for r in REQUIRED_ROLES}
        roles.update(d.get("roles", {}))
        unknown = set(roles) - set(ROLES)
        if unknown:
            raise ParseError(f"unknown schema roles {sorted(unknown)}")
        cols = []
        for name, spec in d.get("columns", {}).items():
            if isinstance(spec, str):
                spec = {"role": spec}
            role = spec.get("role")
            if role not in ("z", "x", "both"):
                raise ParseError(f"column {name!r}: role must be 'z', 'x' or 'both', got {role!r}")
            ctype = spec.get("type", "categorical")
            if ctype not in ("categorical", "numeric"):
                raise ParseError(f"column {name!r}: unknown type {ctype!r}")
            derived = spec.get("derived")
            if derived is not None and derived not in DERIVED_FIELDS:
                raise ParseError(f"column {name!r}: unknown derivation {derived!r}")
            if derived is not None and ctype != "categorical":
                raise ParseError(f"column {name!r}: derived columns are categorical")
            cols.append(ColumnSpec(name, role, ctype, derived))
        return cls(roles, tuple(cols))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"schema {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self):
        cols = {}
        for c in self.columns:
            d = {"role": c.role, "type": c.type}
            if c.derived:
                d["derived"] = c.derived
            cols[c.name] = d
        return {"roles": dict(self.roles), "columns": cols}

    @property
    def has_substudy(self):
        return "substudy" in self.roles


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple = ()
    warnings: tuple = ()
    dropped_count: int = 0


@dataclass(frozen=True, eq=False)
class RecordSet:
    """Immutable column store of person-episode records.

    Categorical z and x columns are object arrays of stripped strings
    (``None`` marks a missing categorical x); numeric x columns are float
    arrays with NaN for missing. ``outcome`` uses NaN for missing.
    """

    participant_id: np.ndarray
    episode: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    z: Mapping[str, np.ndarray]
    x: Mapping[str, np.ndarray]
    x_types: Mapping[str, str]
    arm_set: tuple[str, ...]
    substudy: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.episode)
        for name in ("participant_id", "arm", "outcome"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        for cols in (self.z, self.x):
            for k, v in cols.items():
                if len(v) != n:
                    raise ValueError(f"column {k} has wrong length")

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord], arm_set=None, x_types=None):
        records = list(records)
        z_names = sorted({k for r in records for k in r.z_values})
        x_names = sorted({k for r in records for k in r.x_values})
        if x_types is None:
            x_types = {}
            for name in x_names:
                vals = [r.x_values.get(name) for r in records]
                numeric = all(v is None or isinstance(v, (int, float)) for v in vals)
                x_types[name] = "numeric" if numeric else "categorical"
        x = {}
        for name in x_names:
            vals = [r.x_values.get(name) for r in records]
            if x_types[name] == "numeric":
                x[name] = np.array([math.nan if v is None else float(v) for v in vals], dtype=float)
            else:
                x[name] = np.array([None if v is None else str(v) for v in vals], dtype=object)
        z = {name: np.array([str(r.z_values.get(name, "")) for r in records], dtype=object)
             for name in z_names}
        has_sub = any(r.substudy is not None for r in records)
        arms = np.array([str(r.arm) for r in records], dtype=object)
        if arm_set is None:
            arm_set = tuple(sorted(set(arms.tolist())))
        return cls(
            participant_id=np.array([str(r.participant_id) for r in records], dtype=object),
            episode=np.array([r.episode for r in records], dtype=np.int64),
            arm=arms,
            outcome=np.array([r.outcome for r in records], dtype=float),
            z=z,
            x=x,
            x_types=dict(x_types),
            arm_set=tuple(arm_set),
            substudy=(np.array([r.substudy for r in records], dtype=object) if has_sub else None),
        )

    def __len__(self):
        return len(self.episode)

    @cached_property
    def participant_codes(self) -> np.ndarray:
        """Integer code per row; codes follow first appearance order."""
        _, first, inv = np.unique(self.participant_id, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        return rank[inv.reshape(-1)]

    @cached_property
    def participant_labels(self) -> np.ndarray:
        """Participant id for each code, in code order."""
        labels = np.empty(self.n, dtype=object)
        labels[self.participant_codes] = self.participant_id
        return labels

    @property
    def n(self) -> int:
        if len(self) == 0:
            return 0
        return int(self.participant_codes.max()) + 1

    @property
    def max_episode(self) -> int:
        return int(self.episode.max()) if len(self) else 0

    @cached_property
    def participant_index(self) -> dict:
        """participant_id -> sorted list of that participant's episodes."""
        index = {}
        for pid, t in zip(self.participant_id.tolist(), self.episode.tolist()):
            index.setdefault(pid, []).append(t)
        return {pid: sorted(ts) for pid, ts in index.items()}

    @cached_property
    def episode_count(self) -> np.ndarray:
        """T_i per participant code."""
        return np.bincount(self.participant_codes, minlength=self.n)

    @property
    def records(self) -> list[EpisodeRecord]:
        out = []
        for r in range(len(self)):
            out.append(EpisodeRecord(
                participant_id=self.participant_id[r],
                episode=int(self.episode[r]),
                arm=self.arm[r],
                outcome=float(self.outcome[r]),
                z_values={k: v[r] for k, v in self.z.items()},
                x_values={k: (float(v[r]) if self.x_types[k] == "numeric" else v[r])
                          for k, v in self.x.items()},
                substudy=None if self.substudy is None else self.substudy[r],
            ))
        return out

    def take(self, rows) -> "RecordSet":
        """Sub-RecordSet with the given row indices (or boolean mask)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return RecordSet(
            participant_id=self.participant_id[rows],
            episode=self.episode[rows],
            arm=self.arm[rows],
            outcome=self.outcome[rows],
            z={k: v[rows] for k, v in self.z.items()},
            x={k: v[rows] for k, v in self.x.items()},
            x_types=self.x_types,
            arm_set=self.arm_set,
            substudy=None if self.substudy is None else self.substudy[rows],
        )

    def check(self) -> list[tuple[str, str]]:
        """Return every invariant violation as ``(locator, message)``."""
        errors = []
        if len(self) == 0:
            return errors
        bad_ep = np.flatnonzero(self.episode < 1)
        for r in bad_ep:
            errors.append((_loc(self, r), f"episode must be >= 1, got {self.episode[r]}"))
        arms = set(self.arm_set)
        for r in np.flatnonzero(~np.isin(self.arm, list(arms))):
            errors.append((_loc(self, r), f"arm {self.arm[r]!r} not in arm set {list(self.arm_set)}"))
        codes = self.participant_codes
        key = codes.astype(np.int64) * (int(self.episode.max()) + 2) + self.episode
        uniq, counts = np.unique(key, return_counts=True)
        for k in uniq[counts > 1]:
            r = int(np.flatnonzero(key == k)[0])
            errors.append((_loc(self, r), "duplicate (participant, episode)"))
        max_ep = np.zeros(self.n, dtype=np.int64)
        np.maximum.at(max_ep, codes, self.episode)
        distinct = np.bincount(codes[np.unique(key, return_index=True)[1]], minlength=self.n)
        for c in np.flatnonzero(max_ep != distinct):
            pid = self.participant_labels[c]
            errors.append((f"participant {pid}",
                           f"episode gap: episodes {self.participant_index[pid]}"))
        return errors

    def validate(self) -> "RecordSet":
        errors = self.check()
        if errors:
            raise ValidationError(errors)
        return self


def _loc(rs, r):
    return f"participant {rs.participant_id[r]} episode {rs.episode[r]}"


def _is_missing(cell):
    return cell.strip() in MISSING_TOKENS


def parse_records(source, schema: Schema, arm_set=None) -> RecordSet:
    """Parse a delimited text stream with a header row into a RecordSet.

    ``source`` is an open text stream or a string holding the file content.
    Malformed rows raise :class:`ParseError` with the 1-based line number;
    structural violations (duplicate or gapped episodes, unknown arms) raise
    :class:`ValidationError` listing all of them.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty input", line=1) from None
    if len(set(header)) != len(header):
        raise ParseError("duplicate column names in header", line=1)
    col = {name: i for i, name in enumerate(header)}

    for role in REQUIRED_ROLES:
        if schema.roles[role] not in col:
            raise ParseError(f"missing required column {schema.roles[role]!r} (role {role})", line=1)
    sub_col = schema.roles.get("substudy")
    if sub_col is not None and sub_col not in col:
        raise ParseError(f"missing substudy column {sub_col!r}", line=1)

    tagged = {c.name for c in schema.columns}
    role_cols = {v for v in schema.roles.values()}
    for name in header:
        if name not in tagged and name not in role_cols:
            raise ParseError(f"column {name!r} has no role in schema", line=1)
    for c in schema.columns:
        if c.derived and c.name in col:
            raise ParseError(f"derived column {c.name!r} must not appear in the data", line=1)
        if not c.derived and c.name not in col:
            raise ParseError(f"schema column {c.name!r} missing from data", line=1)
        if c.derived == "prior_substudy" and sub_col is None:
            raise ParseError(f"column {c.name!r} derives from substudy but no substudy role", line=1)

    pid, ep, arm, out, sub = [], [], [], [], []
    zcols = {c.name: [] for c in schema.columns if c.is_z and not c.derived}
    xcols = {c.name: [] for c in schema.columns if c.is_x and not c.derived}
    ctype = {c.name: c.type for c in schema.columns}
    width = len(header)
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
        p = row[col[schema.roles["participant_id"]]].strip()
        if not p:
            raise ParseError("empty participant_id", line=lineno)
        e = row[col[schema.roles["episode"]]].strip()
        try:
            e = int(e)
        except ValueError:
            raise ParseError(f"episode {e!r} is not an integer", line=lineno) from None
        a = row[col[schema.roles["arm"]]].strip()
        if not a:
            raise ParseError("empty arm", line=lineno)
        y = row[col[schema.roles["outcome"]]]
        if _is_missing(y):
            y = math.nan
        else:
            try:
                y = float(y)
            except ValueError:
                raise ParseError(f"outcome {y.strip()!r} is not numeric", line=lineno) from None
        pid.append(p)
        ep.append(e)
        arm.append(a)
        out.append(y)
        if sub_col is not None:
            s = row[col[sub_col]].strip()
            sub.append(None if s in MISSING_TOKENS else s)
        for name in zcols:
            v = row[col[name]].strip()
            if not v:
                raise ParseError(f"empty z value in column {name!r}", line=lineno)
            zcols[name].append(v)
        for name in xcols:
            v = row[col[name]]
            if ctype[name] == "numeric":
                if _is_missing(v):
                    xcols[name].append(math.nan)
                    continue
                try:
                    xcols[name].append(float(v))
                except ValueError:
                    raise ParseError(f"column {name!r}: {v.strip()!r} is not numeric",
                                     line=lineno) from None
            else:
                xcols[name].append(None if _is_missing(v) else v.strip())

    arms = np.array(arm, dtype=object)
    if arm_set is None:
        arm_set = tuple(sorted(set(arm)))
    z = {k: np.array(v, dtype=object) for k, v in zcols.items()}
    x = {}
    x_types = {}
    for k, v in xcols.items():
        if ctype[k] == "numeric":
            x[k] = np.array(v, dtype=float)
        else:
            x[k] = np.array(v, dtype=object)
        x_types[k] = ctype[k]
    rs = RecordSet(
        participant_id=np.array(pid, dtype=object),
        episode=np.array(ep, dtype=np.int64),
        arm=arms,
        outcome=np.array(out, dtype=float),
        z=z, x=x, x_types=x_types,
        arm_set=tuple(arm_set),
        substudy=np.array(sub, dtype=object) if sub_col is not None else None,
    )
    rs.validate()
    derived = [c for c in schema.columns if c.derived]
    if derived:
        rs = with_derived_columns(rs, derived)
    return rs


def with_derived_columns(rs: RecordSet, columns: Iterable[ColumnSpec]) -> RecordSet:
    """Add history-derived categorical columns.

    ``prior_substudy`` / ``prior_arm`` at episode t is the participant's
    substudy (arm) history over episodes 1..t-1 joined with ``+``, or
    ``"none"`` at episode 1.
    """
    z = dict(rs.z)
    x = dict(rs.x)
    x_types = dict(rs.x_types)
    for c in columns:
        source = rs.substudy if c.derived == "prior_substudy" else rs.arm
        if source is None:
            raise ValidationError([(c.name, "derivation needs a substudy column")])
        by_pid = {}
        for p, t, s in zip(rs.participant_id.tolist(), rs.episode.tolist(), source.tolist()):
            by_pid.setdefault(p, {})[t] = s
        vals = []
        for p, t in zip(rs.participant_id.tolist(), rs.episode.tolist()):
            hist = by_pid[p]
            if t == 1:
                vals.append(NO_HISTORY)
            else:
                vals.append("+".join(str(hist[u]) for u in range(1, t)))
        arr = np.array(vals, dtype=object)
        if c.is_z:
            z[c.name] = arr
        if c.is_x:
            x[c.name] = arr
            x_types[c.name] = "categorical"
    return RecordSet(rs.participant_id, rs.episode, rs.arm, rs.outcome, z, x, x_types,
                     rs.arm_set, rs.substudy)


def load_records(data_path, schema_path, arm_set=None) -> RecordSet:
    schema = Schema.load(schema_path)
    with open(data_path, newline="") as fh:
        return parse_records(fh, schema, arm_set=arm_set)


def write_records(rs: RecordSet, stream, schema: Schema | None = None):
    """Write ``rs`` as CSV; derived columns are omitted (they are recomputed on parse)."""
    roles = dict(schema.roles) if schema else {r: r for r in REQUIRED_ROLES}
    if schema is None and rs.substudy is not None:
        roles["substudy"] = "substudy"
    derived = {c.name for c in schema.columns if c.derived} if schema else set()
    if schema is not None:
        names = [c.name for c in schema.columns if not c.derived]
    else:
        names = sorted(set(rs.z) | set(rs.x))
    header = [roles["participant_id"], roles["episode"], roles["arm"], roles["outcome"]]
    if "substudy" in roles:
        header.append(roles["substudy"])
    header += names
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(header)
    for r in range(len(rs)):
        y = rs.outcome[r]
        row = [rs.participant_id[r], int(rs.episode[r]), rs.arm[r], "NA" if math.isnan(y) else repr(float(y))]
        if "substudy" in roles:
            s = rs.substudy[r] if rs.substudy is not None else None
            row.append("NA" if s is None else s)
        for name in names:
            if name in derived:
                continue
            if name in rs.x and rs.x_types.get(name) == "numeric":
                v = rs.x[name][r]
                row.append("NA" if math.isnan(v) else repr(float(v)))
            elif name in rs.z:
                row.append(rs.z[name][r])
            else:
                v = rs.x[name][r]
                row.append("NA" if v is None else v)
        w.writerow(row)


def schema_for(rs: RecordSet, derived: Mapping[str, str] | None = None) -> Schema:
    """Build a Schema describing ``rs`` (used for round-tripping generated data)."""
    derived = dict(derived or {})
    roles = {r: r for r in REQUIRED_ROLES}
    if rs.substudy is not None:
        roles["substudy"] = "substudy"
    cols = []
    for name in sorted(set(rs.z) | set(rs.x)):
        in_z, in_x = name in rs.z, name in rs.x
        role = "both" if in_z and in_x else ("z" if in_z else "x")
        ctype = rs.x_types.get(name, "categorical") if in_x else "categorical"
        cols.append(ColumnSpec(name, role, ctype, derived.get(name)))
    return Schema(roles, tuple(cols))


def apply_missingness_policy(rs: RecordSet, policy: str = "complete-case-record"):
    """Drop (or refuse) records with a missing outcome.

    Dropping episode t of a participant also drops that participant's later
    episodes so every history stays a gap-free prefix.
    """
    missing = np.isnan(rs.outcome)
    if policy == "fail":
        if missing.any():
            raise ValidationError([(_loc(rs, r), "missing outcome") for r in np.flatnonzero(missing)])
        return rs, ValidationReport()
    if policy != "complete-case-record":
        raise ValueError(f"unknown missingness policy {policy!r}")
    if not missing.any():
        return rs, ValidationReport()
    first_missing = np.full(rs.n, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(first_missing, rs.participant_codes[missing], rs.episode[missing])
    drop = rs.episode >= first_missing[rs.participant_codes]
    warnings = tuple(
        (_loc(rs, r), "missing outcome" if missing[r] else "dropped: earlier episode missing")
        for r in np.flatnonzero(drop)
    )
    kept = rs.take(~drop)
    return kept, ValidationReport(warnings=warnings, dropped_count=int(drop.sum()))


def episode_slice(rs: RecordSet, t: int) -> RecordSet:
    """Records with episode == t (possibly empty)."""
    if t < 1:
        raise ValueError("episode must be >= 1")
    return rs.take(rs.episode == t)
