"""Known randomisation mechanism, ECE membership and post-strata."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Mapping

import numpy as np

from .errors import ParseError, SchemeError

ANY = "any"


@dataclass(frozen=True)
class SchemeRow:
    episode: int | None  # None matches every episode
    z: tuple[tuple[str, str], ...]  # wildcard entries are omitted
    p: tuple[float, ...]  # aligned with AssignmentScheme.arm_set
    label: str = ""

    def matches(self, z: Mapping[str, str], t: int) -> bool:
        if self.episode is not None and self.episode != t:
            return False
        return all(z.get(name) == level for name, level in self.z)


@dataclass(frozen=True, eq=False)
class AssignmentScheme:
    """Table of assignment probabilities keyed by (episode, z-pattern)."""

    arm_set: tuple[str, ...]
    rows: tuple[SchemeRow, ...]
    _lookup: dict = field(default_factory=dict, repr=False)

    @property
    def z_names(self) -> tuple[str, ...]:
        return tuple(sorted({name for row in self.rows for name, _ in row.z}))

    def arm_index(self, arm) -> int:
        try:
            return self.arm_set.index(str(arm))
        except ValueError:
            raise SchemeError(f"arm {arm!r} not in scheme arms {list(self.arm_set)}") from None

    def match(self, z: Mapping[str, str], t: int) -> SchemeRow:
        hits = [row for row in self.rows if row.matches(z, t)]
        if not hits:
            raise SchemeError(f"uncovered z-pattern at episode {t}: {dict(z)}")
        if len(hits) > 1:
            labels = ", ".join(h.label for h in hits)
            raise SchemeError(f"ambiguous scheme at episode {t} for {dict(z)}: rows {labels}")
        return hits[0]

    def probabilities(self, z: Mapping[str, str], t: int) -> tuple[float, ...]:
        key = (t,) + tuple(z.get(name) for name in self.z_names)
        hit = self._lookup.get(key)
        if hit is None:
            hit = self.match(z, t).p
            self._lookup[key] = hit
        return hit

    def prob_matrix(self, z_columns: Mapping[str, np.ndarray], episode: np.ndarray) -> np.ndarray:
        """Probability of every arm for each row; shape (rows, J).

        ``z_columns`` maps z-names to per-row level arrays.
        """
        names = self.z_names
        missing = [name for name in names if name not in z_columns]
        if missing:
            raise SchemeError(f"data lacks z columns required by the scheme: {missing}")
        episode = np.asarray(episode)
        out = np.empty((len(episode), len(self.arm_set)))
        if len(episode) == 0:
            return out
        # one lookup per distinct (episode, z) combination
        ep_levels, key = np.unique(episode.astype(np.int64), return_inverse=True)
        key = key.reshape(-1).astype(np.int64)
        levels = []
        for name in names:
            col = np.asarray(z_columns[name]).tolist()
            index = {v: i for i, v in enumerate(dict.fromkeys(col))}
            levels.append(list(index))
            key = key * len(index) + np.fromiter(map(index.__getitem__, col), dtype=np.int64, count=len(col))
        combos, inv = np.unique(key, return_inverse=True)
        table = []
        for c in combos.tolist():
            z = {}
            for name, lv in zip(reversed(names), reversed(levels)):
                c, r = divmod(c, len(lv))
                z[name] = str(lv[r])
            table.append(self.probabilities(z, int(ep_levels[c])))
        table = np.array(table)
        out[:] = table[inv.reshape(-1)]
        return out


def _parse_prob(value, where):
    if isinstance(value, bool):
        raise ParseError(f"{where}: probability must be a decimal string")
    try:
        d = Decimal(str(value).strip())
    except InvalidOperation:
        raise ParseError(f"{where}: {value!r} is not a decimal") from None
    if not d.is_finite() or d < 0 or d > 1:
        raise ParseError(f"{where}: probability {value!r} outside [0, 1]")
    return d


def scheme_from_dict(d) -> AssignmentScheme:
    try:
        arms = tuple(str(a) for a in d["arms"])
        raw_rows = d["rows"]
    except (KeyError, TypeError):
        raise ParseError("scheme needs 'arms' and 'rows'") from None
    if len(set(arms)) != len(arms) or not arms:
        raise ParseError("scheme arms must be non-empty and distinct")
    rows = []
    for i, raw in enumerate(raw_rows):
        label = raw.get("label", f"row {i + 1}")
        ep = raw.get("episode", ANY)
        if ep == ANY:
            ep = None
        elif not isinstance(ep, int) or isinstance(ep, bool) or ep < 1:
            raise ParseError(f"{label}: episode must be a positive integer or 'any'")
        z = tuple(sorted((str(k), str(v).strip()) for k, v in raw.get("z", {}).items()
                         if str(v).strip() != ANY))
        probs = raw.get("p", {})
        unknown = set(map(str, probs)) - set(arms)
        if unknown:
            raise ParseError(f"{label}: unknown arms {sorted(unknown)}")
        dec = [(_parse_prob(probs[a], f"{label} arm {a}") if a in probs else Decimal(0)) for a in arms]
        total = sum(dec, Decimal(0))
        if total != 1:
            raise SchemeError(f"{label}: probabilities {[str(x) for x in dec]} do not sum to 1 (sum {total})")
        rows.append(SchemeRow(ep, z, tuple(float(x) for x in dec), label))
    return AssignmentScheme(arms, tuple(rows))


def parse_scheme(text: str) -> AssignmentScheme:
    """Parse a JSON scheme document (see README for the format)."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"scheme JSON: {exc}") from exc
    return scheme_from_dict(d)


def load_scheme(path) -> AssignmentScheme:
    with open(path) as fh:
        return parse_scheme(fh.read())


def scheme_to_dict(scheme: AssignmentScheme) -> dict:
    rows = []
    for row in scheme.rows:
        rows.append({
            "label": row.label,
            "episode": ANY if row.episode is None else row.episode,
            "z": dict(row.z),
            "p": {a: repr(p) for a, p in zip(scheme.arm_set, row.p)},
        })
    return {"arms": list(scheme.arm_set), "rows": rows}


def assignment_prob(scheme: AssignmentScheme, z: Mapping[str, str], t: int, arm) -> float:
    return scheme.probabilities(z, t)[scheme.arm_index(arm)]


def check_coverage(scheme: AssignmentScheme, rs) -> list[tuple[str, str]]:
    """Every record's (episode, z) must hit exactly one row and its arm must be possible."""
    errors = []
    bad_arms = set(rs.arm_set) - set(scheme.arm_set)
    if bad_arms:
        errors.append(("arms", f"data arms {sorted(bad_arms)} not declared by the scheme"))
        return errors
    names = scheme.z_names
    missing = [name for name in names if name not in rs.z]
    if missing:
        return [("z", f"data lacks z columns required by the scheme: {missing}")]
    seen = {}
    for r, key in enumerate(zip(rs.episode.tolist(), *[rs.z[n].tolist() for n in names])):
        if key in seen:
            p = seen[key]
        else:
            try:
                p = scheme.probabilities(dict(zip(names, key[1:])), key[0])
            except SchemeError as exc:
                p = exc
            seen[key] = p
        loc = f"participant {rs.participant_id[r]} episode {rs.episode[r]}"
        if isinstance(p, SchemeError):
            errors.append((loc, str(p)))
        elif p[scheme.arm_index(rs.arm[r])] == 0:
            errors.append((loc, f"assigned arm {rs.arm[r]} has probability 0 under the scheme"))
    return errors


@dataclass(frozen=True)
class EcePopulation:
    """Person-episodes at episode t randomisable to both j and k."""

    j: str
    k: str
    t: int
    members: np.ndarray  # row indices into the RecordSet
    pi_j: np.ndarray
    pi_k: np.ndarray

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Stratum:
    h: int
    pi_j: float
    pi_k: float
    members: np.ndarray  # row indices into the RecordSet


@dataclass(frozen=True)
class StrataPartition:
    strata: tuple[Stratum, ...]
    codes: np.ndarray  # stratum id per population member, aligned with pop.members

    @property
    def H(self) -> int:
        return len(self.strata)


def record_probs(scheme: AssignmentScheme, rs) -> np.ndarray:
    """Per-record arm probabilities, cached on the (immutable) RecordSet."""
    key = ("probs", id(scheme))
    hit = rs._cache.get(key)
    if hit is None or hit[0] is not scheme:
        hit = (scheme, scheme.prob_matrix(rs.z, rs.episode))
        rs._cache[key] = hit
    return hit[1]


def ece_population(scheme: AssignmentScheme, rs, j, k, t: int) -> EcePopulation:
    j, k = str(j), str(k)
    if j == k:
        raise ValueError("comparison arms must differ")
    ij, ik = scheme.arm_index(j), scheme.arm_index(k)
    rows = np.flatnonzero(rs.episode == t)
    probs = record_probs(scheme, rs)[rows]
    keep = (probs[:, ij] > 0) & (probs[:, ik] > 0)
    return EcePopulation(j, k, t, rows[keep], probs[keep, ij], probs[keep, ik])


def derive_strata(scheme: AssignmentScheme, pop: EcePopulation) -> StrataPartition:
    """Group members by exact equality of (pi_j, pi_k); ids follow sorted pair order."""
    pairs = np.column_stack([pop.pi_j, pop.pi_k])
    uniq, codes = np.unique(pairs, axis=0, return_inverse=True)
    codes = codes.reshape(-1)
    strata = tuple(
        Stratum(h, float(uniq[h, 0]), float(uniq[h, 1]), pop.members[codes == h])
        for h in range(len(uniq))
    )
    return StrataPartition(strata, codes)
