"""Synthetic two-substudy trials with re-enrollment, truth oracle and replication harness.

The generator follows a two-substudy design: substudy "HS" randomises arms
1 and 2, substudy "DA" arms 1 and 3. Participants in the "both" subtype
(``x_cat == 2``) are split between substudies by enrollment window and may
re-enroll once in the alternate substudy.

Randomness comes from counter-based Philox streams keyed by
``(seed, rep, purpose)``, so a replication is reproducible on its own and
results never depend on how replications are scheduled across workers.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, EstimationError
from .estimators import ECE_METHODS, SUBSTUDY_METHODS
from .inference import analyze
from .scheme import AssignmentScheme, SchemeRow
from .trial_data import NO_HISTORY, RecordSet

ARMS = ("1", "2", "3")
SUBSTUDIES = ("HS", "DA")

DEFAULT_COEFFICIENTS = {
    # key: arm at episode 1, or "episode-1 arm,episode-2 arm"; value: (beta, delta)
    "1": (0.2, 0.0), "2": (-1.0, -2.0), "3": (-0.5, 2.0),
    "1,1": (0.2, 0.0), "1,2": (-0.4, -1.5), "1,3": (-0.15, 1.5),
    "2,1": (-0.4, -1.0), "2,3": (-0.75, 1.0),
    "3,1": (-0.15, 0.5), "3,2": (-0.75, -0.5),
}

_PURPOSE = {"covariates": 0, "x_c": 1, "u": 2, "eps1": 3, "eps2": 4, "assign": 5, "reenroll": 6, "v": 7}
_TRIAL, _ORACLE = 0, 1


@dataclass(frozen=True)
class SimConfig:
    """Generator constants; every field can be overridden."""

    n: int = 600
    scenario: int = 1
    seed: int = 20240917
    reps: int = 1000
    p_binary: float = 0.5
    p_cat: tuple[float, float, float] = (0.03, 0.24, 0.73)
    log_means: tuple[float, float, float] = (3.25, 3.1, 3.0)
    log_sd: float = 0.4
    log_scale: str = "sd"  # "sd": log_sd is the SD of log x; "variance": it is the variance
    truncation: tuple[float, float] = (12.0, 70.0)
    truncation_method: str = "reject"  # or "clamp"
    p_window: tuple[float, float] = (5 / 6, 1 / 6)
    hs_share: tuple[float, float] = (0.5, 0.75)  # P(substudy HS | both subtypes, window 1 / 2)
    reenroll_rate: float = 0.58
    gamma: float = -0.39
    b_coef: float = 0.5
    c_coef: float = 0.1
    v_range: tuple[float, float] = (0.0, 1.0)
    coefficients: dict = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    comparisons: tuple[tuple[str, str], ...] = (("2", "1"), ("3", "1"))
    covariates: tuple[str, ...] = ("x_c", "x_b")

    def __post_init__(self):
        errors = []
        if int(self.n) < 1:
            errors.append("n must be >= 1")
        if int(self.reps) < 1:
            errors.append("reps must be >= 1")
        if self.scenario not in (1, 2):
            errors.append("scenario must be 1 or 2")
        for name in ("p_binary", "reenroll_rate"):
            if not 0 <= getattr(self, name) <= 1:
                errors.append(f"{name} must lie in [0, 1]")
        for name in ("p_cat", "p_window"):
            p = getattr(self, name)
            if any(x < 0 for x in p) or abs(sum(p) - 1) > 1e-12:
                errors.append(f"{name} must be non-negative and sum to 1")
        if any(not 0 <= s <= 1 for s in self.hs_share):
            errors.append("hs_share entries must lie in [0, 1]")
        if self.log_scale not in ("sd", "variance"):
            errors.append("log_scale must be 'sd' or 'variance'")
        if self.truncation_method not in ("reject", "clamp"):
            errors.append("truncation_method must be 'reject' or 'clamp'")
        lo, hi = self.truncation
        if not 0 < lo < hi:
            errors.append("truncation must satisfy 0 < low < high")
        if self.log_sd <= 0:
            errors.append("log_sd must be positive")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def sigma(self) -> float:
        return self.log_sd if self.log_scale == "sd" else math.sqrt(self.log_sd)

    def coef(self, key) -> tuple[float, float] | None:
        v = self.coefficients.get(key)
        return None if v is None else (float(v[0]), float(v[1]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["comparisons"] = [list(c) for c in self.comparisons]
        d["coefficients"] = {k: list(v) for k, v in self.coefficients.items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k == "comparisons":
                v = tuple((str(a), str(b)) for a, b in v)
            elif k == "coefficients":
                v = {str(key): (float(b), float(dl)) for key, (b, dl) in v.items()}
            elif k == "covariates":
                v = tuple(v)
            elif isinstance(v, list):
                v = tuple(v)
            kw[k] = v
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, **kw) -> "SimConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _rng(seed, key, purpose) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(key) + (_PURPOSE[purpose],))
    return np.random.Generator(np.random.Philox(ss))


def substudy_arms(substudy) -> tuple[str, str]:
    """(control, active) arms of a substudy."""
    return ("1", "2") if substudy == "HS" else ("1", "3")


def simplify_scheme(cfg: SimConfig | None = None) -> AssignmentScheme:
    """Assignment probabilities of the generator as an AssignmentScheme."""
    cfg = cfg or SimConfig()
    rows = [
        SchemeRow(1, (("DA", "0"), ("HS", "1")), (0.5, 0.5, 0.0), "HS only"),
        SchemeRow(1, (("DA", "1"), ("HS", "0")), (0.5, 0.0, 0.5), "DA only"),
    ]
    for w, share in enumerate(cfg.hs_share, start=1):
        rows.append(SchemeRow(1, (("DA", "1"), ("EW", str(w)), ("HS", "1")),
                              (0.5, share / 2, (1 - share) / 2), f"both, window {w}"))
    rows += [
        SchemeRow(2, (("prior_substudy", "DA"),), (0.5, 0.5, 0.0), "re-enrolled after DA"),
        SchemeRow(2, (("prior_substudy", "HS"),), (0.5, 0.0, 0.5), "re-enrolled after HS"),
    ]
    return AssignmentScheme(ARMS, tuple(rows))


def _log_normal(cfg, cat, g):
    mu = np.asarray(cfg.log_means, dtype=float)[cat]
    x = np.exp(mu + cfg.sigma * g.standard_normal(len(cat)))
    lo, hi = cfg.truncation
    if cfg.truncation_method == "clamp":
        return np.clip(x, lo, hi)
    bad = np.flatnonzero((x < lo) | (x > hi))
    while bad.size:
        x[bad] = np.exp(mu[bad] + cfg.sigma * g.standard_normal(bad.size))
        bad = bad[(x[bad] < lo) | (x[bad] > hi)]
    return x


def _draw(cfg: SimConfig, n: int, key) -> dict:
    """Participant-level draws of the full mechanism, including every potential outcome."""
    seed = cfg.seed
    g = _rng(seed, key, "covariates")
    xb = (g.random(n) < cfg.p_binary).astype(float)
    cat = g.choice(3, size=n, p=np.asarray(cfg.p_cat))
    ew = np.where(g.random(n) < cfg.p_window[0], 1, 2)
    xc1 = _log_normal(cfg, cat, _rng(seed, key, "x_c"))
    u = _rng(seed, key, "u").standard_normal(n)
    eps1 = _rng(seed, key, "eps1").standard_normal((n, 3))
    eps2 = _rng(seed, key, "eps2").standard_normal((n, 3))

    ga = _rng(seed, key, "assign")
    r_sub, r_arm1, r_arm2 = ga.random(n), ga.random(n), ga.random(n)
    share = np.asarray(cfg.hs_share)[ew - 1]
    s1_hs = (cat == 0) | ((cat == 2) & (r_sub < share))
    a1 = np.where(r_arm1 < 0.5, 1, np.where(s1_hs, 2, 3))

    eligible = cat == 2
    gr = _rng(seed, key, "reenroll")
    if cfg.scenario == 1:
        idx = np.flatnonzero(eligible)
        chosen = idx[gr.permutation(idx.size)[:int(round(cfg.reenroll_rate * idx.size))]]
        re = np.zeros(n, dtype=bool)
        re[chosen] = True
    else:
        p = 1.0 / (1.0 + np.exp(cfg.gamma + u))
        re = eligible & (gr.random(n) < p)
    lo, hi = cfg.v_range
    xc2 = xc1 + _rng(seed, key, "v").uniform(lo, hi, n)
    a2 = np.where(r_arm2 < 0.5, 1, np.where(s1_hs, 3, 2))

    base1 = cfg.b_coef * xb + cfg.c_coef * xc1 + u
    base2 = cfg.b_coef * xb + cfg.c_coef * xc2 + u
    y1 = np.empty((n, 3))
    y2 = np.full((n, 3), np.nan)
    for a in (1, 2, 3):
        b, d = cfg.coef(str(a))
        y1[:, a - 1] = base1 + b * cat + d + eps1[:, a - 1]
        for prior in (1, 2, 3):
            c = cfg.coef(f"{prior},{a}")
            if c is None:
                continue
            m = a1 == prior
            y2[m, a - 1] = base2[m] + c[0] * cat[m] + c[1] + eps2[m, a - 1]
    return dict(xb=xb, cat=cat, ew=ew, xc1=xc1, xc2=xc2, u=u, s1_hs=s1_hs, a1=a1, a2=a2,
                eligible=eligible, reenrolled=re, y1=y1, y2=y2)


@dataclass(frozen=True, eq=False)
class LatentLog:
    """Unobserved quantities behind a generated trial.

    Participant-level arrays are indexed by participant number - 1;
    ``potential`` is aligned with the RecordSet rows (columns: arms 1..3,
    NaN where a history-indexed outcome is not defined).
    """

    u: np.ndarray
    x_cat: np.ndarray
    eligible: np.ndarray
    reenrolled: np.ndarray
    potential: np.ndarray


@dataclass(frozen=True, eq=False)
class SimTrial:
    records: RecordSet
    latent: LatentLog


def generate_trial(cfg: SimConfig, rep_index: int = 0) -> SimTrial:
    """One synthetic trial; identical for identical (cfg, rep_index)."""
    n = int(cfg.n)
    d = _draw(cfg, n, (_TRIAL, int(rep_index)))
    re = np.flatnonzero(d["reenrolled"])
    if np.isnan(d["y2"][re, d["a2"][re] - 1]).any():
        raise ConfigError("coefficient table lacks an episode-2 pair reachable by the design")
    pidx = np.concatenate([np.arange(n), re])
    ep = np.concatenate([np.ones(n, dtype=np.int64), np.full(re.size, 2, dtype=np.int64)])
    order = np.lexsort((ep, pidx))
    pidx, ep = pidx[order], ep[order]
    second = ep == 2

    sub1 = np.where(d["s1_hs"], "HS", "DA").astype(object)
    sub2 = np.where(d["s1_hs"], "DA", "HS").astype(object)
    arm_i = np.where(second, d["a2"][pidx], d["a1"][pidx])
    potential = np.where(second[:, None], d["y2"][pidx], d["y1"][pidx])
    outcome = potential[np.arange(len(pidx)), arm_i - 1]
    cat = d["cat"][pidx]
    z = {
        "HS": np.where(cat != 1, "1", "0").astype(object),
        "DA": np.where(cat != 0, "1", "0").astype(object),
        "EW": d["ew"][pidx].astype(str).astype(object),
        "prior_substudy": np.where(second, sub1[pidx], NO_HISTORY).astype(object),
    }
    x = {
        "x_b": d["xb"][pidx],
        "x_c": np.where(second, d["xc2"][pidx], d["xc1"][pidx]),
        "x_cat": cat.astype(str).astype(object),
    }
    rs = RecordSet(
        participant_id=(pidx + 1).astype(str).astype(object),
        episode=ep,
        arm=arm_i.astype(str).astype(object),
        outcome=outcome,
        z=z,
        x=x,
        x_types={"x_b": "numeric", "x_c": "numeric", "x_cat": "categorical"},
        arm_set=ARMS,
        substudy=np.where(second, sub2[pidx], sub1[pidx]).astype(object),
    )
    latent = LatentLog(d["u"], d["cat"], d["eligible"], d["reenrolled"], potential)
    return SimTrial(rs, latent)


SCHEMA_DICT = {
    "roles": {"participant_id": "participant_id", "episode": "episode", "arm": "arm",
              "outcome": "outcome", "substudy": "substudy"},
    "columns": {
        "HS": {"role": "z", "type": "categorical"},
        "DA": {"role": "z", "type": "categorical"},
        "EW": {"role": "z", "type": "categorical"},
        "prior_substudy": {"role": "z", "type": "categorical", "derived": "prior_substudy"},
        "x_b": {"role": "x", "type": "numeric"},
        "x_c": {"role": "x", "type": "numeric"},
        "x_cat": {"role": "x", "type": "categorical"},
    },
}


# ---------------------------------------------------------------------------
# truth oracle

SCOPES = ("all", "t=1", "t=2", "substudy")


@dataclass(frozen=True)
class TruthTable:
    """Ground-truth contrasts keyed by (comparison label, scope), with MC standard errors."""

    values: dict
    se: dict
    draws: int

    def get(self, comparison, scope="all") -> float:
        return self.values[(comparison, scope)]

    def to_dict(self) -> dict:
        out = {"draws": self.draws, "truth": {}, "se": {}}
        for (comp, scope), v in self.values.items():
            out["truth"].setdefault(comp, {})[scope] = v
            out["se"].setdefault(comp, {})[scope] = self.se.get((comp, scope))
        return out

    @classmethod
    def from_dict(cls, d) -> "TruthTable":
        try:
            values = {(c, s): float(v) for c, sc in d["truth"].items() for s, v in sc.items()}
        except (KeyError, TypeError, ValueError, AttributeError):
            raise ConfigError("truth file needs {'truth': {comparison: {scope: value}}}") from None
        se = {(c, s): (math.nan if v is None else float(v))
              for c, sc in d.get("se", {}).items() for s, v in sc.items()}
        return cls(values, se, int(d.get("draws", 0)))


def _oracle_chunk(cfg: SimConfig, m: int, chunk: int) -> dict:
    d = _draw(cfg, m, (_ORACLE, chunk))
    scheme = simplify_scheme(cfg)
    cat, re = d["cat"], d["reenrolled"]
    z1 = {"HS": np.where(cat != 1, "1", "0"), "DA": np.where(cat != 0, "1", "0"),
          "EW": d["ew"].astype(str), "prior_substudy": np.full(m, NO_HISTORY)}
    z2 = dict(z1, prior_substudy=np.where(d["s1_hs"], "HS", "DA"))
    p1 = scheme.prob_matrix(z1, np.ones(m, dtype=np.int64))
    p2 = scheme.prob_matrix(z2, np.full(m, 2, dtype=np.int64))
    s1 = np.where(d["s1_hs"], "HS", "DA")
    s2 = np.where(d["s1_hs"], "DA", "HS")
    out = {}
    for j, k in cfg.comparisons:
        ij, ik = ARMS.index(j), ARMS.index(k)
        m1 = (p1[:, ij] > 0) & (p1[:, ik] > 0)
        m2 = re & (p2[:, ij] > 0) & (p2[:, ik] > 0)
        d1 = d["y1"][:, ij] - d["y1"][:, ik]
        d2 = d["y2"][:, ij] - d["y2"][:, ik]
        if np.isnan(d2[m2]).any():
            raise ConfigError(f"coefficient table lacks an episode-2 pair needed for {j}v{k}")
        c1 = np.where(m1, d1, 0.0)
        c2 = np.where(m2, d2, 0.0)
        label = f"{j}v{k}"
        parts = {"all": (c1 + c2, m1 + m2.astype(float)), "t=1": (c1, m1.astype(float)),
                 "t=2": (c2, m2.astype(float))}
        sub = [s for s in SUBSTUDIES if set(substudy_arms(s)) == {j, k}]
        if sub:
            in1, in2 = s1 == sub[0], re & (s2 == sub[0])
            parts["substudy"] = (np.where(in1, d1, 0.0) + np.where(in2, d2, 0.0),
                                 in1 + in2.astype(float))
        for scope, (num, cnt) in parts.items():
            out[(label, scope)] = np.array([num.sum(), cnt.sum(), num @ num, cnt @ cnt, num @ cnt, m])
    return out


def truth_oracle(cfg: SimConfig, draws: int = 10**7, chunk_size: int = 10**6, workers: int = 1,
                 allow_small: bool = False) -> TruthTable:
    """Monte Carlo integration of the estimands over ``draws`` simulated participants.

    Each truth is the ratio of expected per-participant contrast sums to
    expected per-participant ECE membership counts, which weights episode
    effects by ECE population size. The MC standard error uses the
    delta method for a ratio of means.
    """
    draws = int(draws)
    if draws < 10**6 and not allow_small:
        raise ConfigError("truth oracle needs draws >= 1e6")
    if draws < 2:
        raise ConfigError("truth oracle needs at least 2 draws")
    sizes = [min(chunk_size, draws - s) for s in range(0, draws, chunk_size)]
    jobs = list(enumerate(sizes))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_oracle_job, [(cfg, m, c) for c, m in jobs]))
    else:
        parts = [_oracle_chunk(cfg, m, c) for c, m in jobs]
    values, se = {}, {}
    for key in parts[0]:
        s_num, s_cnt, s_nn, s_cc, s_nc, N = sum(p[key] for p in parts)
        if s_cnt == 0:
            values[key], se[key] = math.nan, math.nan
            continue
        theta = s_num / s_cnt
        var_d = max((s_nn - 2 * theta * s_nc + theta**2 * s_cc) / N, 0.0)
        values[key] = float(theta)
        se[key] = float(math.sqrt(var_d / N) / (s_cnt / N))
    return TruthTable(values, se, draws)


def _oracle_job(args):
    return _oracle_chunk(*args)


# ---------------------------------------------------------------------------
# replication harness

DEFAULT_METHODS = (ECE_METHODS + tuple(f"{m}[t=1]" for m in ECE_METHODS) + SUBSTUDY_METHODS)


def _parse_method(name):
    """'aipw' -> ('aipw', None); 'aipw[t=1]' -> ('aipw', (1,))."""
    if name.endswith("]") and "[t=" in name:
        base, t = name[:-1].split("[t=")
        return base, (int(t),)
    return name, None


def _scope(method):
    base, eps = _parse_method(method)
    if base in SUBSTUDY_METHODS:
        return "substudy"
    return "all" if eps is None else f"t={eps[0]}"


def check_methods(methods):
    for m in methods:
        base, _ = _parse_method(m)
        if base not in ECE_METHODS + SUBSTUDY_METHODS:
            raise ConfigError(f"unknown method {m!r}")


def evaluate_cell(rs, scheme, method, j, k, covariates=("x_c", "x_b")):
    """(estimate, se) of one method x comparison on one dataset."""
    base, eps = _parse_method(method)
    sub = None
    if base in SUBSTUDY_METHODS:
        subs = [s for s in SUBSTUDIES if set(substudy_arms(s)) == {j, k}]
        if not subs:
            raise EstimationError(f"no substudy randomises arms {j} and {k}")
        sub = subs[0]
    cov = covariates if base in ("aipw", "aps", "ancova", "anhecova") else ()
    est, _, var = analyze(base, rs, scheme, j, k, episodes=eps, covariates=cov, substudy=sub)
    return est.value, var.se


def _rep_block(args):
    cfg, reps, cells = args
    scheme = simplify_scheme(cfg)
    out = np.full((len(reps), len(cells), 2), np.nan)
    for r, rep in enumerate(reps):
        rs = generate_trial(cfg, rep).records
        for c, (method, (j, k)) in enumerate(cells):
            try:
                out[r, c] = evaluate_cell(rs, scheme, method, j, k, cfg.covariates)
            except EstimationError:
                pass
    return out


@dataclass(frozen=True)
class CellSummary:
    method: str
    comparison: str
    truth: float
    bias: float
    sd: float
    mean_se: float
    cp: float
    reps_used: int
    failures: int

    @property
    def sd_defined(self) -> bool:
        return self.reps_used >= 2


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    """Bias, SD, mean SE and coverage per method x comparison cell."""

    config: SimConfig
    cells: tuple[CellSummary, ...]
    truth: TruthTable | None
    reps: int
    level: float
    estimates: np.ndarray  # (reps, cells, 2): estimate and SE, NaN on failure

    def cell(self, method, comparison) -> CellSummary:
        for c in self.cells:
            if c.method == method and c.comparison == comparison:
                return c
        raise KeyError((method, comparison))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "comparison", "truth", "bias", "sd", "mean_se", "cp", "reps_used"])
        for c in self.cells:
            w.writerow([c.method, c.comparison] + [_fmt(v) for v in (c.truth, c.bias, c.sd, c.mean_se, c.cp)]
                       + [c.reps_used])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'method':<16}{'comparison':<12}{'truth':>9}{'bias':>9}{'SD':>8}{'SE':>8}{'CP':>8}{'used':>7}"
        lines = [head, "-" * len(head)]
        for c in self.cells:
            lines.append(f"{c.method:<16}{c.comparison:<12}{c.truth:>9.3f}{c.bias:>9.3f}{c.sd:>8.3f}"
                         f"{c.mean_se:>8.3f}{c.cp:>8.3f}{c.reps_used:>7d}")
        if any(not c.sd_defined for c in self.cells):
            lines.append("note: SD undefined for cells with fewer than 2 usable replications")
        fails = [c for c in self.cells if c.failures]
        for c in fails:
            lines.append(f"note: {c.method} {c.comparison}: {c.failures} replications failed and were excluded")
        return "\n".join(lines) + "\n"

    def replications_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "method", "comparison", "estimate", "se"])
        for r in range(self.estimates.shape[0]):
            for c, cell in enumerate(self.cells):
                e, s = self.estimates[r, c]
                w.writerow([r, cell.method, cell.comparison, _fmt(e), _fmt(s)])
        return buf.getvalue()


def _fmt(v):
    return "nan" if v is None or not math.isfinite(v) else repr(float(v))


def run_replications(cfg: SimConfig, methods=DEFAULT_METHODS, comparisons=None, truth: TruthTable | None = None,
                     workers: int = 1, level: float = 0.95) -> MonteCarloSummary:
    """Generate ``cfg.reps`` trials and summarise every method x comparison cell.

    Replication r always uses stream ``(cfg.seed, r)`` and results are
    reduced in replication order, so the summary is bit-identical for any
    worker count.
    """
    methods = tuple(methods)
    check_methods(methods)
    comparisons = tuple((str(j), str(k)) for j, k in (comparisons or cfg.comparisons))
    cells = [(m, jk) for jk in comparisons for m in methods]
    reps = list(range(int(cfg.reps)))
    workers = max(1, int(workers))
    if workers > 1 and len(reps) > 1:
        size = max(1, math.ceil(len(reps) / (workers * 4)))
        blocks = [reps[i:i + size] for i in range(0, len(reps), size)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_rep_block, [(cfg, b, cells) for b in blocks]))
        results = np.concatenate(parts, axis=0)
    else:
        results = _rep_block((cfg, reps, cells))
    z = NormalDist().inv_cdf((1 + level) / 2)
    out = []
    for c, (method, (j, k)) in enumerate(cells):
        est, se = results[:, c, 0], results[:, c, 1]
        ok = np.isfinite(est) & np.isfinite(se)
        used = int(ok.sum())
        label = f"{j}v{k}"
        t = truth.values.get((label, _scope(method)), math.nan) if truth is not None else math.nan
        if used:
            e, s = est[ok], se[ok]
            bias = float(np.mean(e) - t)
            sd = float(np.std(e, ddof=1)) if used > 1 else math.nan
            mean_se = float(np.mean(s))
            cp = float(np.mean((e - z * s <= t) & (t <= e + z * s))) if math.isfinite(t) else math.nan
        else:
            bias = sd = mean_se = cp = math.nan
        out.append(CellSummary(method, label, float(t), bias, sd, mean_se, cp, used, len(reps) - used))
    return MonteCarloSummary(cfg, tuple(out), truth, len(reps), level, results)
