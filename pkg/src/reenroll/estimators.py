"""Arm-mean estimators on entire-concurrently-eligible populations.

Every proposed estimator targets the per-episode added-effect arm mean
theta_jk: the |I_jkt|-weighted average over episodes of the mean potential
outcome under arm j in the episode-t ECE population of (j, k).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EstimationError, ValidationError
from .scheme import AssignmentScheme, EcePopulation, StrataPartition, derive_strata, ece_population
from .working_models import DesignMatrix, fit_ols, fit_working_model, make_encoder

ECE_METHODS = ("ipw", "sipw", "aipw", "ps", "aps")
SUBSTUDY_METHODS = ("anova", "ancova", "anhecova")
ADJUSTED = ("aipw", "aps")
STRATIFIED = ("ps", "aps")


@dataclass(frozen=True)
class EpisodeBlock:
    """Columns of one episode's ECE population, aligned with ``pop.members``."""

    pop: EcePopulation
    strata: StrataPartition
    pid: np.ndarray  # participant codes
    arm: np.ndarray
    y: np.ndarray

    @property
    def t(self):
        return self.pop.t

    @property
    def size(self):
        return self.pop.size

    def pi(self, a):
        return self.pop.pi_j if a == self.pop.j else self.pop.pi_k


@dataclass(frozen=True, eq=False)
class ComparisonFrame:
    j: str
    k: str
    episodes: tuple[int, ...]
    blocks: tuple[EpisodeBlock, ...]

    @property
    def n_jk(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def populations(self):
        return [b.pop for b in self.blocks]


def comparison_frame(rs, scheme: AssignmentScheme, j, k, episodes=None) -> ComparisonFrame:
    """ECE populations and strata for (j, k) over the requested episodes.

    Cached on the RecordSet, which is immutable.
    """
    j, k = str(j), str(k)
    if episodes is None:
        episodes = tuple(range(1, rs.max_episode + 1))
    else:
        episodes = tuple(sorted({int(t) for t in episodes}))
    key = ("frame", id(scheme), j, k, episodes)
    hit = rs._cache.get(key)
    if hit is not None and hit[0] is scheme:
        return hit[1]
    blocks = []
    for t in episodes:
        pop = ece_population(scheme, rs, j, k, t)
        if pop.size == 0:
            continue
        y = rs.outcome[pop.members]
        if np.isnan(y).any():
            raise EstimationError(
                f"missing outcomes in ECE population ({j},{k}) episode {t}; apply a missingness policy first")
        blocks.append(EpisodeBlock(pop, derive_strata(scheme, pop), rs.participant_codes[pop.members],
                                   rs.arm[pop.members], y))
    if not blocks:
        raise EstimationError(f"ECE population for ({j},{k}) is empty in episodes {list(episodes)}")
    frame = ComparisonFrame(j, k, episodes, tuple(blocks))
    rs._cache[key] = (scheme, frame)
    return frame


@dataclass(frozen=True)
class StratumCount:
    h: int
    pi_j: float
    pi_k: float
    n: int
    n_arm: int


@dataclass(frozen=True)
class EpisodeComponent:
    t: int
    size: int
    n_arm: int
    value: float
    strata: tuple[StratumCount, ...] = ()


@dataclass(frozen=True)
class ArmMeanEstimate:
    """Estimate of theta_jk (the arm-j mean on the (j, k) ECE populations)."""

    method: str
    j: str
    k: str
    episodes: tuple[int, ...]
    value: float
    components: tuple[EpisodeComponent, ...]
    n_jk: int
    model: object = None

    @property
    def n_person_episodes(self):
        return self.n_jk


@dataclass(frozen=True)
class ContrastEstimate:
    """theta_jk - theta_kj together with both arm means."""

    method: str
    jk: ArmMeanEstimate
    kj: ArmMeanEstimate
    value: float
    substudy: str | None = None
    options: dict = field(default_factory=dict)

    @property
    def j(self):
        return self.jk.j

    @property
    def k(self):
        return self.jk.k

    @property
    def label(self):
        return f"{self.j}v{self.k}"


def _stratum_counts(block, a, treated):
    H = block.strata.H
    n_h = np.bincount(block.strata.codes, minlength=H)
    n_ah = np.bincount(block.strata.codes[treated], minlength=H)
    return n_h, n_ah


def _check_strata(frame, block, a, n_ah):
    empty = np.flatnonzero(n_ah == 0)
    if empty.size:
        h = int(empty[0])
        s = block.strata.strata[h]
        raise EstimationError(
            f"empty-arm stratum: no arm-{a} members in (j={a}, k={_other(frame, a)}, t={block.t}, h={h}) "
            f"with pi=({s.pi_j}, {s.pi_k})")


def _other(frame, a):
    return frame.k if a == frame.j else frame.j


def _strata_report(block, n_h, n_ah, a, frame):
    out = []
    for s in block.strata.strata:
        pj, pk = (s.pi_j, s.pi_k) if a == frame.j else (s.pi_k, s.pi_j)
        out.append(StratumCount(s.h, pj, pk, int(n_h[s.h]), int(n_ah[s.h])))
    return tuple(out)


def _predict(model, rs, block):
    if model is None:
        raise EstimationError("adjusted estimator requires a working model")
    mu = np.asarray(model.predict(rs, block.t, block.pop.members), dtype=float)
    if mu.shape != (block.size,) or not np.all(np.isfinite(mu)):
        raise EstimationError(f"working model undefined for some members at episode {block.t}")
    return mu


def arm_mean(method: str, frame: ComparisonFrame, a, rs=None, model=None) -> ArmMeanEstimate:
    """Estimate the arm-``a`` mean on the frame's ECE populations."""
    a = str(a)
    if a not in (frame.j, frame.k):
        raise ValueError(f"arm {a} not part of comparison ({frame.j},{frame.k})")
    if method not in ECE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    n_jk = frame.n_jk
    comps = []
    total = 0.0
    denom = 0.0
    for b in frame.blocks:
        treated = b.arm == a
        n_a = int(treated.sum())
        p = b.pi(a)
        strata = ()
        if method in ("ipw", "sipw", "aipw"):
            w = treated / p
            if method == "aipw":
                mu = _predict(model, rs, b)
                num = np.sum(w * (b.y - mu) + mu)
            else:
                num = np.sum(w * b.y)
            total += num
            if method == "sipw":
                d = np.sum(w)
                denom += d
                comp = num / d if d > 0 else float("nan")
            else:
                comp = num / b.size
        else:
            n_h, n_ah = _stratum_counts(b, a, treated)
            _check_strata(frame, b, a, n_ah)
            resid = b.y
            mu_sum = 0.0
            if method == "aps":
                mu = _predict(model, rs, b)
                resid = b.y - mu
                mu_sum = np.sum(mu)
            s_h = np.bincount(b.strata.codes[treated], weights=resid[treated], minlength=b.strata.H)
            num = np.sum(n_h / n_ah * s_h) + mu_sum
            total += num
            comp = num / b.size
            strata = _strata_report(b, n_h, n_ah, a, frame)
        comps.append(EpisodeComponent(b.t, b.size, n_a, float(comp), strata))
    if method == "sipw":
        if denom <= 0:
            raise EstimationError(f"no treated units: arm {a} never assigned in ECE populations")
        value = total / denom
    else:
        value = total / n_jk
    return ArmMeanEstimate(method, a, _other(frame, a), frame.episodes, float(value), tuple(comps), n_jk,
                           model if method in ADJUSTED else None)


def estimate_ipw(rs, scheme, j, k, episodes=None) -> ArmMeanEstimate:
    return arm_mean("ipw", comparison_frame(rs, scheme, j, k, episodes), j)


def estimate_sipw(rs, scheme, j, k, episodes=None) -> ArmMeanEstimate:
    return arm_mean("sipw", comparison_frame(rs, scheme, j, k, episodes), j)


def estimate_aipw(rs, scheme, j, k, episodes=None, model=None) -> ArmMeanEstimate:
    """AIPW arm mean; ``model`` is any object with ``predict(rs, t, rows)``."""
    return arm_mean("aipw", comparison_frame(rs, scheme, j, k, episodes), j, rs=rs, model=model)


def estimate_ps(rs, scheme, j, k, episodes=None) -> ArmMeanEstimate:
    return arm_mean("ps", comparison_frame(rs, scheme, j, k, episodes), j)


def estimate_aps(rs, scheme, j, k, episodes=None, model=None) -> ArmMeanEstimate:
    return arm_mean("aps", comparison_frame(rs, scheme, j, k, episodes), j, rs=rs, model=model)


def estimate_contrast(method, rs, scheme, j, k, episodes=None, covariates: Sequence[str] = (),
                      pooling="per-episode", models=None, on_empty="error") -> ContrastEstimate:
    """theta_jk - theta_kj for one of the ECE methods.

    For ``aipw``/``aps`` the working models are fitted here (OLS on
    ``covariates``; intercept-only when empty) unless ``models`` supplies a
    ``(model_j, model_k)`` pair.
    """
    if method not in ECE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    frame = comparison_frame(rs, scheme, j, k, episodes)
    mj = mk = None
    if method in ADJUSTED:
        if models is not None:
            mj, mk = models
        else:
            pops = frame.populations
            mj = fit_working_model(rs, pops, frame.j, covariates, pooling, on_empty)
            mk = fit_working_model(rs, pops, frame.k, covariates, pooling, on_empty)
    jk = arm_mean(method, frame, frame.j, rs, mj)
    kj = arm_mean(method, frame, frame.k, rs, mk)
    opts = {"episodes": frame.episodes, "covariates": tuple(covariates), "pooling": pooling}
    return ContrastEstimate(method, jk, kj, jk.value - kj.value, options=opts)


# ---------------------------------------------------------------------------
# substudy-specific comparators


@dataclass(frozen=True, eq=False)
class SubstudyData:
    rows: np.ndarray
    treated: np.ndarray  # bool, A == treated arm
    y: np.ndarray
    mu_t: np.ndarray  # fitted arm predictions for every row
    mu_c: np.ndarray


def _substudy_rows(rs, substudy, treated, control):
    if rs.substudy is None:
        raise ValidationError([("substudy", "data has no substudy column")])
    rows = np.flatnonzero((rs.substudy == substudy) & np.isin(rs.arm, [treated, control]))
    pids = rs.participant_id[rows]
    uniq, counts = np.unique(pids, return_counts=True)
    if (counts > 1).any():
        raise ValidationError([(f"participant {p}", f"appears more than once in substudy {substudy}")
                               for p in uniq[counts > 1]])
    if np.isnan(rs.outcome[rows]).any():
        raise EstimationError(f"missing outcomes in substudy {substudy}; apply a missingness policy first")
    for a in (treated, control):
        if not np.any(rs.arm[rows] == a):
            raise EstimationError(f"empty arm {a} in substudy {substudy}")
    return rows


def substudy_data(kind, rs, substudy, treated, control, covariates=()) -> SubstudyData:
    treated, control = str(treated), str(control)
    rows = _substudy_rows(rs, substudy, treated, control)
    is_t = rs.arm[rows] == treated
    y = rs.outcome[rows]
    covariates = tuple(covariates) if kind != "anova" else ()
    enc = make_encoder(rs, rows, covariates)
    X = enc.transform(rs, rows).values
    if kind == "ancova":
        # common slopes: regress on [treated, control] indicators + covariates
        D = np.column_stack([is_t, ~is_t, X[:, 1:]]).astype(float)
        fit = fit_ols(DesignMatrix(D, ("treated", "control") + enc.columns[1:]), y)
        slope = fit.coef[2:] @ X[:, 1:].T if X.shape[1] > 1 else np.zeros(len(rows))
        mu_t = fit.coef[0] + slope
        mu_c = fit.coef[1] + slope
    else:
        Xd = DesignMatrix(X, enc.columns)
        ft = fit_ols(DesignMatrix(X[is_t], enc.columns), y[is_t])
        fc = fit_ols(DesignMatrix(X[~is_t], enc.columns), y[~is_t])
        mu_t, mu_c = ft.predict(Xd), fc.predict(Xd)
    return SubstudyData(rows, is_t, y, mu_t, mu_c)


def substudy_comparator(kind, rs, substudy, treated, control, covariates=()) -> ContrastEstimate:
    """Stand-alone analysis of one substudy.

    anova: difference of arm means. ancova: OLS with a treatment indicator
    and common covariate slopes. anhecova: arm-specific OLS fits averaged
    over the pooled covariate distribution (equivalently the treatment
    coefficient with treatment-by-centred-covariate interactions).
    """
    if kind not in SUBSTUDY_METHODS:
        raise ValueError(f"unknown substudy method {kind!r}")
    d = substudy_data(kind, rs, substudy, treated, control, covariates)
    n = len(d.rows)
    means = []
    for arm, other, mu, mask in ((str(treated), str(control), d.mu_t, d.treated),
                                 (str(control), str(treated), d.mu_c, ~d.treated)):
        # mean over all rows of the arm's prediction; for OLS with intercept this
        # equals the arm mean plus the covariate-imbalance correction
        value = float(np.mean(mu))
        comp = EpisodeComponent(0, n, int(mask.sum()), value)
        means.append(ArmMeanEstimate(kind, arm, other, (), value, (comp,), n))
    opts = {"covariates": tuple(covariates) if kind != "anova" else ()}
    return ContrastEstimate(kind, means[0], means[1], means[0].value - means[1].value,
                            substudy=substudy, options=opts)
