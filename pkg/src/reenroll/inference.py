"""Influence functions, participant-clustered variance and intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import EstimationError
from .estimators import (ECE_METHODS, SUBSTUDY_METHODS, ContrastEstimate, _predict, comparison_frame,
                         substudy_data)


@dataclass(frozen=True)
class InfluenceTable:
    """Per-participant influence values for both arm means of a contrast.

    ``psi_*`` holds each participant's summed episode contributions before
    the leading ``n / n_jk`` factor; ``phi_*`` applies it.
    """

    method: str
    comparison: str
    participant_ids: np.ndarray
    psi_jk: np.ndarray
    psi_kj: np.ndarray
    n_jk: int
    estimate: float

    @property
    def n(self) -> int:
        return len(self.participant_ids)

    @property
    def phi_jk(self) -> np.ndarray:
        return self.psi_jk * (self.n / self.n_jk)

    @property
    def phi_kj(self) -> np.ndarray:
        return self.psi_kj * (self.n / self.n_jk)

    def padded(self, participant_ids) -> "InfluenceTable":
        """Same table extended with zero rows for participants outside every ECE population."""
        have = set(self.participant_ids.tolist())
        extra = np.array([p for p in participant_ids if p not in have], dtype=object)
        z = np.zeros(len(extra))
        return InfluenceTable(self.method, self.comparison,
                              np.concatenate([self.participant_ids, extra]),
                              np.concatenate([self.psi_jk, z]), np.concatenate([self.psi_kj, z]),
                              self.n_jk, self.estimate)


def _episode_contributions(method, block, a, theta, mu=None):
    """Per-member contribution to the influence function of the arm-a mean."""
    treated = block.arm == a
    y = block.y
    if method == "ipw":
        return treated * y / block.pi(a) - theta
    if method == "sipw":
        return treated * (y - theta) / block.pi(a)
    if method == "aipw":
        return treated * (y - mu) / block.pi(a) + mu - theta
    codes = block.strata.codes
    H = block.strata.H
    n_h = np.bincount(codes, minlength=H)
    n_ah = np.bincount(codes[treated], minlength=H)
    if (n_ah == 0).any():
        raise EstimationError(f"empty-arm stratum for arm {a} at episode {block.t}")
    m_h = np.bincount(codes[treated], weights=y[treated], minlength=H) / n_ah
    inv_p = (n_h / n_ah)[codes]
    m = m_h[codes]
    if method == "ps":
        return treated * inv_p * (y - m) + (m - theta)
    mu_bar = (np.bincount(codes, weights=mu, minlength=H) / n_h)[codes]
    return treated * inv_p * (y - mu + mu_bar - m) + (m + mu - mu_bar - theta)


def influence_values(rs, scheme, contrast: ContrastEstimate) -> InfluenceTable:
    """Plug-in influence values, one row per participant in any ECE population.

    Episode contributions are summed within participant, which is what
    makes the resulting variance cluster-robust.
    """
    method = contrast.method
    if method in SUBSTUDY_METHODS:
        return _substudy_influence(rs, contrast)
    if method not in ECE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    frame = comparison_frame(rs, scheme, contrast.j, contrast.k, contrast.options.get("episodes"))
    if frame.n_jk != contrast.jk.n_jk:
        raise EstimationError("estimate does not match the supplied data (ECE sizes differ)")
    codes = np.concatenate([b.pid for b in frame.blocks])
    uniq, inv = np.unique(codes, return_inverse=True)
    cols = []
    for est in (contrast.jk, contrast.kj):
        parts = []
        for b in frame.blocks:
            mu = _predict(est.model, rs, b) if method in ("aipw", "aps") else None
            parts.append(_episode_contributions(method, b, est.j, est.value, mu))
        cols.append(np.bincount(inv.reshape(-1), weights=np.concatenate(parts), minlength=len(uniq)))
    return InfluenceTable(method, contrast.label, rs.participant_labels[uniq], cols[0], cols[1],
                          frame.n_jk, contrast.value)


def _substudy_influence(rs, contrast):
    d = substudy_data(contrast.method, rs, contrast.substudy, contrast.j, contrast.k,
                      contrast.options.get("covariates", ()))
    n = len(d.rows)
    cols = []
    for est, mu, mask in ((contrast.jk, d.mu_t, d.treated), (contrast.kj, d.mu_c, ~d.treated)):
        cols.append(n / mask.sum() * mask * (d.y - mu) + mu - est.value)
    return InfluenceTable(contrast.method, contrast.label, rs.participant_id[d.rows], cols[0], cols[1],
                          n, contrast.value)


@dataclass(frozen=True)
class VarianceReport:
    var_jk: float
    var_kj: float
    cov: float
    var_contrast: float
    var_contrast_quadratic: float
    se: float
    estimate: float
    level: float
    ci: tuple[float, float]
    n: int

    @property
    def covariance_matrix(self) -> np.ndarray:
        return np.array([[self.var_jk, self.cov], [self.cov, self.var_kj]])


def _z(level):
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return NormalDist().inv_cdf((1 + level) / 2)


def cluster_robust_variance(tbl: InfluenceTable, level=0.95) -> VarianceReport:
    """Sample (co)variance of per-participant influence values, divided by n."""
    n = tbl.n
    if n < 2:
        raise EstimationError("cluster-robust variance needs at least 2 participants")
    phi = np.column_stack([tbl.phi_jk, tbl.phi_kj])
    cov = np.cov(phi, rowvar=False, ddof=1) / n
    diff = tbl.phi_jk - tbl.phi_kj
    var_c = float(np.var(diff, ddof=1) / n)
    quad = float(cov[0, 0] + cov[1, 1] - 2 * cov[0, 1])
    se = math.sqrt(max(var_c, 0.0))
    half = _z(level) * se
    return VarianceReport(float(cov[0, 0]), float(cov[1, 1]), float(cov[0, 1]), var_c, quad, se,
                          tbl.estimate, level, (tbl.estimate - half, tbl.estimate + half), n)


def confidence_interval(contrast, var: VarianceReport, level=0.95) -> tuple[float, float]:
    value = contrast.value if isinstance(contrast, ContrastEstimate) else float(contrast)
    half = _z(level) * var.se
    return (value - half, value + half)


@dataclass(frozen=True)
class NoninferiorityResult:
    margin: float
    lower: float
    z: float
    level: float
    noninferior: bool


def noninferiority_test(contrast, var: VarianceReport, margin: float, level=0.95) -> NoninferiorityResult:
    """Declare non-inferiority iff the lower confidence bound exceeds ``margin``."""
    if not math.isfinite(margin):
        raise ValueError("margin must be finite")
    value = contrast.value if isinstance(contrast, ContrastEstimate) else float(contrast)
    lower = confidence_interval(value, var, level)[0]
    diff = value - margin
    if var.se > 0:
        z = diff / var.se
    else:
        z = math.copysign(math.inf, diff) if diff != 0 else math.nan
    return NoninferiorityResult(margin, lower, z, level, lower > margin)


def report_dict(rs, contrast: ContrastEstimate, var: VarianceReport, ni: NoninferiorityResult | None = None):
    """JSON-ready summary of one method x comparison."""
    per_episode = []
    if contrast.substudy is None:
        for cj, ck in zip(contrast.jk.components, contrast.kj.components):
            entry = {"t": cj.t, "size": cj.size, f"n_{contrast.j}": cj.n_arm, f"n_{contrast.k}": ck.n_arm,
                     "theta_jk_t": cj.value, "theta_kj_t": ck.value}
            if cj.strata:
                entry["strata"] = [
                    {"h": sj.h, "pi_j": sj.pi_j, "pi_k": sj.pi_k, "n": sj.n,
                     f"n_{contrast.j}": sj.n_arm, f"n_{contrast.k}": sk.n_arm}
                    for sj, sk in zip(cj.strata, ck.strata)
                ]
            per_episode.append(entry)
    out = {
        "method": contrast.method,
        "comparison": contrast.label,
        "estimate": contrast.value,
        "theta_jk": contrast.jk.value,
        "theta_kj": contrast.kj.value,
        "se": var.se,
        "ci": [var.ci[0], var.ci[1]] if var.level else None,
        "level": var.level,
        "n_participants": var.n,
        "n_person_episodes": contrast.jk.n_jk,
        "per_episode": per_episode,
    }
    if contrast.substudy is not None:
        out["substudy"] = contrast.substudy
    if contrast.options.get("episodes") is not None:
        out["episodes"] = list(contrast.options["episodes"])
    if ni is not None:
        out["noninferiority"] = {"margin": ni.margin, "lower": ni.lower, "z": ni.z,
                                 "noninferior": ni.noninferior}
    return out


def analyze(method, rs, scheme, j, k, episodes=None, covariates=(), pooling="per-episode",
            level=0.95, substudy=None, on_empty="error"):
    """Estimate, influence table and variance in one call."""
    from .estimators import estimate_contrast, substudy_comparator

    if method in SUBSTUDY_METHODS:
        est = substudy_comparator(method, rs, substudy, j, k, covariates)
    else:
        est = estimate_contrast(method, rs, scheme, j, k, episodes, covariates, pooling, on_empty=on_empty)
    tbl = influence_values(rs, scheme, est)
    return est, tbl, cluster_robust_variance(tbl, level)
