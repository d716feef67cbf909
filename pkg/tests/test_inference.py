import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reenroll.errors import EstimationError
from reenroll.estimators import comparison_frame, estimate_contrast, substudy_comparator
from reenroll.inference import (VarianceReport, analyze, cluster_robust_variance, confidence_interval,
                                influence_values, noninferiority_test, report_dict)

from conftest import make_rs, random_two_episode
from oracles import FIXED_SCHEME, bootstrap_se

COV = ["x_c", "x_b"]


def unit_var(se=1.0):
    return VarianceReport(se ** 2, 0.0, 0.0, se ** 2, se ** 2, se, 0.0, 0.95, (-1.96 * se, 1.96 * se), 10)


@pytest.mark.parametrize("method", ["ipw", "sipw", "aipw", "ps", "aps"])
def test_influence_columns_sum_to_zero(sim_scheme, sim_rs, method):
    for j, k in (("2", "1"), ("3", "1")):
        est = estimate_contrast(method, sim_rs, sim_scheme, j, k, covariates=COV)
        tbl = influence_values(sim_rs, sim_scheme, est)
        scale = np.abs(tbl.psi_jk).sum()
        assert abs(tbl.psi_jk.sum()) <= 1e-12 * scale
        assert abs(tbl.psi_kj.sum()) <= 1e-12 * scale
        assert len(set(tbl.participant_ids.tolist())) == tbl.n


@pytest.mark.parametrize("kind", ["anova", "ancova", "anhecova"])
def test_substudy_influence_sums_to_zero(sim_rs, kind):
    est = substudy_comparator(kind, sim_rs, "DA", "3", "1", COV)
    tbl = influence_values(sim_rs, None, est)
    assert abs(tbl.psi_jk.sum()) < 1e-9 and abs(tbl.psi_kj.sum()) < 1e-9
    assert tbl.n == tbl.n_jk


def test_single_episode_reduces_to_iid_formula(uniform_scheme):
    rs = random_two_episode(4, n=60)
    t1 = rs.take(rs.episode == 1)
    est, tbl, var = analyze("ipw", t1, uniform_scheme, "1", "2")
    a, y = t1.arm, t1.outcome
    d = (a == "1") * y / 0.5 - (a == "2") * y / 0.5
    assert est.value == pytest.approx(d.mean(), rel=1e-12)
    assert var.var_contrast == pytest.approx(np.var(d, ddof=1) / len(d), rel=1e-12)


def test_covariance_psd_and_quadratic_form(sim_scheme, sim_rs):
    for method in ("ipw", "aps"):
        _, _, var = analyze(method, sim_rs, sim_scheme, "2", "1", covariates=COV)
        assert np.linalg.eigvalsh(var.covariance_matrix).min() >= -1e-15
        assert var.var_contrast == pytest.approx(var.var_contrast_quadratic, rel=1e-10)


@pytest.mark.parametrize("method", ["sipw", "ps"])
def test_duplicated_participants_shrink_variance(uniform_scheme, method):
    rs = random_two_episode(8, n=30)
    rows = [(p, t, a, y, {}, {"x": x}) for p, t, a, y, x in
            zip(rs.participant_id, rs.episode, rs.arm, rs.outcome, rs.x["x"])]
    dup = make_rs(rows + [(r[0] + "-copy",) + r[1:] for r in rows])
    e1, _, v1 = analyze(method, rs, uniform_scheme, "1", "2")
    e2, _, v2 = analyze(method, dup, uniform_scheme, "1", "2")
    assert e2.value == pytest.approx(e1.value, rel=1e-12)
    n = rs.n
    assert v2.var_contrast / v1.var_contrast == pytest.approx((n - 1) / (2 * n - 1), rel=1e-10)


def test_padding_convention_factor(sim_scheme, sim_rs):
    est = estimate_contrast("sipw", sim_rs, sim_scheme, "3", "1")
    tbl = influence_values(sim_rs, sim_scheme, est)
    padded = tbl.padded(sorted(set(sim_rs.participant_id.tolist())))
    n, m = tbl.n, padded.n
    assert m == sim_rs.n > n
    v, w = cluster_robust_variance(tbl), cluster_robust_variance(padded)
    assert v.se / w.se == pytest.approx(math.sqrt((n / (n - 1)) / (m / (m - 1))), rel=1e-10)


def test_interval_and_level():
    assert confidence_interval(0.0, unit_var(), 0.95) == pytest.approx((-1.959964, 1.959964), abs=1e-6)
    lo, hi = confidence_interval(2.0, unit_var(0.5), 0.9)
    assert (hi - lo) / 2 == pytest.approx(0.5 * 1.644854, abs=1e-6)
    with pytest.raises(ValueError):
        confidence_interval(0.0, unit_var(), 1.0)


def test_noninferiority_examples():
    r = noninferiority_test(0.0, unit_var(0.5), -3.0)
    assert r.noninferior and r.lower == pytest.approx(-0.979982, abs=1e-6)
    assert r.z == pytest.approx(6.0)
    r = noninferiority_test(-3.0, unit_var(0.0), -3.0)
    assert not r.noninferior and math.isnan(r.z)
    r = noninferiority_test(-2.0, unit_var(0.0), -3.0)
    assert r.noninferior and r.z == math.inf
    with pytest.raises(ValueError):
        noninferiority_test(0.0, unit_var(), math.nan)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(0.01, 5), st.floats(-5, 5))
def test_noninferiority_matches_lower_bound(value, se, margin):
    r = noninferiority_test(value, unit_var(se), margin)
    assert r.noninferior == (value - 1.959963984540054 * se > margin)


def test_too_few_participants(uniform_scheme):
    rs = make_rs([("a", 1, "1", 1.0), ("a", 2, "2", 3.0)])
    est = estimate_contrast("ipw", rs, uniform_scheme, "1", "2")
    with pytest.raises(EstimationError, match="at least 2"):
        cluster_robust_variance(influence_values(rs, uniform_scheme, est))


def test_influence_rejects_foreign_estimate(uniform_scheme):
    a, b = random_two_episode(1), random_two_episode(2)
    est = estimate_contrast("ipw", a, uniform_scheme, "1", "2")
    if comparison_frame(b, uniform_scheme, "1", "2").n_jk == est.jk.n_jk:
        pytest.skip("sizes coincide")
    with pytest.raises(EstimationError, match="does not match"):
        influence_values(b, uniform_scheme, est)


def test_report_dict_counts(sim_scheme, sim_rs):
    est, _, var = analyze("ps", sim_rs, sim_scheme, "2", "1")
    ni = noninferiority_test(est, var, -3.0)
    rep = json.loads(json.dumps(report_dict(sim_rs, est, var, ni)))
    assert rep["comparison"] == "2v1" and rep["n_person_episodes"] == est.jk.n_jk
    assert sum(e["size"] for e in rep["per_episode"]) == rep["n_person_episodes"]
    for e in rep["per_episode"]:
        assert sum(s["n"] for s in e["strata"]) == e["size"]
        assert sum(s["n_2"] for s in e["strata"]) == e["n_2"]
    assert rep["noninferiority"]["noninferior"] == (var.ci[0] > -3.0)
    sub, _, svar = analyze("anhecova", sim_rs, None, "2", "1", covariates=COV, substudy="HS")
    srep = report_dict(sim_rs, sub, svar)
    assert srep["substudy"] == "HS" and srep["per_episode"] == []


# --- bootstrap oracle --------------------------------------------------------


def fixed_panel(n=50, seed=17):
    """n participants, two strata, 60% re-enrolled, three arms under FIXED_SCHEME."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        g = "a" if rng.random() < 0.5 else "b"
        T = 2 if rng.random() < 0.6 else 1
        u = rng.normal()
        for t in range(1, T + 1):
            p = FIXED_SCHEME.probabilities({"g": g}, t)
            arm = str(rng.choice(3, p=p) + 1)
            y = u + (1.5 if g == "b" else 0) + {"1": 0.0, "2": -1.0, "3": 0.5}[arm] + rng.normal()
            rows.append((f"p{i:02d}", t, arm, y, {"g": g}))
    return make_rs(rows, arm_set=("1", "2", "3"))


def per_participant_parts(rs, j, k):
    """Participant-level sums used by the resampled estimators (independent of the library code)."""
    pids = sorted(set(rs.participant_id.tolist()))
    idx = {p: i for i, p in enumerate(pids)}
    n = len(pids)
    m = np.zeros(n)
    ht = {j: np.zeros(n), k: np.zeros(n)}
    wt = {j: np.zeros(n), k: np.zeros(n)}
    cells = {}
    for r in rs.records:
        p = dict(zip(("1", "2", "3"), FIXED_SCHEME.probabilities(r.z_values, r.episode)))
        if p[j] == 0 or p[k] == 0:
            continue
        i = idx[r.participant_id]
        m[i] += 1
        c = cells.setdefault((r.episode, p[j], p[k]), {"n": np.zeros(n), j: np.zeros((2, n)), k: np.zeros((2, n))})
        c["n"][i] += 1
        if r.arm in (j, k):
            ht[r.arm][i] += r.outcome / p[r.arm]
            wt[r.arm][i] += 1 / p[r.arm]
            c[r.arm][0, i] += 1
            c[r.arm][1, i] += r.outcome
    return m, ht, wt, cells


def resampled(method, rs, j, k):
    m, ht, wt, cells = per_participant_parts(rs, j, k)

    def stat(W):
        if method == "ipw":
            return W @ (ht[j] - ht[k]) / (W @ m)
        if method == "sipw":
            return W @ ht[j] / (W @ wt[j]) - W @ ht[k] / (W @ wt[k])
        num = 0.0
        for c in cells.values():
            size = W @ c["n"]
            with np.errstate(divide="ignore", invalid="ignore"):
                num = num + size * ((W @ c[j][1]) / (W @ c[j][0]) - (W @ c[k][1]) / (W @ c[k][0]))
        return num / (W @ m)

    return stat, len(m)


@pytest.mark.parametrize("method", ["ipw", "sipw", "ps"])
def test_cluster_robust_se_matches_bootstrap(method):
    rs = fixed_panel()
    assert rs.n == 50 and rs.max_episode == 2
    j, k = "1", "2"
    est, tbl, var = analyze(method, rs, FIXED_SCHEME, j, k)
    stat, n = resampled(method, rs, j, k)
    assert stat(np.ones((1, n)))[0] == pytest.approx(est.value, rel=1e-12)
    boot, used = bootstrap_se(stat, n, B=100_000)
    assert used > 0.95 * 100_000
    assert abs(var.se / boot - 1) <= 0.10, (var.se, boot)
