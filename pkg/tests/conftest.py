import numpy as np
import pytest

from reenroll.scheme import parse_scheme
from reenroll.simgen import SimConfig, generate_trial, simplify_scheme
from reenroll.trial_data import EpisodeRecord, RecordSet

UNIFORM_SCHEME = '{"arms": ["1", "2"], "rows": [{"episode": "any", "p": {"1": "0.5", "2": "0.5"}}]}'


def make_rs(rows, arm_set=("1", "2")):
    """rows: (pid, t, arm, y[, z[, x[, substudy]]]) tuples."""
    recs = []
    for r in rows:
        pid, t, arm, y = r[:4]
        z = r[4] if len(r) > 4 else {}
        x = r[5] if len(r) > 5 else {}
        s = r[6] if len(r) > 6 else None
        recs.append(EpisodeRecord(str(pid), t, str(arm), y, z, x, s))
    return RecordSet.from_records(recs, arm_set=arm_set)


def random_two_episode(seed, n=40, p_j=0.5):
    """Uniform-scheme data with random re-enrollment and a numeric covariate."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        for t in (1, 2):
            if t == 2 and rng.random() < 0.4:
                break
            arm = "1" if rng.random() < p_j else "2"
            x = rng.normal()
            y = 1.0 + 2.0 * x + (0.7 if arm == "1" else 0.0) + rng.normal()
            rows.append((f"p{i}", t, arm, y, {}, {"x": x}))
    return make_rs(rows)


@pytest.fixture(scope="session")
def uniform_scheme():
    return parse_scheme(UNIFORM_SCHEME)


@pytest.fixture(scope="session")
def sim_scheme():
    return simplify_scheme()


@pytest.fixture(scope="session")
def sim_trial():
    return generate_trial(SimConfig(), 0)


@pytest.fixture(scope="session")
def sim_rs(sim_trial):
    return sim_trial.records


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda s: int(s[2:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
