"""Independent oracles: exhaustive randomisation enumeration and participant bootstrap."""

import itertools

import numpy as np

from reenroll.scheme import parse_scheme

from conftest import make_rs

ARMS = ("1", "2", "3")

# episode-2 probabilities depend on the episode-1 arm, so ECE membership at
# episode 2 is itself random
HISTORY_SCHEME = parse_scheme("""{"arms": ["1", "2", "3"], "rows": [
  {"episode": 1, "z": {"g": "a"}, "p": {"1": "0.5", "2": "0.5"}},
  {"episode": 1, "z": {"g": "b"}, "p": {"1": "0.5", "2": "0.25", "3": "0.25"}},
  {"episode": 2, "z": {"prior_arm": "1"}, "p": {"1": "0.5", "2": "0.5"}},
  {"episode": 2, "z": {"prior_arm": "2"}, "p": {"1": "0.5", "3": "0.5"}},
  {"episode": 2, "z": {"prior_arm": "3"}, "p": {"1": "0.25", "2": "0.75"}}]}""")

# same episode-1 rows; episode 2 keyed on the baseline level only
FIXED_SCHEME = parse_scheme("""{"arms": ["1", "2", "3"], "rows": [
  {"episode": "any", "z": {"g": "a"}, "p": {"1": "0.5", "2": "0.5"}},
  {"episode": "any", "z": {"g": "b"}, "p": {"1": "0.5", "2": "0.25", "3": "0.25"}}]}""")


class ToyDesign:
    """Four units with fixed potential outcomes; by default unit 3 has one episode."""

    def __init__(self, scheme, history, seed=11, reenrolled=(True, True, True, False)):
        self.scheme = scheme
        self.history = history
        self.g = ["a", "a", "b", "b"]
        self.reenrolled = list(reenrolled)
        rng = np.random.default_rng(seed)
        self.x = rng.normal(size=(4, 2))
        self.y1 = rng.normal(size=(4, 3)) * 2 + np.array([0.0, 1.0, -1.0])
        self.y2 = rng.normal(size=(4, 3, 3)) * 2 + 0.5  # [unit, episode-1 arm, episode-2 arm]

    def z(self, i, t, a1):
        if t == 1 or not self.history:
            return {"g": self.g[i], "prior_arm": "none" if t == 1 else a1}
        return {"g": self.g[i], "prior_arm": a1}

    def probs(self, i, t, a1):
        return self.scheme.probabilities(self.z(i, t, a1), t)

    def paths(self):
        """Yield (probability, RecordSet, potential outcomes per row) for every assignment path."""
        first = [[(a, p) for a, p in zip(ARMS, self.probs(i, 1, None)) if p > 0] for i in range(4)]
        for ep1 in itertools.product(*first):
            a1 = [a for a, _ in ep1]
            w1 = np.prod([p for _, p in ep1])
            second_units = [i for i in range(4) if self.reenrolled[i]]
            second = [[(a, p) for a, p in zip(ARMS, self.probs(i, 2, a1[i])) if p > 0] for i in second_units]
            for ep2 in itertools.product(*second):
                w = w1 * np.prod([p for _, p in ep2])
                rows, pot = [], []
                a2 = dict(zip(second_units, [a for a, _ in ep2]))
                for i in range(4):
                    rows.append((f"u{i}", 1, a1[i], self.y1[i, int(a1[i]) - 1], self.z(i, 1, a1[i]),
                                 {"x": self.x[i, 0]}))
                    pot.append(self.y1[i])
                    if i in a2:
                        y = self.y2[i, int(a1[i]) - 1]
                        rows.append((f"u{i}", 2, a2[i], y[int(a2[i]) - 1], self.z(i, 2, a1[i]),
                                     {"x": self.x[i, 1]}))
                        pot.append(y)
                yield w, make_rs(rows, arm_set=ARMS), np.array(pot)


def realised_truth(scheme, rs, potential, j, k):
    """(sum over ECE members of Y^(j), sum of Y^(k), n_jk) for one path."""
    p = scheme.prob_matrix(rs.z, rs.episode)
    ij, ik = ARMS.index(j), ARMS.index(k)
    member = (p[:, ij] > 0) & (p[:, ik] > 0)
    return potential[member, ij].sum(), potential[member, ik].sum(), int(member.sum())


def bootstrap_se(stat, weights_per_participant, B=100_000, seed=5, chunk=10_000):
    """SD of ``stat(W)`` over multinomial participant-resampling weight matrices W (B x n)."""
    n = weights_per_participant
    rng = np.random.default_rng(seed)
    vals = []
    for start in range(0, B, chunk):
        W = rng.multinomial(n, np.full(n, 1.0 / n), size=min(chunk, B - start)).astype(float)
        vals.append(stat(W))
    v = np.concatenate(vals)
    v = v[np.isfinite(v)]
    return float(np.std(v, ddof=1)), len(v)
