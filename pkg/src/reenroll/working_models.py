"""Linear working models fitted by column-pivoted QR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import EstimationError

INTERCEPT = "(intercept)"
PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ValueError("design matrix shape does not match column names")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Encoder:
    """Maps named covariates to design columns.

    Numeric covariates pass through; categorical ones become indicators for
    every level but the first in sorted order (the reference level).
    """

    covariates: tuple[str, ...]
    levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def columns(self) -> tuple[str, ...]:
        cols = [INTERCEPT]
        for name in self.covariates:
            if name in self.levels:
                cols += [f"{name}[{lvl}]" for lvl in self.levels[name][1:]]
            else:
                cols.append(name)
        return tuple(cols)

    def transform(self, rs, rows) -> DesignMatrix:
        rows = np.asarray(rows)
        parts = [np.ones((len(rows), 1))]
        for name in self.covariates:
            col = rs.x[name][rows]
            if name in self.levels:
                lv = self.levels[name]
                if any(v is None for v in col):
                    raise EstimationError(f"missing value in covariate {name!r}")
                unseen = set(col.tolist()) - set(lv)
                if unseen:
                    raise EstimationError(f"covariate {name!r}: unseen levels {sorted(unseen)}")
                parts.append(np.column_stack([col == lvl for lvl in lv[1:]]).astype(float)
                             if len(lv) > 1 else np.empty((len(rows), 0)))
            else:
                col = np.asarray(col, dtype=float)
                bad = ~np.isfinite(col)
                if bad.any():
                    pids = rs.participant_id[rows[bad]][:5].tolist()
                    raise EstimationError(f"missing value in covariate {name!r} for participants {pids}")
                parts.append(col[:, None])
        return DesignMatrix(np.hstack(parts), self.columns)


def make_encoder(rs, rows, covariates: Sequence[str]) -> Encoder:
    levels = {}
    for name in covariates:
        if name not in rs.x:
            raise EstimationError(f"unknown covariate {name!r}")
        if rs.x_types.get(name) == "categorical":
            vals = {v for v in rs.x[name][np.asarray(rows)].tolist() if v is not None}
            levels[name] = tuple(sorted(vals))
    return Encoder(tuple(covariates), levels)


@dataclass(frozen=True)
class LinearModel:
    columns: tuple[str, ...]
    coef: np.ndarray  # zero for dropped columns
    dropped_columns: tuple[str, ...]
    n: int
    rank: int
    residual_variance: float

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.columns, self.coef.tolist()))

    def predict(self, X) -> np.ndarray:
        values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
        return values @ self.coef


def fit_ols(X: DesignMatrix, y) -> LinearModel:
    """Least squares via column-pivoted QR.

    Columns whose pivot falls below ``PIVOT_TOL`` times the leading pivot
    are treated as collinear: their coefficient is fixed at 0 and their
    names are reported in ``dropped_columns``.
    """
    y = np.asarray(y, dtype=float)
    A = X.values
    n, p = A.shape
    if n == 0:
        raise EstimationError("cannot fit a model to zero rows")
    if len(y) != n:
        raise ValueError("response length does not match design rows")
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > PIVOT_TOL * diag[0])) if diag.size and diag[0] > 0 else 0
    coef = np.zeros(p)
    if rank:
        b = scipy.linalg.solve_triangular(R[:rank, :rank], Q[:, :rank].T @ y)
        coef[piv[:rank]] = b
    dropped = tuple(X.columns[i] for i in sorted(piv[rank:]))
    resid = y - A @ coef
    dof = n - rank
    sigma2 = float(resid @ resid / dof) if dof > 0 else float("nan")
    return LinearModel(X.columns, coef, dropped, n, rank, sigma2)


class ConstantModel:
    """Working model that predicts the same value everywhere."""

    def __init__(self, value=0.0):
        self.value = float(value)

    def predict(self, rs, t, rows) -> np.ndarray:
        return np.full(len(rows), self.value)


@dataclass(frozen=True)
class WorkingModel:
    """Fitted mu-hat for one arm of a (j, k) comparison, indexed by episode."""

    arm: str
    encoder: Encoder
    fits: Mapping[int, LinearModel | None]  # None: no training rows, predicts 0
    pooling: str

    def predict(self, rs, t, rows) -> np.ndarray:
        fit = self.fits.get(t)
        if fit is None:
            if t not in self.fits:
                raise EstimationError(f"working model for arm {self.arm} has no fit for episode {t}")
            return np.zeros(len(rows))
        return fit.predict(self.encoder.transform(rs, rows))

    @property
    def fallback_episodes(self) -> tuple[int, ...]:
        return tuple(t for t, f in self.fits.items() if f is None)


def fit_working_model(rs, pops, arm, covariates: Sequence[str] = (), pooling="per-episode",
                      on_empty="error") -> WorkingModel:
    """Fit mu-hat on arm-``arm`` members of the given ECE population(s).

    ``pops`` is one EcePopulation or a sequence of them (one per episode).
    With ``pooling="pooled"`` a single regression is fitted on the union and
    applied to every episode. ``on_empty="zero"`` replaces a fit that has
    no training rows by the zero model (reduces to the unadjusted estimator)
    instead of raising.
    """
    if not isinstance(pops, (list, tuple)):
        pops = [pops]
    if pooling not in ("per-episode", "pooled"):
        raise ValueError(f"unknown pooling {pooling!r}")
    if on_empty not in ("error", "zero"):
        raise ValueError(f"unknown on_empty policy {on_empty!r}")
    arm = str(arm)
    all_rows = np.concatenate([p.members for p in pops]) if pops else np.empty(0, dtype=int)
    encoder = make_encoder(rs, all_rows, covariates)

    def train(rows, where):
        rows = rows[rs.arm[rows] == arm]
        if len(rows) == 0:
            if on_empty == "zero":
                return None
            raise EstimationError(f"no arm-{arm} records in ECE population at {where}")
        return fit_ols(encoder.transform(rs, rows), rs.outcome[rows])

    if pooling == "pooled":
        fit = train(all_rows, "any episode")
        fits = {p.t: fit for p in pops}
    else:
        fits = {p.t: train(p.members, f"episode {p.t}") for p in pops}
    return WorkingModel(arm, encoder, fits, pooling)
