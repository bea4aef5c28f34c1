"""Missing-data handling: complete cases, chained-equations imputation, Rubin's rules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from .cells import bayesian_bootstrap_weights
from .logistic import irls_batch

PER_COHORT = "PerCohort"
POOLED_WITH_INDICATOR = "PooledWithIndicator"


class ImputationError(ValueError):
    pass


def complete_case(df: pd.DataFrame, columns=None) -> pd.DataFrame:
    cols = list(df.columns if columns is None else columns)
    return df[df[cols].notna().all(axis=1)]


# ---------------------------------------------------------------------------
# chained equations
# ---------------------------------------------------------------------------

def _is_binary(values: np.ndarray) -> bool:
    obs = values[~np.isnan(values)]
    return obs.size > 0 and bool(np.all((obs == 0) | (obs == 1)))


def _unique_rows(M: np.ndarray):
    """Distinct rows of ``M`` and the inverse index, via mixed-radix codes when possible."""
    codes = np.zeros(M.shape[0], dtype=np.int64)
    radix = 1
    for j in range(M.shape[1]):
        _, inv = np.unique(M[:, j], return_inverse=True)
        k = int(inv.max()) + 1 if inv.size else 1
        if radix * k >= 2**62:
            return np.unique(M, axis=0, return_inverse=True)
        codes += inv * radix
        radix *= k
    _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
    return M[first], inverse.ravel()


def _draw_binary(D_obs, y_obs, D_mis, rng):
    U, inv = _unique_rows(np.column_stack([D_obs, y_obs]))
    counts = np.bincount(inv, minlength=U.shape[0]).astype(float)
    w = bayesian_bootstrap_weights(counts, rng)
    coef, _, _, _ = irls_batch(U[:, :-1], U[:, -1], w[None, :])
    coef = np.nan_to_num(coef[0])
    p = expit(D_mis @ coef)
    return (rng.random(len(p)) < p).astype(float)


def _draw_linear(D_obs, y_obs, D_mis, rng):
    n = len(y_obs)
    w = bayesian_bootstrap_weights(np.ones(n), rng)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(D_obs * sw[:, None], y_obs * sw, rcond=None)
    resid = y_obs - D_obs @ coef
    dof = max(w.sum() - D_obs.shape[1], 1.0)
    sigma = math.sqrt(float(np.sum(w * resid**2)) / dof)
    return D_mis @ coef + rng.normal(0.0, sigma, size=D_mis.shape[0])


def _chain(values: np.ndarray, extra: np.ndarray, order: list[int], burn_in: int,
           rng: np.random.Generator) -> np.ndarray:
    """Run the chained equations on ``values`` (n, p) with fully observed ``extra`` predictors."""
    values = values.copy()
    miss = np.isnan(values)
    binary = [_is_binary(values[:, j]) for j in range(values.shape[1])]
    for j in order:
        obs = values[~miss[:, j], j]
        values[miss[:, j], j] = rng.choice(obs, size=int(miss[:, j].sum()), replace=True)
    # With one incomplete variable every cycle draws from the same conditional, so one suffices.
    cycles = burn_in if len(order) > 1 else 1
    for _ in range(cycles):
        for j in order:
            others = [k for k in range(values.shape[1]) if k != j]
            D = np.column_stack([np.ones(len(values)), values[:, others], extra])
            m = miss[:, j]
            draw = _draw_binary if binary[j] else _draw_linear
            values[m, j] = draw(D[~m], values[~m, j], D[m], rng)
    return values


def multiple_impute(df: pd.DataFrame, m: int, scope: str = POOLED_WITH_INDICATOR, seed: int = 0,
                    columns=None, cohort_col: str = "cohort", burn_in: int = 10) -> list[pd.DataFrame]:
    """Return ``m`` completed copies of ``df``.

    Incomplete columns are imputed in order of ascending missing fraction
    (ties by column order) from logistic (0/1 columns) or linear models on all
    other analysis columns.  ``PooledWithIndicator`` adds cohort dummies to
    every model; ``PerCohort`` runs an independent chain inside each cohort.
    Each model fit uses Bayesian-bootstrap weights so that the draws carry
    parameter uncertainty.
    """
    if m < 2:
        raise ImputationError("m must be at least 2")
    if scope not in (PER_COHORT, POOLED_WITH_INDICATOR):
        raise ImputationError(f"unknown scope {scope!r}")
    cols = [c for c in (df.columns if columns is None else columns) if c != cohort_col]
    outside = [c for c in df.columns if c not in cols and c != cohort_col and df[c].isna().any()]
    if outside:
        raise ImputationError(f"missing values outside the imputable columns: {outside}")
    values = df[cols].to_numpy(dtype=float, na_value=np.nan)
    miss = np.isnan(values)
    frac = miss.mean(axis=0)
    incomplete = [j for j in range(len(cols)) if miss[:, j].any()]
    if not incomplete:
        return [df.copy() for _ in range(m)]
    order = sorted(incomplete, key=lambda j: (frac[j], j))
    complete = [j for j in range(len(cols)) if not miss[:, j].any()]
    if scope == PER_COHORT or cohort_col not in df.columns:
        if not complete:
            raise ImputationError("every incomplete variable needs at least one fully observed predictor")
    cohorts = df[cohort_col].to_numpy() if cohort_col in df.columns else np.zeros(len(df))
    labels = sorted(pd.unique(cohorts).tolist(), key=str)
    if scope == PER_COHORT:
        for c in labels:
            part = miss[cohorts == c]
            full = [cols[j] for j in incomplete if part[:, j].all()]
            if full:
                raise ImputationError(f"column(s) {full} fully missing in cohort {c!r}")
        groups = [np.flatnonzero(cohorts == c) for c in labels]
        extras = [np.zeros((len(g), 0)) for g in groups]
    else:
        if not complete and len(labels) < 2:
            raise ImputationError("every incomplete variable needs at least one fully observed predictor")
        dummies = np.column_stack([(cohorts == c).astype(float) for c in labels[1:]]) \
            if len(labels) > 1 else np.zeros((len(df), 0))
        groups = [np.arange(len(df))]
        extras = [dummies]

    out = []
    for i in range(m):
        filled = values.copy()
        for g_idx, (rows, extra) in enumerate(zip(groups, extras)):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), i, g_idx]))
            filled[rows] = _chain(values[rows], extra, order, burn_in, rng)
        copy = df.copy()
        for j in incomplete:
            col = cols[j]
            if pd.api.types.is_integer_dtype(df[col].dtype) or _is_binary(values[:, j]):
                copy[col] = pd.array(np.rint(filled[:, j]).astype(np.int64), dtype="Int64")
            else:
                copy[col] = filled[:, j]
        out.append(copy)
    return out


# ---------------------------------------------------------------------------
# Rubin's rules
# ---------------------------------------------------------------------------

@dataclass
class RubinResult:
    estimate: float
    within: float
    between: float
    total: float
    df: float
    m: int

    @property
    def se(self) -> float:
        return math.sqrt(self.total)


def rubin_pool(estimates, complete_df: float | None = None) -> RubinResult:
    """Combine ``(theta_i, V_i)`` pairs: T = W + (1 + 1/m) B, Barnard-Rubin df.

    ``complete_df`` is the complete-data degrees of freedom; ``None`` means
    large-sample (the classical Rubin df).
    """
    pairs = [(e.log_point, e.se**2) if hasattr(e, "log_point") else e for e in estimates]
    m = len(pairs)
    if m < 2:
        raise ValueError("Rubin's rules need at least two imputations")
    theta = np.array([p[0] for p in pairs], float)
    var = np.array([p[1] for p in pairs], float)
    qbar = float(np.mean(theta))
    within = float(np.mean(var))
    between = float(np.var(theta, ddof=1))
    total = within + (1.0 + 1.0 / m) * between
    lam = (1.0 + 1.0 / m) * between / total
    if lam == 0.0:  # B == 0, or so small that lambda underflows
        df = math.inf if complete_df is None else float(complete_df)
    else:
        df_old = (m - 1) / lam**2 if lam**2 > 0.0 else math.inf
        if complete_df is None:
            df = df_old
        else:
            df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lam)
            df = 1.0 / (1.0 / df_old + 1.0 / df_obs)
    return RubinResult(qbar, within, between, total, float(df), m)
