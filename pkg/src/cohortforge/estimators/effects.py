"""Effect estimation for binary outcomes: regression, IPW, g-computation, AIPW.

All estimators work on collapsed cells (see ``cells``) so that bootstrap
replicates can be fitted as one batch.  Marginal estimators report bootstrap
standard errors; the conditional estimator reports Wald standard errors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm

from .cells import Cells, bootstrap_counts, collapse, weighted_quantile
from .logistic import fit_logistic, irls_batch

Z95 = float(norm.ppf(0.975))
MEASURES = ("OR", "RR", "RD")
POSITIVITY_BOUNDS = (0.01, 0.99)
NONCOLLAPSIBLE = "conditional odds ratio; not collapsible to the marginal estimand"


class PositivityError(ValueError):
    def __init__(self, strata: list[dict]):
        self.strata = strata
        super().__init__(f"positivity violated in {len(strata)} covariate strata: {strata}")


@dataclass
class EffectEstimate:
    method: str
    measure: str
    scope: str
    arm: object
    comparator: object
    point: float
    se: float
    ci_low: float
    ci_high: float
    n_used: int
    cohort: str = "pooled"
    log_point: float | None = None
    converged: bool = True
    warnings: tuple[str, ...] = ()
    risks: tuple[float, float] | None = None

    @property
    def estimand(self) -> str:
        return f"{self.scope} {self.measure}"

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "estimand": self.measure,
            "scope": self.scope,
            "cohort": self.cohort,
            "arm": _plain(self.arm),
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "se_log": self.se if self.measure != "RD" else None,
            "n_used": self.n_used,
            "warnings": list(self.warnings),
        }


@dataclass
class InsufficientData:
    cohort: str
    reason: str

    def to_record(self) -> dict:
        return {"cohort": self.cohort, "insufficient_data": self.reason}


def _plain(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        f = float(v)
        return int(f) if f.is_integer() else f
    return v


def estimate_from_interval(point: float, lo: float, hi: float, arm, cohort: str, comparator=0,
                           method: str = "reported", scope: str = "Conditional") -> EffectEstimate:
    """Wrap a published OR with its 95% CI; SE on the log scale is (ln hi - ln lo) / 3.92."""
    se = (math.log(hi) - math.log(lo)) / (2 * 1.96)
    return EffectEstimate(method, "OR", scope, arm, comparator, point, se, lo, hi, 0, cohort,
                          math.log(point))


# ---------------------------------------------------------------------------
# design helpers
# ---------------------------------------------------------------------------

def _is_categorical(series: pd.Series) -> bool:
    return not pd.api.types.is_numeric_dtype(series) or isinstance(series.dtype, pd.CategoricalDtype)


class _CovariateDesign:
    """Numeric covariates enter as-is; non-numeric ones as treatment-coded dummies."""

    def __init__(self, df: pd.DataFrame, covariates):
        self.covariates = list(covariates)
        self.levels = {}
        for c in self.covariates:
            if _is_categorical(df[c]):
                self.levels[c] = sorted(df[c].dropna().unique().tolist(), key=str)

    @property
    def names(self) -> list[str]:
        out = []
        for c in self.covariates:
            if c in self.levels:
                out += [f"{c}[{lvl}]" for lvl in self.levels[c][1:]]
            else:
                out.append(c)
        return out

    def matrix(self, frame: pd.DataFrame) -> np.ndarray:
        cols = []
        for c in self.covariates:
            v = frame[c].to_numpy()
            if c in self.levels:
                cols += [(v == lvl).astype(float) for lvl in self.levels[c][1:]]
            else:
                cols.append(v.astype(float))
        if not cols:
            return np.zeros((len(frame), 0))
        return np.column_stack(cols)


def _arm_dummies(x: np.ndarray, arms, comparator) -> np.ndarray:
    others = [a for a in arms if a != comparator]
    if not others:
        return np.zeros((len(x), 0))
    return np.column_stack([(x == a).astype(float) for a in others])


def _arms(df: pd.DataFrame, exposure: str, comparator=None):
    arms = sorted(df[exposure].dropna().unique().tolist())
    if len(arms) < 2:
        raise ValueError(f"exposure {exposure!r} needs at least two observed arms, found {arms}")
    if comparator is None:
        comparator = arms[0]
    if comparator not in arms:
        raise ValueError(f"comparator {comparator!r} not among arms {arms}")
    return arms, comparator


def _check_frame(df: pd.DataFrame, columns) -> None:
    missing_cols = [c for c in columns if c not in df.columns]
    if missing_cols:
        raise KeyError(f"columns not in data: {missing_cols}")
    if df[list(columns)].isna().any().any():
        bad = [c for c in columns if df[c].isna().any()]
        raise ValueError(f"missing values in analysis columns {bad}; use complete_case or multiple_impute")


def _check_binary(df: pd.DataFrame, outcome: str) -> None:
    vals = set(pd.unique(df[outcome]))
    if not vals <= {0, 1}:
        raise ValueError(f"outcome {outcome!r} must be 0/1, saw {sorted(vals)[:5]}")


# ---------------------------------------------------------------------------
# batched risk functions: W is (B, K) cell weights -> risks (B, n_arms), converged (B,)
# ---------------------------------------------------------------------------

def _outcome_design(x, arms, comparator, C, interaction):
    D = [np.ones((len(x), 1)), _arm_dummies(x, arms, comparator), C]
    if interaction:
        A = _arm_dummies(x, arms, comparator)
        D += [A[:, [i]] * C for i in range(A.shape[1])]
    return np.hstack(D)


def _outcome_predictions(cells, W, exposure, outcome, arms, comparator, design, interaction):
    x = cells.column(exposure)
    y = cells.column(outcome).astype(float)
    C = design.matrix(cells.frame)
    coef, conv, _, _ = irls_batch(_outcome_design(x, arms, comparator, C, interaction), y, W)
    preds = []
    for a in arms:
        Da = _outcome_design(np.full(len(x), a, dtype=object), arms, comparator, C, interaction)
        preds.append(expit(coef @ Da.T))
    return np.stack(preds, axis=-1), conv  # (B, K, A)


def _propensities(cells, W, exposure, arms, design):
    x = cells.column(exposure)
    C = np.hstack([np.ones((len(x), 1)), design.matrix(cells.frame)])
    if len(arms) == 2:
        coef, conv, _, _ = irls_batch(C, (x == arms[1]).astype(float), W)
        p1 = expit(coef @ C.T)
        return np.stack([1 - p1, p1], axis=-1), conv
    probs, conv = [], np.ones(W.shape[0], bool)
    for a in arms:
        coef, c, _, _ = irls_batch(C, (x == a).astype(float), W)
        probs.append(expit(coef @ C.T))
        conv &= c
    probs = np.stack(probs, axis=-1)
    return probs / probs.sum(axis=-1, keepdims=True), conv


def _trim(probs, W):
    """Cap each arm's propensities at their weighted 1st/99th percentiles."""
    out = probs.copy()
    capped = np.zeros(W.shape[0])
    for j in range(probs.shape[-1]):
        p = probs[..., j]
        lo = weighted_quantile(p, W, 0.01)[:, None]
        hi = weighted_quantile(p, W, 0.99)[:, None]
        clipped = np.clip(p, lo, hi)
        capped += np.sum(W * (clipped != p), axis=1)
        out[..., j] = clipped
    return out, capped


def _positivity(cells, probs, design, bounds=POSITIVITY_BOUNDS):
    lo, hi = bounds
    bad = np.any((probs <= lo) | (probs >= hi), axis=-1)
    if not np.any(bad):
        return
    strata = cells.frame.loc[bad, design.covariates].drop_duplicates()
    raise PositivityError(strata.to_dict("records"))


# ---------------------------------------------------------------------------
# contrasts and packaging
# ---------------------------------------------------------------------------

def _transform(r1, r0, measure):
    with np.errstate(divide="ignore", invalid="ignore"):
        if measure == "OR":
            return np.log(r1 / (1 - r1)) - np.log(r0 / (1 - r0))
        if measure == "RR":
            return np.log(r1) - np.log(r0)
        if measure == "RD":
            return r1 - r0
    raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")


def _package(method, measure, scope, arms, comparator, risks, boot_risks, boot_conv, n_used,
             cohort, warnings, converged=True):
    out = []
    ci = arms.index(comparator)
    for j, a in enumerate(arms):
        if a == comparator:
            continue
        t = float(_transform(risks[j], risks[ci], measure))
        bt = _transform(boot_risks[:, j], boot_risks[:, ci], measure)
        ok = boot_conv & np.isfinite(bt)
        warn = list(warnings)
        if not np.all(ok):
            warn.append(f"{int(np.sum(~ok))} bootstrap replicates dropped (non-convergence)")
        se = float(np.std(bt[ok], ddof=1)) if np.sum(ok) > 1 else float("nan")
        lo, hi = t - Z95 * se, t + Z95 * se
        if measure == "RD":
            point, log_point = t, None
        else:
            point, log_point, lo, hi = math.exp(t), t, math.exp(lo), math.exp(hi)
        out.append(EffectEstimate(method, measure, scope, a, comparator, point, se, lo, hi, n_used,
                                  cohort, log_point, converged, tuple(warn),
                                  (float(risks[j]), float(risks[ci]))))
    return out


def _rng(seed, salt):
    return np.random.default_rng(np.random.SeedSequence([int(seed), salt]))


def _run_marginal(method, risk_fn, cells, arms, comparator, measure, n_boot, seed, cohort, warnings=()):
    risks, conv, info = risk_fn(cells.counts[None, :])
    warnings = list(warnings)
    if info.get("capped", 0) > 0:
        warnings.append(f"propensity caps applied to {int(info['capped'])} rows")
    if not conv[0]:
        warnings.append("nuisance model did not converge")
    W = bootstrap_counts(cells, n_boot, _rng(seed, 0xB007))
    boot_risks, boot_conv, _ = risk_fn(W)
    return _package(method, measure, "Marginal", arms, comparator, risks[0], boot_risks, boot_conv,
                    cells.n, cohort, warnings, bool(conv[0]))


# ---------------------------------------------------------------------------
# public estimators
# ---------------------------------------------------------------------------

def conditional_or(df: pd.DataFrame, exposure: str, outcome: str, covariates=(), comparator=None,
                   weights=None, cohort: str = "pooled") -> list[EffectEstimate]:
    """Per-arm conditional odds ratios from a main-effects logistic model, Wald CIs."""
    covariates = list(covariates)
    _check_frame(df, [exposure, outcome, *covariates])
    _check_binary(df, outcome)
    arms, comparator = _arms(df, exposure, comparator)
    design = _CovariateDesign(df, covariates)
    cells = collapse(df, [exposure, outcome, *covariates], weights)
    x = cells.column(exposure)
    X = _outcome_design(x, arms, comparator, design.matrix(cells.frame), False)
    others = [a for a in arms if a != comparator]
    names = ["const"] + [f"arm[{a}]" for a in others] + design.names
    fit = fit_logistic(X, cells.column(outcome).astype(float), cells.counts, names)
    out = []
    warn = [NONCOLLAPSIBLE] + ([] if fit.converged else ["logistic fit did not converge"])
    for i, a in enumerate(others, start=1):
        b, se = float(fit.coef[i]), float(fit.se[i])
        out.append(EffectEstimate("conditional", "OR", "Conditional", a, comparator, math.exp(b), se,
                                  math.exp(b - Z95 * se), math.exp(b + Z95 * se), int(len(df)),
                                  cohort, b, fit.converged, tuple(warn)))
    return out


def g_computation(df: pd.DataFrame, exposure: str, outcome: str, covariates=(), comparator=None,
                  interaction: bool = False, measure: str = "OR", n_boot: int = 200, seed: int = 0,
                  cohort: str = "pooled", method_tag: str = "gcomp") -> list[EffectEstimate]:
    """Standardize outcome-model predictions over the empirical covariate distribution."""
    covariates = list(covariates)
    _check_frame(df, [exposure, outcome, *covariates])
    _check_binary(df, outcome)
    arms, comparator = _arms(df, exposure, comparator)
    design = _CovariateDesign(df, covariates)
    cells = collapse(df, [exposure, outcome, *covariates])

    def risks(W):
        preds, conv = _outcome_predictions(cells, W, exposure, outcome, arms, comparator, design, interaction)
        r = np.einsum("bk,bka->ba", W, preds) / W.sum(axis=1, keepdims=True)
        return r, conv, {}

    return _run_marginal(method_tag, risks, cells, arms, comparator, measure, n_boot, seed, cohort)


def crude(df, exposure, outcome, comparator=None, measure="OR", n_boot=200, seed=0, cohort="pooled"):
    return g_computation(df, exposure, outcome, (), comparator, False, measure, n_boot, seed, cohort, "crude")


def ipw_marginal(df: pd.DataFrame, exposure: str, outcome: str, covariates=(), stabilized: bool = False,
                 comparator=None, measure: str = "OR", n_boot: int = 200, seed: int = 0,
                 cohort: str = "pooled", trim: bool = True, weights_out: dict | None = None) -> list[EffectEstimate]:
    """Inverse-probability-of-treatment weighting with per-arm normalized (Hajek) means.

    Stabilized weights multiply by the marginal arm probability; because the
    weighted means are normalized within arm the point estimates are the same
    either way.
    """
    covariates = list(covariates)
    _check_frame(df, [exposure, outcome, *covariates])
    _check_binary(df, outcome)
    arms, comparator = _arms(df, exposure, comparator)
    design = _CovariateDesign(df, covariates)
    cells = collapse(df, [exposure, outcome, *covariates])
    x = cells.column(exposure)
    y = cells.column(outcome).astype(float)
    ind = np.stack([(x == a).astype(float) for a in arms], axis=-1)  # (K, A)

    def risks(W, check=False):
        probs, conv = _propensities(cells, W, exposure, arms, design)
        capped = np.zeros(W.shape[0])
        if trim:
            probs, capped = _trim(probs, W)
        if check:
            _positivity(cells, probs[0], design)
        w = ind[None] / probs
        if stabilized:
            marg = np.einsum("bk,ka->ba", W, ind) / W.sum(axis=1, keepdims=True)
            w = w * marg[:, None, :]
        num = np.einsum("bk,bka,k->ba", W, w, y)
        den = np.einsum("bk,bka->ba", W, w)
        if check and weights_out is not None:
            weights_out["cell_weights"] = (w[0] * ind).sum(axis=-1)
            weights_out["cells"] = cells
        return num / den, conv, {"capped": capped[0]}

    risks(cells.counts[None, :], check=True)
    tag = "ipw_stabilized" if stabilized else "ipw"
    return _run_marginal(tag, risks, cells, arms, comparator, measure, n_boot, seed, cohort)


def aipw(df: pd.DataFrame, exposure: str, outcome: str, covariates=(), outcome_covariates=None,
         propensity_covariates=None, comparator=None, measure: str = "OR", n_boot: int = 200,
         seed: int = 0, cohort: str = "pooled", trim: bool = True) -> list[EffectEstimate]:
    """Augmented IPW for a binary exposure.

    ``outcome_covariates`` / ``propensity_covariates`` default to
    ``covariates``; passing a reduced set deliberately misspecifies one model.
    """
    oc = list(covariates if outcome_covariates is None else outcome_covariates)
    pc = list(covariates if propensity_covariates is None else propensity_covariates)
    allc = list(dict.fromkeys([*covariates, *oc, *pc]))
    _check_frame(df, [exposure, outcome, *allc])
    _check_binary(df, outcome)
    arms, comparator = _arms(df, exposure, comparator)
    if len(arms) != 2:
        raise ValueError("aipw supports a binary exposure only")
    out_design = _CovariateDesign(df, oc)
    ps_design = _CovariateDesign(df, pc)
    cells = collapse(df, [exposure, outcome, *allc])
    x = cells.column(exposure)
    y = cells.column(outcome).astype(float)
    ind = np.stack([(x == a).astype(float) for a in arms], axis=-1)

    def risks(W, check=False):
        m, conv_m = _outcome_predictions(cells, W, exposure, outcome, arms, comparator, out_design, False)
        probs, conv_p = _propensities(cells, W, exposure, arms, ps_design)
        capped = np.zeros(W.shape[0])
        if trim:
            probs, capped = _trim(probs, W)
        if check:
            _positivity(cells, probs[0], ps_design)
        contrib = ind[None] * (y[None, :, None] - m) / probs + m
        r = np.einsum("bk,bka->ba", W, contrib) / W.sum(axis=1, keepdims=True)
        return r, conv_m & conv_p, {"capped": capped[0]}

    risks(cells.counts[None, :], check=True)
    return _run_marginal("aipw", risks, cells, arms, comparator, measure, n_boot, seed, cohort)


def ipw_participation(df: pd.DataFrame, exposure: str, outcome: str, participation_covariates,
                      selected: str = "selected", comparator=None, measure: str = "OR",
                      n_boot: int = 200, seed: int = 0, cohort: str = "pooled") -> list[EffectEstimate]:
    """Weight participants by 1 / P(participation | covariates) fitted on everyone.

    Non-participants contribute only to the participation model; their
    outcome may be missing.  ``participation_covariates`` may include the
    exposure.
    """
    pcov = list(participation_covariates)
    cols = list(dict.fromkeys([exposure, *pcov]))
    _check_frame(df, cols + [selected])
    sel = df[selected].astype(bool).to_numpy()
    if df.loc[sel, outcome].isna().any():
        raise ValueError("participants must have an observed outcome")
    work = df[list(dict.fromkeys([*cols, outcome, selected]))].copy()
    work[selected] = sel.astype(int)
    work[outcome] = work[outcome].where(sel, 0)
    _check_binary(work, outcome)
    arms, comparator = _arms(work.loc[sel], exposure, comparator)
    design = _CovariateDesign(work, pcov)
    cells = collapse(work, list(dict.fromkeys([exposure, outcome, selected, *pcov])))
    x = cells.column(exposure)
    y = cells.column(outcome).astype(float)
    s = cells.column(selected).astype(float)
    C = np.hstack([np.ones((len(x), 1)), design.matrix(cells.frame)])
    ind = np.stack([(x == a).astype(float) for a in arms], axis=-1)

    def risks(W):
        coef, conv, _, _ = irls_batch(C, s, W)
        p = expit(coef @ C.T)
        w = W * s[None] / p
        num = np.einsum("bk,ka,k->ba", w, ind, y)
        den = np.einsum("bk,ka->ba", w, ind)
        return num / den, conv, {}

    return _run_marginal("ipw_participation", risks, cells, arms, comparator, measure, n_boot, seed, cohort)


METHODS = {
    "crude": lambda df, x, y, covs, **kw: crude(df, x, y, **kw),
    "conditional": lambda df, x, y, covs, **kw: conditional_or(
        df, x, y, covs, **{k: v for k, v in kw.items() if k in ("comparator", "cohort")}),
    "ipw": lambda df, x, y, covs, **kw: ipw_marginal(df, x, y, covs, **kw),
    "gcomp": lambda df, x, y, covs, **kw: g_computation(df, x, y, covs, **kw),
    "aipw": lambda df, x, y, covs, **kw: aipw(df, x, y, covs, **kw),
}


def estimate(method: str, df, exposure, outcome, covariates=(), **kwargs) -> list[EffectEstimate]:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHODS)}") from None
    return fn(df, exposure, outcome, list(covariates), **kwargs)


def pooled_analysis(df: pd.DataFrame, exposure: str, outcome: str, covariates=(), method: str = "gcomp",
                    include_cohort_indicator: bool = True, cohort_col: str = "cohort", **kwargs):
    if cohort_col not in df.columns:
        raise KeyError(f"pooled data needs a {cohort_col!r} column")
    covs = list(covariates)
    if include_cohort_indicator and df[cohort_col].nunique() > 1 and cohort_col not in covs:
        covs.append(cohort_col)
    return [replace(e, cohort="pooled")
            for e in estimate(method, df, exposure, outcome, covs, **kwargs)]


def replication_analysis(df: pd.DataFrame | None, exposure: str = "X", outcome: str = "Y", covariates=(),
                         method: str = "conditional", cohort_col: str = "cohort", min_count: int = 10,
                         precomputed: dict | None = None, **kwargs) -> dict:
    """Run ``method`` separately in every cohort.

    ``covariates`` may be a list or a mapping cohort -> list.  A cohort with
    fewer than ``min_count`` rows in any arm yields ``InsufficientData``.
    Pre-computed per-cohort results pass straight through.
    """
    if precomputed is not None:
        return {c: list(v) for c, v in sorted(precomputed.items(), key=lambda kv: str(kv[0]))}
    out: dict = {}
    for cohort in sorted(df[cohort_col].dropna().unique().tolist(), key=str):
        part = df[df[cohort_col] == cohort]
        covs = covariates.get(cohort, []) if isinstance(covariates, dict) else list(covariates)
        counts = part[exposure].value_counts()
        arms = sorted(df[exposure].dropna().unique().tolist())
        short = [a for a in arms if counts.get(a, 0) < min_count]
        if short:
            out[cohort] = InsufficientData(str(cohort), f"fewer than {min_count} rows in arm(s) {short}")
            continue
        out[cohort] = [replace(e, cohort=str(cohort))
                       for e in estimate(method, part, exposure, outcome, covs, **kwargs)]
    return out


@dataclass
class InteractionTest:
    arm: object
    log_or: float
    se: float
    z: float
    p_value: float


def heterogeneity_interaction(df: pd.DataFrame, exposure: str, outcome: str, covariates=(),
                              cohort_col: str = "cohort", comparator=None) -> list[InteractionTest]:
    """Wald tests of arm x cohort interaction terms in a pooled logistic model (two cohorts)."""
    covariates = list(covariates)
    _check_frame(df, [exposure, outcome, cohort_col, *covariates])
    _check_binary(df, outcome)
    cohorts = sorted(df[cohort_col].unique().tolist(), key=str)
    if len(cohorts) != 2:
        raise ValueError(f"interaction test needs exactly 2 cohorts, found {len(cohorts)}")
    arms, comparator = _arms(df, exposure, comparator)
    design = _CovariateDesign(df, covariates)
    cells = collapse(df, [exposure, outcome, cohort_col, *covariates])
    x = cells.column(exposure)
    A = _arm_dummies(x, arms, comparator)
    s = (cells.column(cohort_col) == cohorts[1]).astype(float)[:, None]
    X = np.hstack([np.ones((len(x), 1)), A, s, A * s, design.matrix(cells.frame)])
    fit = fit_logistic(X, cells.column(outcome).astype(float), cells.counts)
    k = A.shape[1]
    out = []
    for i, a in enumerate([a for a in arms if a != comparator]):
        j = 2 + k + i
        b, se = float(fit.coef[j]), float(fit.se[j])
        z = b / se
        out.append(InteractionTest(a, b, se, z, float(2 * norm.sf(abs(z)))))
    return out
