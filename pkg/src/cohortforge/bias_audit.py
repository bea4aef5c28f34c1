"""Replication sweeps that measure estimator bias against target-trial truth.

A run simulates a scenario R times, applies each estimator configuration,
and aggregates against the exact interventional truth.  "Bias present" means
|bias| > 4 MC-SE and "bias absent" means |bias| < 3 MC-SE; the gap keeps
threshold checks away from the boundary.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import t as student_t

from .estimators import (POOLED_WITH_INDICATOR, estimate, ipw_participation, multiple_impute, rubin_pool)
from .estimators.effects import Z95
from .scenarios import Scenario, get_scenario
from .scm import COHORT, SELECTED, simulate, true_effect

BIAS_PRESENT_Z = 4.0
BIAS_ABSENT_Z = 3.0
CODE = "_cohort"  # cohort indicator coded by configuration position, not by label
THRESHOLD_NOTE = (f"bias present: |bias| > {BIAS_PRESENT_Z:g} MC-SE; "
                  f"bias absent: |bias| < {BIAS_ABSENT_Z:g} MC-SE")

MISSING_DATA = ("auto", "full", "restrict", "complete_case", "mi", "ipw_participation")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    method: str
    covariates: tuple[str, ...] = ()
    missing_data: str = "auto"
    cohort_indicator: bool = False
    label: str = ""
    mi_scope: str = POOLED_WITH_INDICATOR
    mi_m: int = 20
    participation_covariates: tuple[str, ...] | None = None
    exposure: str | None = None

    def __post_init__(self):
        if self.missing_data not in MISSING_DATA:
            raise ValueError(f"unknown missing-data strategy {self.missing_data!r}; expected one of {MISSING_DATA}")
        if not self.label:
            parts = [self.method]
            if self.covariates:
                parts.append("{" + ",".join(self.covariates) + "}")
            if self.cohort_indicator:
                parts.append("+cohort")
            if self.missing_data not in ("auto", "full"):
                parts.append(f"[{self.missing_data}]")
            object.__setattr__(self, "label", "".join(parts))
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @classmethod
    def from_dict(cls, d: Mapping) -> "EstimatorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown estimator keys {sorted(unknown)}")
        d = dict(d)
        for k in ("covariates", "participation_covariates"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str | Scenario
    estimators: tuple[EstimatorConfig, ...]
    replications: int = 200
    n_per_cohort: int | None = None
    seed: int = 0
    n_boot: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def resolve(self) -> Scenario:
        sc = self.scenario if isinstance(self.scenario, Scenario) else get_scenario(self.scenario)
        return sc.with_n(self.n_per_cohort) if self.n_per_cohort else sc

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioSpec":
        known = {"scenario", "estimators", "replications", "n_per_cohort", "seed", "n_boot", "workers"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec keys {sorted(unknown)}")
        ests = tuple(EstimatorConfig.from_dict(e) for e in d.get("estimators", []))
        if not ests:
            raise ValueError("spec needs at least one estimator")
        return cls(d["scenario"], ests, **{k: d[k] for k in known - {"scenario", "estimators"} if k in d})


# ---------------------------------------------------------------------------
# one replication
# ---------------------------------------------------------------------------

@dataclass
class Outcome:
    log_point: float = float("nan")
    se: float = float("nan")
    lo: float = float("nan")
    hi: float = float("nan")
    converged: bool = True
    failed: str = ""


def _est_seed(seed: int, rep: int, j: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(rep), int(j), 0xE57]).generate_state(1)[0])


def _config_warnings(sc: Scenario, cfg: EstimatorConfig) -> list[str]:
    warn = []
    has_missing = bool(sc.selection) or any(c.missingness for c in sc.cohorts)
    if cfg.missing_data in ("mi", "ipw_participation") and not has_missing:
        warn.append(f"{cfg.missing_data} requested but the scenario has no missing data; analysed as complete data")
    if cfg.cohort_indicator and not sc.multi_cohort:
        warn.append("cohort indicator requested for a single-cohort scenario; ignored")
    return warn


def _covariates(sc: Scenario, cfg: EstimatorConfig) -> list[str]:
    covs = list(cfg.covariates)
    if cfg.cohort_indicator and sc.multi_cohort:
        covs.append(CODE)
    return covs


def participation_model(sc: Scenario) -> list[str]:
    """Correctly specified participation covariates: observed parents of the selection node."""
    out = []
    for p in sc.dag.parents(sc.selection):
        if p == "S":
            out.append(CODE)
        elif sc.dag.node(p).observed:
            out.append(p)
    return out


def _summarize(est) -> Outcome:
    return Outcome(est.log_point, est.se, math.log(est.ci_low), math.log(est.ci_high), bool(est.converged))


def _apply(sc: Scenario, cfg: EstimatorConfig, frame: pd.DataFrame, seed: int, n_boot: int) -> Outcome:
    x = cfg.exposure or sc.analysis_exposure
    y = sc.model.outcome
    covs = _covariates(sc, cfg)
    strategy = cfg.missing_data
    has_missing = bool(sc.selection) or frame.drop(columns=[SELECTED]).isna().any().any()
    if strategy in ("mi", "ipw_participation") and not has_missing:
        strategy = "full"
    kw = {"n_boot": n_boot, "seed": seed}
    if strategy == "auto":
        strategy = "restrict" if sc.selection else "complete_case"
    if strategy == "full":
        data = frame
    elif strategy in ("restrict", "complete_case"):
        data = frame[frame[SELECTED]] if sc.selection else frame
        data = data[data[[x, y, *covs]].notna().all(axis=1)]
    elif strategy == "ipw_participation":
        pcov = list(cfg.participation_covariates) if cfg.participation_covariates is not None \
            else participation_model(sc)
        est = ipw_participation(frame, x, y, pcov, selected=SELECTED, **kw)
        return _summarize(est[-1])
    else:  # mi
        cols = list(dict.fromkeys([x, y, *cfg.covariates]))
        if sc.selection:
            # non-participants keep their covariates but lose the outcome
            frame = frame.assign(**{y: frame[y].where(frame[SELECTED], pd.NA)})
        imputed = multiple_impute(frame[cols + [CODE]], cfg.mi_m, cfg.mi_scope, seed=seed,
                                  cohort_col=CODE)
        ests = [estimate(cfg.method, d, x, y, covs, **kw)[-1] for d in imputed]
        pooled = rubin_pool([(e.log_point, e.se**2) for e in ests])
        q = float(student_t.ppf(0.975, pooled.df)) if math.isfinite(pooled.df) else Z95
        return Outcome(pooled.estimate, pooled.se, pooled.estimate - q * pooled.se,
                       pooled.estimate + q * pooled.se, all(e.converged for e in ests))
    return _summarize(estimate(cfg.method, data, x, y, covs, **kw)[-1])


def _prepare(sc: Scenario, seed: int, rep: int) -> pd.DataFrame:
    frame = simulate(sc.model, sc.cohorts, seed, replication=rep).frame
    codes = {c.cohort_id: i for i, c in enumerate(sc.cohorts)}
    code = frame[COHORT].map(codes).astype(int)
    frame = frame.drop(columns=[COHORT])
    frame[CODE] = code if len(codes) <= 2 else code.map(lambda i: f"c{i:03d}")
    return frame


def _replicate(args) -> list[Outcome]:
    sc, configs, seed, rep, n_boot = args
    frame = _prepare(sc, seed, rep)
    out = []
    for j, cfg in enumerate(configs):
        try:
            out.append(_apply(sc, cfg, frame, _est_seed(seed, rep, j), n_boot))
        except (ValueError, np.linalg.LinAlgError) as exc:
            out.append(Outcome(converged=False, failed=f"{type(exc).__name__}: {exc}"))
    return out


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def truth_for(sc: Scenario, cfg: EstimatorConfig) -> float:
    """True log-OR targeted by ``cfg``: conditional for regression, marginal otherwise."""
    if cfg.method != "conditional":
        return math.log(sc.true_or) if math.isfinite(sc.true_or) else \
            true_effect(sc.model, "Marginal", "OR", scale="log")
    nodes = set(sc.model.dag.ids)
    strata = [c for c in cfg.covariates if c in nodes]
    if cfg.cohort_indicator and "S" in nodes:
        strata.append("S")
    if not strata:
        return true_effect(sc.model, "Marginal", "OR", scale="log")
    return true_effect(sc.model, "Conditional", "OR", strata=strata, scale="log")


@dataclass
class BiasRow:
    label: str
    method: str
    estimand: str
    truth: float
    mean: float
    median: float
    bias: float
    mc_se: float
    z: float
    coverage: float
    ci_width: float
    n_ok: int
    n_nonconverged: int
    n_failed: int
    warnings: tuple[str, ...] = ()

    def verdict(self) -> str:
        if not math.isfinite(self.z):
            return "undetermined"
        if abs(self.z) > BIAS_PRESENT_Z:
            return "bias present"
        if abs(self.z) < BIAS_ABSENT_Z:
            return "bias absent"
        return "inconclusive"


def _aggregate(cfg: EstimatorConfig, truth: float, outcomes: Sequence[Outcome], warnings) -> BiasRow:
    ok = [o for o in outcomes if not o.failed and math.isfinite(o.log_point)]
    est = np.array([o.log_point for o in ok])
    failures = sorted({o.failed for o in outcomes if o.failed})
    warn = list(warnings) + [f"failed: {f}" for f in failures[:3]]
    n = len(est)
    mean = float(est.mean()) if n else float("nan")
    mc_se = float(est.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    bias = mean - truth
    z = bias / mc_se if mc_se and math.isfinite(mc_se) else float("nan")
    cover = [o.lo <= truth <= o.hi for o in ok if math.isfinite(o.lo) and math.isfinite(o.hi)]
    widths = [o.hi - o.lo for o in ok if math.isfinite(o.lo) and math.isfinite(o.hi)]
    return BiasRow(
        cfg.label, cfg.method, "Conditional OR" if cfg.method == "conditional" else "Marginal OR",
        truth, mean, float(np.median(est)) if n else float("nan"), bias, mc_se, z,
        float(np.mean(cover)) if cover else float("nan"),
        float(np.mean(widths)) if widths else float("nan"),
        n, sum(1 for o in ok if not o.converged), len(outcomes) - n, tuple(warn))


@dataclass
class BiasReport:
    scenario_id: str
    replications: int
    n_per_cohort: int
    seed: int
    rows: list[BiasRow]
    raw: list[list[Outcome]] = field(default_factory=list, repr=False)

    def row(self, label: str) -> BiasRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario_id, "replications": self.replications,
                "n_per_cohort": self.n_per_cohort, "seed": self.seed, "thresholds": THRESHOLD_NOTE,
                "rows": [{**_row_dict(r), "verdict": r.verdict()} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["scenario", *_ROW_FIELDS, "verdict"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            d = _row_dict(r)
            w.writerow({"scenario": self.scenario_id, **{k: _fmt(d[k]) for k in _ROW_FIELDS},
                        "verdict": r.verdict()})
        return buf.getvalue()

    def raw_csv(self) -> str:
        """Per-replication estimates, one line per (replication, configuration)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "replication", "label", "log_or", "se", "ci_low_log", "ci_high_log",
                     "converged", "failed"])
        for rep, outs in enumerate(self.raw):
            for row, o in zip(self.rows, outs):
                w.writerow([self.scenario_id, rep, row.label, _fmt(o.log_point), _fmt(o.se), _fmt(o.lo),
                            _fmt(o.hi), int(o.converged), o.failed])
        return buf.getvalue()

    def to_text(self) -> str:
        head = (f"scenario {self.scenario_id}: R={self.replications}, n/cohort={self.n_per_cohort}, "
                f"seed={self.seed}\n{THRESHOLD_NOTE}\n")
        cols = ["estimator", "truth", "mean", "bias", "MC-SE", "bias/SE", "cover", "width", "ok", "nc", "fail",
                "verdict"]
        lines = [cols]
        for r in self.rows:
            lines.append([r.label, f"{r.truth:.4f}", f"{r.mean:.4f}", f"{r.bias:+.4f}", f"{r.mc_se:.4f}",
                          f"{r.z:+.2f}", f"{r.coverage:.3f}", f"{r.ci_width:.4f}", str(r.n_ok),
                          str(r.n_nonconverged), str(r.n_failed), r.verdict()])
        widths = [max(len(l[i]) for l in lines) for i in range(len(cols))]
        body = "\n".join("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines)
        notes = [f"  {r.label}: {w}" for r in self.rows for w in r.warnings]
        return head + body + "\n" + ("warnings:\n" + "\n".join(notes) + "\n" if notes else "")


_ROW_FIELDS = ["label", "method", "estimand", "truth", "mean", "median", "bias", "mc_se", "z", "coverage",
               "ci_width", "n_ok", "n_nonconverged", "n_failed", "warnings"]


def _row_dict(r: BiasRow) -> dict:
    d = asdict(r)
    d["warnings"] = list(r.warnings)
    return d


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, list):
        return "; ".join(v)
    return str(v)


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def run_scenario(spec: ScenarioSpec, keep_raw: bool = False) -> BiasReport:
    sc = spec.resolve()
    configs = list(spec.estimators)
    if not configs:
        raise ValueError("no estimator configurations")
    jobs = [(sc, configs, spec.seed, r, spec.n_boot) for r in range(spec.replications)]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, len(jobs) // (4 * spec.workers))))
    else:
        results = [_replicate(j) for j in jobs]
    rows = []
    for j, cfg in enumerate(configs):
        rows.append(_aggregate(cfg, truth_for(sc, cfg), [res[j] for res in results], _config_warnings(sc, cfg)))
    n = sc.cohorts[0].n
    return BiasReport(sc.scenario_id, spec.replications, n, spec.seed, rows, results if keep_raw else [])


@dataclass
class PoolingContrast:
    scenario_id: str
    without: BiasRow
    remedy: BiasRow
    report: BiasReport

    @property
    def reduction(self) -> float:
        """1 - |bias with remedy| / |bias without|."""
        return 1.0 - abs(self.remedy.bias) / abs(self.without.bias) if self.without.bias else float("nan")

    @property
    def separation(self) -> float:
        """Difference between the two arms in units of their combined MC-SE."""
        se = math.hypot(self.without.mc_se, self.remedy.mc_se)
        return (self.without.mean - self.remedy.mean) / se if se else float("nan")

    def to_dict(self) -> dict:
        return _finite({"scenario": self.scenario_id, "without": _row_dict(self.without),
                        "remedy": _row_dict(self.remedy), "bias_reduction": self.reduction})


def pooling_contrast(spec: ScenarioSpec, estimator: EstimatorConfig | None = None,
                     remedy: EstimatorConfig | None = None) -> PoolingContrast:
    """Run ``estimator`` with and without a cohort-level remedy on the same replicates.

    The default remedy adds the cohort indicator to the adjustment set.
    """
    sc = spec.resolve()
    if not sc.multi_cohort:
        raise ValueError(f"scenario {sc.scenario_id} has a single cohort; nothing to contrast")
    estimator = estimator or spec.estimators[0]
    if remedy is None:
        remedy = replace(estimator, cohort_indicator=True, label="")
    if remedy.label == estimator.label:
        remedy = replace(remedy, label=remedy.label + "*")
    report = run_scenario(replace(spec, estimators=(estimator, remedy)))
    return PoolingContrast(sc.scenario_id, report.rows[0], report.rows[1], report)


# ---------------------------------------------------------------------------
# quantitative bias analysis
# ---------------------------------------------------------------------------

class MisclassificationError(ValueError):
    pass


@dataclass
class MisclassificationCorrection:
    observed: dict
    corrected: dict
    observed_or: float
    corrected_or: float


def _odds_ratio(counts) -> float:
    (a, b), (c, d) = counts["cases"], counts["controls"]
    with np.errstate(divide="ignore", invalid="ignore"):
        return float((a * d) / (b * c)) if b * c > 0 else float("inf")


def misclassification_correct(counts: Mapping[str, Sequence[float]], sensitivity: float,
                              specificity: float) -> MisclassificationCorrection:
    """Back-calculate exposure counts under nondifferential misclassification.

    ``counts`` maps each outcome stratum ("cases", "controls") to its
    (exposed, unexposed) observed counts.  Within a stratum of total N with
    observed exposed count e, the true exposed count is
    (e - (1 - specificity) * N) / (sensitivity + specificity - 1).
    """
    denom = sensitivity + specificity - 1.0
    if abs(denom) < 1e-12:
        raise MisclassificationError("non-invertible: sensitivity + specificity = 1")
    if denom < 0:
        raise MisclassificationError("sensitivity + specificity must exceed 1")
    corrected = {}
    for stratum in ("cases", "controls"):
        e, u = (float(v) for v in counts[stratum])
        total = e + u
        a = (e - (1.0 - specificity) * total) / denom
        b = total - a
        if a < 0 or b < 0:
            raise MisclassificationError(
                f"parameters inconsistent with data: negative corrected count among {stratum}")
        corrected[stratum] = (a, b)
    observed = {k: tuple(float(v) for v in counts[k]) for k in ("cases", "controls")}
    return MisclassificationCorrection(observed, corrected, _odds_ratio(observed), _odds_ratio(corrected))
