"""Structural causal models over discrete DAGs and multi-cohort simulation.

Every variable is binary or small-categorical, so the interventional
distribution P(Y | do(X = a)) can be computed exactly by enumerating the
joint state space.  That enumeration is the target-trial truth that
simulated analyses are scored against.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .dag import CausalDag, NodeKind, dag_from_dict, dag_to_dict

STATE_SPACE_LIMIT = 2**20
COHORT = "cohort"
SELECTED = "selected"


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# mechanisms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BernoulliLogit:
    intercept: float
    # parent -> coefficient, or parent -> {level: coefficient} for a categorical parent
    coefficients: Mapping[str, float | Mapping[int, float]] = field(default_factory=dict)

    def prob(self, parents: Mapping[str, np.ndarray]) -> np.ndarray:
        n = len(next(iter(parents.values()))) if parents else 1
        eta = np.full(n, float(self.intercept))
        for p, c in self.coefficients.items():
            v = parents[p]
            if isinstance(c, Mapping):
                for level, b in c.items():
                    eta = eta + b * (v == level)
            else:
                eta = eta + c * v
        return expit(eta)


@dataclass(frozen=True)
class Deterministic:
    parents: tuple[str, ...]
    table: Mapping[tuple[int, ...], int]

    def value(self, parents: Mapping[str, np.ndarray]) -> np.ndarray:
        cols = [np.asarray(parents[p]) for p in self.parents]
        n = len(cols[0])
        out = np.full(n, -1, dtype=np.int64)
        for key, val in self.table.items():
            hit = np.ones(n, bool)
            for c, k in zip(cols, key):
                hit &= c == k
            out[hit] = val
        if np.any(out < 0):
            raise ModelError(f"truth table has no entry for some parent configuration of {self.parents}")
        return out

    @property
    def levels(self) -> list[int]:
        return sorted(set(self.table.values()))


@dataclass(frozen=True)
class Misclassify:
    source: str
    sensitivity: float
    specificity: float

    def prob(self, parents: Mapping[str, np.ndarray]) -> np.ndarray:
        x = np.asarray(parents[self.source])
        return np.where(x == 1, self.sensitivity, 1.0 - self.specificity)


Family = BernoulliLogit | Deterministic | Misclassify


def identity_table(parents: Sequence[str], keep: str) -> Deterministic:
    """Binary truth table returning the parent ``keep`` (a pass-through harmonization)."""
    idx = list(parents).index(keep)
    table = {}
    for combo in np.ndindex(*([2] * len(parents))):
        table[tuple(int(c) for c in combo)] = int(combo[idx])
    return Deterministic(tuple(parents), table)


# ---------------------------------------------------------------------------
# model and cohort configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructuralModel:
    dag: CausalDag
    mechanisms: Mapping[str, Family]
    root_priors: Mapping[str, float]
    exposure: str
    outcome: str

    def order(self) -> list[str]:
        return self.dag.topological_order()

    def validate(self) -> None:
        order = self.order()
        ids = set(order)
        for n in (self.exposure, self.outcome):
            if n not in ids:
                raise ModelError(f"{n!r} is not a node of the DAG")
        for n in order:
            parents = set(self.dag.parents(n))
            if not parents:
                if n not in self.root_priors and n not in self.mechanisms:
                    raise ModelError(f"root {n!r} needs a prior")
                continue
            if n not in self.mechanisms:
                raise ModelError(f"non-root {n!r} needs a mechanism")
        for n, mech in self.mechanisms.items():
            if n not in ids:
                raise ModelError(f"mechanism for unknown node {n!r}")
            parents = set(self.dag.parents(n))
            if isinstance(mech, BernoulliLogit):
                extra = set(mech.coefficients) - parents
            elif isinstance(mech, Deterministic):
                extra = set(mech.parents) - parents
            else:
                extra = {mech.source} - parents
                if not (0 < mech.sensitivity <= 1 and 0 < mech.specificity <= 1):
                    raise ModelError(f"sensitivity/specificity of {n!r} must lie in (0, 1]")
            if extra:
                raise ModelError(f"mechanism of {n!r} references non-parents {sorted(extra)}")
        for n, p in self.root_priors.items():
            if not 0 <= p <= 1:
                raise ModelError(f"prior of {n!r} outside [0, 1]")
        space = 1
        for n in order:
            space *= len(self.levels(n))
        if space > STATE_SPACE_LIMIT:
            raise ModelError(f"joint state space {space} exceeds {STATE_SPACE_LIMIT}")

    def levels(self, node: str) -> list[int]:
        mech = self.mechanisms.get(node)
        if isinstance(mech, Deterministic):
            return mech.levels
        return [0, 1]

    def with_overrides(self, overrides: Mapping[str, Mapping]) -> "StructuralModel":
        mechanisms = dict(self.mechanisms)
        priors = dict(self.root_priors)
        for node, ov in overrides.items():
            if node not in mechanisms and node not in priors:
                raise ModelError(f"override references unknown node {node!r}")
            ov = dict(ov)
            if "prior" in ov:
                if node not in priors:
                    raise ModelError(f"{node!r} is not a root; cannot override its prior")
                priors[node] = float(ov.pop("prior"))
            if not ov:
                continue
            mech = mechanisms.get(node)
            if isinstance(mech, BernoulliLogit):
                coefs = dict(mech.coefficients)
                for p, c in ov.get("coefficients", {}).items():
                    if p not in coefs:
                        raise ModelError(f"override of {node!r} references unknown coefficient {p!r}")
                    coefs[p] = c
                unknown = set(ov) - {"intercept", "coefficients"}
                mechanisms[node] = BernoulliLogit(ov.get("intercept", mech.intercept), coefs)
            elif isinstance(mech, Misclassify):
                unknown = set(ov) - {"sensitivity", "specificity"}
                mechanisms[node] = replace(mech, **{k: float(v) for k, v in ov.items()
                                                    if k in ("sensitivity", "specificity")})
            else:
                unknown = set(ov)
            if unknown:
                raise ModelError(f"override of {node!r} has unsupported keys {sorted(unknown)}")
        return StructuralModel(self.dag, mechanisms, priors, self.exposure, self.outcome)


@dataclass(frozen=True)
class Missingness:
    column: str
    rate: float | None = None  # MCAR
    intercept: float = 0.0  # MAR: logit P(missing) = intercept + sum coef * value
    coefficients: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class CohortConfig:
    cohort_id: str
    n: int
    overrides: Mapping[str, Mapping] = field(default_factory=dict)
    missingness: tuple[Missingness, ...] = ()
    selection: str | None = None

    def validate(self, model: StructuralModel) -> None:
        if self.n < 1:
            raise ModelError(f"cohort {self.cohort_id!r}: n must be >= 1")
        model.with_overrides(self.overrides)
        nodes = set(model.dag.ids)
        if self.selection is not None and self.selection not in nodes:
            raise ModelError(f"cohort {self.cohort_id!r}: unknown selection node {self.selection!r}")
        for m in self.missingness:
            if m.column not in nodes:
                raise ModelError(f"missingness on unknown column {m.column!r}")
            if m.rate is not None and not 0 <= m.rate <= 1:
                raise ModelError(f"missingness rate for {m.column!r} outside [0, 1]")
            for p in m.coefficients:
                if p not in nodes or p == m.column or not model.dag.node(p).observed:
                    raise ModelError(f"MAR predictor {p!r} for {m.column!r} must be another observed node")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class MultiCohortDataset:
    frame: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return [c for c in self.frame.columns if c not in (COHORT, SELECTED)]

    @property
    def cohorts(self) -> list[str]:
        return list(pd.unique(self.frame[COHORT]))

    def cohort(self, cohort_id: str) -> "MultiCohortDataset":
        part = self.frame[self.frame[COHORT] == cohort_id].reset_index(drop=True)
        return MultiCohortDataset(part, dict(self.metadata))

    def to_csv(self, path, sidecar: bool = True) -> None:
        path = Path(path)
        out = self.frame.copy()
        out[SELECTED] = out[SELECTED].astype(int)
        out.to_csv(path, index=False, na_rep="", lineterminator="\n")
        if sidecar:
            with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
                json.dump(self.metadata, fh, indent=2, sort_keys=True, default=str)
                fh.write("\n")

    @classmethod
    def read_csv(cls, path) -> "MultiCohortDataset":
        path = Path(path)
        frame = pd.read_csv(path, dtype={COHORT: str})
        for c in frame.columns:
            if c not in (COHORT,) and pd.api.types.is_numeric_dtype(frame[c]):
                vals = frame[c].dropna()
                if (vals == vals.round()).all():
                    frame[c] = frame[c].astype("Int64")
        if SELECTED in frame:
            frame[SELECTED] = frame[SELECTED].astype(bool)
        else:
            frame[SELECTED] = True
        meta_path = path.with_suffix(path.suffix + ".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(frame, meta)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _sample(model: StructuralModel, n: int, rng: np.random.Generator,
            interventions: Mapping[str, int] | None = None) -> dict[str, np.ndarray]:
    interventions = dict(interventions or {})
    values: dict[str, np.ndarray] = {}
    for node in model.order():
        if node in interventions:
            values[node] = np.full(n, int(interventions[node]), dtype=np.int64)
            continue
        mech = model.mechanisms.get(node)
        if mech is None:
            values[node] = (rng.random(n) < model.root_priors[node]).astype(np.int64)
        elif isinstance(mech, Deterministic):
            values[node] = mech.value(values)
        else:
            p = mech.prob(values)
            values[node] = (rng.random(n) < p).astype(np.int64)
    return values


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def simulate(model: StructuralModel, cohorts: Sequence[CohortConfig], seed: int,
             interventions: Mapping[str, int] | None = None, replication: int = 0) -> MultiCohortDataset:
    """Ancestral sampling per cohort, then missingness; reproducible from ``seed``.

    Each cohort draws from its own stream keyed by (seed, replication, cohort
    position), so replications can run in any order.
    """
    model.validate()
    frames = []
    for ci, cfg in enumerate(cohorts):
        cfg.validate(model)
        cm = model.with_overrides(cfg.overrides)
        values = _sample(cm, cfg.n, _stream(seed, replication, ci, 0), interventions)
        frame = pd.DataFrame({k: pd.array(v, dtype="Int64") for k, v in values.items()})
        if cfg.selection is not None:
            selected = values[cfg.selection] == 1
        else:
            selected = np.ones(cfg.n, bool)
        mrng = _stream(seed, replication, ci, 1)
        masks = {}
        for m in cfg.missingness:
            if m.rate is not None:
                p = np.full(cfg.n, m.rate)
            else:
                eta = np.full(cfg.n, float(m.intercept))
                for pred, b in m.coefficients.items():
                    eta = eta + b * values[pred]
                p = expit(eta)
            masks[m.column] = mrng.random(cfg.n) < p
        for col, mask in masks.items():
            frame.loc[mask, col] = pd.NA
        frame.insert(0, COHORT, cfg.cohort_id)
        frame[SELECTED] = selected
        frames.append(frame)
    frame = pd.concat(frames, ignore_index=True)
    meta = {"seed": int(seed), "replication": int(replication),
            "cohorts": [c.cohort_id for c in cohorts],
            "observed": {n.id: n.observed for n in model.dag.nodes}}
    if interventions:
        meta["interventions"] = dict(interventions)
    return MultiCohortDataset(frame, meta)


def restrict_to_selected(dataset: MultiCohortDataset) -> MultiCohortDataset:
    keep = dataset.frame[SELECTED].to_numpy(bool)
    return MultiCohortDataset(dataset.frame[keep].reset_index(drop=True), dict(dataset.metadata))


def mask_unselected(dataset: MultiCohortDataset, columns: Iterable[str]) -> MultiCohortDataset:
    """Blank ``columns`` for non-participants, turning selection into missing outcome data."""
    frame = dataset.frame.copy()
    out = ~frame[SELECTED].to_numpy(bool)
    for c in columns:
        frame.loc[out, c] = pd.NA
    return MultiCohortDataset(frame, dict(dataset.metadata))


# ---------------------------------------------------------------------------
# pooling and harmonization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Coarsen:
    variable: str
    merge_map: Mapping


class HarmonizationError(ValueError):
    pass


def _apply_coarsen(frame: pd.DataFrame, rule: Coarsen, cohort: str) -> pd.DataFrame:
    if rule.variable not in frame:
        return frame
    col = frame[rule.variable]
    observed = col.dropna()
    mapping = dict(rule.merge_map)
    unmapped = sorted({v for v in observed.unique().tolist() if v not in mapping}, key=str)
    if unmapped:
        raise HarmonizationError(f"cohort {cohort!r}: categories {unmapped} of {rule.variable!r} "
                                 "have no entry in the merge map")
    frame = frame.copy()
    frame[rule.variable] = col.map(mapping)
    return frame


def pool(datasets: Sequence[MultiCohortDataset] | Mapping[str, MultiCohortDataset],
         harmonization: Coarsen | Sequence[Coarsen] | None = None) -> MultiCohortDataset:
    """Stack cohort datasets, applying category merges; keeps the cohort column."""
    if isinstance(datasets, Mapping):
        items = []
        for cid, ds in datasets.items():
            f = ds.frame.copy()
            f[COHORT] = cid
            items.append(MultiCohortDataset(f, ds.metadata))
        datasets = items
    rules = [] if harmonization is None else (
        [harmonization] if isinstance(harmonization, Coarsen) else list(harmonization))
    frames = []
    for ds in datasets:
        f = ds.frame
        if SELECTED not in f:
            f = f.assign(**{SELECTED: True})
        cid = str(f[COHORT].iloc[0]) if len(f) else "?"
        for rule in rules:
            f = _apply_coarsen(f, rule, cid)
        frames.append(f)
    cols = [set(f.columns) for f in frames]
    if any(c != cols[0] for c in cols):
        diff = sorted(set.union(*cols) - set.intersection(*cols))
        raise HarmonizationError(f"irreconcilable columns: {diff}")
    # Categorical codings must overlap across cohorts unless a merge map reconciled them.
    for c in sorted(cols[0] - {COHORT, SELECTED}):
        kinds = [f[c] for f in frames]
        if all(not pd.api.types.is_numeric_dtype(k) for k in kinds):
            sets = [set(k.dropna().unique().tolist()) for k in kinds]
            if any(s != sets[0] for s in sets):
                raise HarmonizationError(f"column {c!r} has different codings across cohorts: "
                                         + "; ".join(str(sorted(s, key=str)) for s in sets))
    order = list(frames[0].columns)
    frame = pd.concat([f[order] for f in frames], ignore_index=True)
    meta = {"pooled_from": [ds.metadata for ds in datasets],
            "harmonization": [{"variable": r.variable, "merge_map": dict(r.merge_map)} for r in rules]}
    return MultiCohortDataset(frame, meta)


# ---------------------------------------------------------------------------
# exact interventional oracle
# ---------------------------------------------------------------------------

def _enumerate(model: StructuralModel, interventions: Mapping[str, int], keep: Iterable[str]):
    """Exact joint distribution over ``keep`` and their ancestors under the interventions."""
    keep = set(keep)
    needed = keep | model.dag.ancestors(keep)
    order = [n for n in model.order() if n in needed]
    states: dict[str, np.ndarray] = {}
    prob = np.ones(1)
    for node in order:
        if node in interventions:
            states[node] = np.full(len(prob), int(interventions[node]), dtype=np.int64)
            continue
        mech = model.mechanisms.get(node)
        if isinstance(mech, Deterministic):
            states[node] = mech.value(states) if len(prob) else np.zeros(0, np.int64)
            continue
        p1 = np.full(len(prob), model.root_priors[node]) if mech is None else mech.prob(states)
        p1 = np.broadcast_to(p1, prob.shape)
        if len(prob) * 2 > STATE_SPACE_LIMIT:
            raise ModelError("state space too large for exact enumeration")
        states = {k: np.concatenate([v, v]) for k, v in states.items()}
        states[node] = np.concatenate([np.zeros(len(prob), np.int64), np.ones(len(prob), np.int64)])
        prob = np.concatenate([prob * (1 - p1), prob * p1])
    return states, prob


def exposure_levels(model: StructuralModel) -> list[int]:
    return model.levels(model.exposure)


def interventional_risks(model: StructuralModel, strata: Sequence[str] = ()) -> dict:
    """P(Y=1 | do(X=a)) per exposure level; keyed by (a, stratum values) when ``strata`` given."""
    model.validate()
    out = {}
    for a in exposure_levels(model):
        states, prob = _enumerate(model, {model.exposure: a}, [model.outcome, *strata])
        y = states[model.outcome] == 1
        if not strata:
            out[a] = float(np.sum(prob[y]))
            continue
        keys = np.column_stack([states[s] for s in strata])
        for key in sorted({tuple(int(v) for v in row) for row in keys}):
            m = np.all(keys == np.array(key), axis=1)
            pm = float(np.sum(prob[m]))
            out[(a, key)] = (float(np.sum(prob[m & y])) / pm, pm)
    return out


def contrast(r1: float, r0: float, measure: str) -> float:
    """Contrast on the analysis scale: log OR, log RR or RD."""
    if measure == "OR":
        return math.log(r1 / (1 - r1)) - math.log(r0 / (1 - r0))
    if measure == "RR":
        return math.log(r1) - math.log(r0)
    if measure == "RD":
        return r1 - r0
    raise ValueError(f"unknown measure {measure!r}")


def true_effect(model: StructuralModel, estimand: str = "Marginal", measure: str = "OR",
                strata: Sequence[str] = (), arm: int | None = None, comparator: int | None = None,
                scale: str = "natural") -> float:
    """Target-trial effect of ``arm`` vs ``comparator`` by exact enumeration.

    ``Conditional`` averages the stratum-specific contrasts (on the log scale
    for OR/RR) with weights P(strata); when the contrast is homogeneous this
    is the common conditional effect.  ``scale='log'`` returns the analysis
    scale instead of the natural one.
    """
    levels = exposure_levels(model)
    comparator = levels[0] if comparator is None else comparator
    arm = levels[-1] if arm is None else arm
    if estimand == "Marginal":
        risks = interventional_risks(model)
        t = contrast(risks[arm], risks[comparator], measure)
    elif estimand == "Conditional":
        if not strata:
            raise ValueError("conditional estimand needs strata")
        risks = interventional_risks(model, strata)
        t = 0.0
        for (a, key), (r1, pm) in risks.items():
            if a != arm:
                continue
            r0, _ = risks[(comparator, key)]
            t += pm * contrast(r1, r0, measure)
    else:
        raise ValueError(f"unknown estimand {estimand!r}")
    if scale == "log" or measure == "RD":
        return t
    return math.exp(t)


# ---------------------------------------------------------------------------
# model JSON
# ---------------------------------------------------------------------------

def _family_to_dict(f: Family) -> dict:
    if isinstance(f, BernoulliLogit):
        coefs = {p: ({str(k): v for k, v in c.items()} if isinstance(c, Mapping) else c)
                 for p, c in f.coefficients.items()}
        return {"family": "BernoulliLogit", "intercept": f.intercept, "coefficients": coefs}
    if isinstance(f, Deterministic):
        return {"family": "Deterministic", "parents": list(f.parents),
                "table": [[list(k), v] for k, v in sorted(f.table.items())]}
    return {"family": "Misclassify", "source": f.source, "sensitivity": f.sensitivity,
            "specificity": f.specificity}


def _family_from_dict(d: Mapping) -> Family:
    kind = d.get("family")
    if kind == "BernoulliLogit":
        coefs = {}
        for p, c in d.get("coefficients", {}).items():
            coefs[p] = {int(k): float(v) for k, v in c.items()} if isinstance(c, Mapping) else float(c)
        return BernoulliLogit(float(d.get("intercept", 0.0)), coefs)
    if kind == "Deterministic":
        return Deterministic(tuple(d["parents"]), {tuple(int(v) for v in k): int(v) for k, v in d["table"]})
    if kind == "Misclassify":
        return Misclassify(d["source"], float(d["sensitivity"]), float(d["specificity"]))
    raise ModelError(f"unknown mechanism family {kind!r}")


def model_to_dict(model: StructuralModel) -> dict:
    return {
        "dag": dag_to_dict(model.dag),
        "exposure": model.exposure,
        "outcome": model.outcome,
        "root_priors": dict(model.root_priors),
        "mechanisms": {n: _family_to_dict(f) for n, f in model.mechanisms.items()},
    }


def model_from_dict(d: Mapping) -> StructuralModel:
    dag = dag_from_dict(d["dag"])
    model = StructuralModel(dag, {n: _family_from_dict(f) for n, f in d["mechanisms"].items()},
                            {n: float(p) for n, p in d.get("root_priors", {}).items()},
                            d.get("exposure", dag.exposure), d.get("outcome", dag.outcome))
    model.validate()
    return model


def cohort_to_dict(c: CohortConfig) -> dict:
    return {
        "cohort_id": c.cohort_id, "n": c.n,
        "overrides": {k: dict(v) for k, v in c.overrides.items()},
        "missingness": [{"column": m.column, "rate": m.rate, "intercept": m.intercept,
                         "coefficients": dict(m.coefficients)} for m in c.missingness],
        "selection": c.selection,
    }


def cohort_from_dict(d: Mapping) -> CohortConfig:
    miss = tuple(Missingness(m["column"], m.get("rate"), float(m.get("intercept", 0.0)),
                             dict(m.get("coefficients", {}))) for m in d.get("missingness", []))
    return CohortConfig(str(d["cohort_id"]), int(d["n"]), dict(d.get("overrides", {})), miss, d.get("selection"))
