"""Benchmark scenarios S-1A..S-3B with the shared parameter set P1.

Each scenario pairs one canonical DAG with a structural model and the cohort
layout used to simulate it.  Two-cohort scenarios give the cohort indicator
S a 0.5 prior in the model (equal cohort sizes) and pin it to 0 or 1 inside
each cohort, so the model itself describes the pooled target population.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .dag import CausalDag
from .fixtures import dag_1a, dag_1b, dag_2a, dag_2b, dag_3a, dag_3b
from .scm import BernoulliLogit, CohortConfig, Misclassify, StructuralModel, identity_table, true_effect

N_DEFAULT = 20_000

# P1 logit coefficients
X_INTERCEPT = -0.5
Y_INTERCEPT = -1.0
P_INTERCEPT = 0.5
X_COEF = {"C": 0.8, "U": 0.8, "S": 0.6}
Y_COEF = {"X": 0.7, "C": 0.8, "U": 0.8, "S": 0.6, "A": 0.8}
P_COEF = {"X": -0.7, "A": -0.9, "S": 0.6}
SENS, SPEC = 0.85, 0.95
SENS_2, SPEC_2 = 0.75, 0.90

# Documented true marginal ORs, frozen from the exact enumeration oracle.
TRUE_MARGINAL_OR = {
    "S-1A": 1.9157074781446393,
    "S-1B": 1.8972728436677466,
    "S-2A": 1.960911117810889,
    "S-2B": 1.9345758703728642,
    "S-3A": 2.0137527074704775,
    "S-3B": 2.0137527074704775,
}


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    description: str
    model: StructuralModel
    cohorts: tuple[CohortConfig, ...]
    analysis_exposure: str = "X"
    measured_covariates: tuple[str, ...] = ()
    selection: str | None = None
    true_or: float = float("nan")

    @property
    def dag(self) -> CausalDag:
        return self.model.dag

    @property
    def multi_cohort(self) -> bool:
        return len(self.cohorts) > 1

    def with_n(self, n: int) -> "Scenario":
        return replace(self, cohorts=tuple(replace(c, n=n) for c in self.cohorts))

    def recompute_true_or(self) -> float:
        return true_effect(self.model, "Marginal", "OR")


def _logit(parents, intercept, table) -> BernoulliLogit:
    return BernoulliLogit(intercept, {p: table[p] for p in parents})


def _two_cohorts(n: int, selection: str | None = None, extra: dict | None = None) -> tuple[CohortConfig, ...]:
    extra = extra or {}
    return (
        CohortConfig("cohort1", n, {"S": {"prior": 0.0}, **extra.get("cohort1", {})}, selection=selection),
        CohortConfig("cohort2", n, {"S": {"prior": 1.0}, **extra.get("cohort2", {})}, selection=selection),
    )


def s_1a(n: int = N_DEFAULT) -> Scenario:
    dag = dag_1a()
    model = StructuralModel(dag, {"X": _logit(["C", "U"], X_INTERCEPT, X_COEF),
                                  "Y": _logit(["X", "C", "U"], Y_INTERCEPT, Y_COEF)},
                            {"C": 0.5, "U": 0.5}, "X", "Y")
    return Scenario("S-1A", "within-cohort confounding by measured C and unmeasured U",
                    model, (CohortConfig("cohort1", n),), measured_covariates=("C",),
                    true_or=TRUE_MARGINAL_OR["S-1A"])


def s_1b(n: int = N_DEFAULT) -> Scenario:
    dag = dag_1b()
    model = StructuralModel(dag, {"X": _logit(["C", "U", "S"], X_INTERCEPT, X_COEF),
                                  "Y": _logit(["X", "C", "U", "S"], Y_INTERCEPT, Y_COEF)},
                            {"C": 0.5, "U": 0.5, "S": 0.5}, "X", "Y")
    return Scenario("S-1B", "across-cohort confounding: cohort membership affects exposure and outcome",
                    model, _two_cohorts(n), measured_covariates=("C",), true_or=TRUE_MARGINAL_OR["S-1B"])


def s_2a(n: int = N_DEFAULT) -> Scenario:
    dag = dag_2a()
    model = StructuralModel(dag, {"Y": _logit(["X", "A"], Y_INTERCEPT, Y_COEF),
                                  "P": _logit(["X", "A"], P_INTERCEPT, P_COEF)},
                            {"X": 0.5, "A": 0.5}, "X", "Y")
    return Scenario("S-2A", "within-cohort selection: participation depends on exposure and maternal age",
                    model, (CohortConfig("cohort1", n, selection="P"),), measured_covariates=("A",),
                    selection="P", true_or=TRUE_MARGINAL_OR["S-2A"])


def s_2b(n: int = N_DEFAULT) -> Scenario:
    dag = dag_2b()
    model = StructuralModel(dag, {"Y": _logit(["X", "A", "S"], Y_INTERCEPT, Y_COEF),
                                  "P": _logit(["X", "A", "S"], P_INTERCEPT, P_COEF)},
                            {"X": 0.5, "A": 0.5, "S": 0.5}, "X", "Y")
    return Scenario("S-2B", "across-cohort selection: cohort membership affects participation and outcome",
                    model, _two_cohorts(n, selection="P"), measured_covariates=("A",),
                    selection="P", true_or=TRUE_MARGINAL_OR["S-2B"])


def s_3a(n: int = N_DEFAULT) -> Scenario:
    dag = dag_3a()
    model = StructuralModel(dag, {"Y": _logit(["X"], Y_INTERCEPT, Y_COEF),
                                  "X*": Misclassify("X", SENS, SPEC)},
                            {"X": 0.5, "U_X": 0.5}, "X", "Y")
    return Scenario("S-3A", "nondifferential exposure misclassification within a cohort",
                    model, (CohortConfig("cohort1", n),), analysis_exposure="X*",
                    true_or=TRUE_MARGINAL_OR["S-3A"])


def s_3b(n: int = N_DEFAULT) -> Scenario:
    dag = dag_3b()
    # The error mechanism of X* differs by cohort; X** is the harmonized pass-through of X*.
    model = StructuralModel(dag, {"Y": _logit(["X"], Y_INTERCEPT, Y_COEF),
                                  "X*": Misclassify("X", SENS, SPEC),
                                  "X**": identity_table(["X*", "S"], "X*")},
                            {"X": 0.5, "U_X": 0.5, "S": 0.5}, "X", "Y")
    cohorts = _two_cohorts(n, extra={"cohort2": {"X*": {"sensitivity": SENS_2, "specificity": SPEC_2}}})
    return Scenario("S-3B", "across-cohort measurement: instrument accuracy differs by cohort",
                    model, cohorts, analysis_exposure="X**", true_or=TRUE_MARGINAL_OR["S-3B"])


_BUILDERS = {"S-1A": s_1a, "S-1B": s_1b, "S-2A": s_2a, "S-2B": s_2b, "S-3A": s_3a, "S-3B": s_3b}


def scenario_library(n: int = N_DEFAULT) -> dict[str, Scenario]:
    return {k: build(n) for k, build in _BUILDERS.items()}


def get_scenario(scenario_id: str, n: int = N_DEFAULT) -> Scenario:
    base, _, variant = scenario_id.partition("/")
    if base == "S-1B-cancel":
        sc = cancellation_demo(n)
    elif base not in _BUILDERS:
        raise KeyError(f"unknown scenario {scenario_id!r}; known: {sorted(_BUILDERS)}")
    else:
        sc = _BUILDERS[base](n)
    if variant == "noU":
        return drop_unmeasured(sc)
    if variant:
        raise KeyError(f"unknown scenario variant {variant!r}")
    return sc


def drop_unmeasured(scenario: Scenario, node: str = "U") -> Scenario:
    """The same scenario with ``node`` and all its arrows removed (no residual confounding)."""
    m = scenario.model
    dag = m.dag.without_nodes([node])
    mechs = {}
    for k, mech in m.mechanisms.items():
        if isinstance(mech, BernoulliLogit):
            mech = BernoulliLogit(mech.intercept, {p: c for p, c in mech.coefficients.items() if p != node})
        mechs[k] = mech
    priors = {k: v for k, v in m.root_priors.items() if k != node}
    model = StructuralModel(dag, mechs, priors, m.exposure, m.outcome)
    sc = replace(scenario, scenario_id=scenario.scenario_id + "/noU", model=model)
    return replace(sc, true_or=sc.recompute_true_or())


def without_cohort_effects(scenario: Scenario) -> Scenario:
    """Zero every coefficient on the cohort indicator: cohorts become exchangeable."""
    m = scenario.model
    mechs = {}
    for k, mech in m.mechanisms.items():
        if isinstance(mech, BernoulliLogit) and "S" in mech.coefficients:
            mech = BernoulliLogit(mech.intercept, {**mech.coefficients, "S": 0.0})
        mechs[k] = mech
    model = StructuralModel(m.dag, mechs, m.root_priors, m.exposure, m.outcome)
    sc = replace(scenario, scenario_id=scenario.scenario_id + "/identical", model=model)
    return replace(sc, true_or=sc.recompute_true_or())


def replicate_cohorts(scenario: Scenario, k: int = 2) -> Scenario:
    """Split a single-cohort scenario into ``k`` cohorts sharing one generator."""
    (base,) = scenario.cohorts
    cohorts = tuple(replace(base, cohort_id=f"cohort{i + 1}") for i in range(k))
    return replace(scenario, scenario_id=f"{scenario.scenario_id}/x{k}", cohorts=cohorts)


def cancellation_demo(n: int = N_DEFAULT) -> Scenario:
    """S-1B with the U->X effect reversed in cohort 2, so within-cohort confounding has opposite signs."""
    sc = s_1b(n)
    cohorts = (sc.cohorts[0],
               replace(sc.cohorts[1], overrides={**sc.cohorts[1].overrides,
                                                 "X": {"coefficients": {"U": -X_COEF["U"]}}}))
    return replace(sc, scenario_id="S-1B-cancel",
                   description="opposite-signed per-cohort U effects; the pooled biases may offset",
                   cohorts=cohorts)


__all__ = [
    "Scenario", "scenario_library", "get_scenario", "drop_unmeasured", "without_cohort_effects",
    "replicate_cohorts", "cancellation_demo", "TRUE_MARGINAL_OR", "N_DEFAULT",
]
