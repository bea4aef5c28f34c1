"""Target-trial protocols, per-cohort emulation plans and emulation-gap audits.

Comparisons are structural: plans declare epochs, geographies, instrument
ids, wave ages and codings as explicit fields, and only those fields are
compared.  Free text is carried along for the report but never parsed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Mapping, Sequence

from .dag import BiasKind

ELIGIBILITY = "Eligibility"
TREATMENT = "Treatment"
ASSIGNMENT = "Assignment"
FOLLOW_UP = "FollowUp"
OUTCOME = "Outcome"
COMPONENTS = (ELIGIBILITY, TREATMENT, ASSIGNMENT, FOLLOW_UP, OUTCOME)

# Protocol component where each kind of bias can arise.
ALLOWED_COMPONENTS = {
    BiasKind.CONFOUNDING: {ASSIGNMENT},
    BiasKind.SELECTION: {ELIGIBILITY},
    BiasKind.MEASUREMENT: {TREATMENT, ASSIGNMENT, FOLLOW_UP, OUTCOME},
}

ROW_LABELS = {
    ELIGIBILITY: "A. Eligibility criteria",
    TREATMENT: "B. Treatment strategies",
    ASSIGNMENT: "C. Assignment procedures",
    FOLLOW_UP: "D. Follow-up period",
    OUTCOME: "E. Outcome",
    "Effect": "F. Causal effect of interest",
}

ADJUSTMENT_APPROACHES = ("Regression", "IPW", "GComputation", "AIPW")
MEASURES = ("OddsRatio", "RiskRatio", "RiskDifference", "MeanDifference", "PercentDifference")
MECHANISM_WARNING = ("arm {arm!r} has no intervention_mechanism: the intervention is imprecisely "
                     "defined, which complicates interpretation and confounder selection")


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Arm:
    id: str
    description: str = ""
    construct: str = ""
    intervention_mechanism: str | None = None


@dataclass(frozen=True)
class Population:
    age_at_entry: str | None = None
    setting: str | None = None
    epoch: str | None = None


@dataclass(frozen=True)
class TimePoint:
    event: str
    ordinal: int
    age: str | None = None


@dataclass(frozen=True)
class TargetTrialProtocol:
    name: str
    eligibility_text: str
    population: Population
    arms: tuple[Arm, ...]
    assignment_text: str
    follow_up_start: TimePoint
    follow_up_end: TimePoint
    outcome_construct: str
    outcome_scale: str
    effect_measure: str
    effect_scope: str = "Marginal"
    outcome_threshold: str | None = None
    randomized: bool = True
    effect_text: str = ""
    annotations: Mapping[str, str] = field(default_factory=dict)

    @property
    def comparator(self) -> Arm:
        return self.arms[0]

    @property
    def arm_ids(self) -> list[str]:
        return [a.id for a in self.arms]


@dataclass(frozen=True)
class ExposureMeasure:
    instruments: tuple[str, ...]
    waves: tuple[str, ...] = ()
    ages: str | None = None
    threshold: str | None = None
    text: str = ""


@dataclass(frozen=True)
class Confounder:
    name: str
    measure: str = ""
    coding: Any = None  # list of categories, or {category: [atoms]}
    proxy: bool = False


@dataclass(frozen=True)
class MissingDataStrategy:
    kind: str  # CompleteCase | MultipleImputation
    scope: str | None = None
    m: int | None = None


@dataclass(frozen=True)
class EmulationPlan:
    cohort: str
    selection_text: str
    population: Population
    exposure_measures: Mapping[str, ExposureMeasure]
    confounders: tuple[Confounder, ...]
    adjustment_approach: str
    timing_start: TimePoint
    timing_end: TimePoint
    outcome_instrument: str
    outcome_reporter: str | None = None
    outcome_threshold: str | None = None
    outcome_timing: str | None = None
    missing_data: MissingDataStrategy = MissingDataStrategy("CompleteCase")
    restrictions: tuple[str, ...] = ()
    randomized: bool = False
    annotations: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class BiasRiskEntry:
    component: str
    bias_kind: BiasKind
    scope: str  # Within | Across
    cohorts: tuple[str, ...]
    description: str
    annotation: str = ""

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ProtocolError(f"unknown protocol component {self.component!r}")
        kind = BiasKind(self.bias_kind)
        object.__setattr__(self, "bias_kind", kind)
        if self.component not in ALLOWED_COMPONENTS[kind]:
            raise ProtocolError(f"{kind.value} bias cannot arise from the {self.component} component")
        if self.scope not in ("Within", "Across"):
            raise ProtocolError(f"scope must be Within or Across, not {self.scope!r}")
        object.__setattr__(self, "cohorts", tuple(sorted(self.cohorts)))

    @property
    def scope_label(self) -> str:
        return f"{self.scope}({', '.join(self.cohorts)})"

    def sort_key(self):
        return (COMPONENTS.index(self.component), self.scope != "Within", self.cohorts,
                self.bias_kind.value, self.description)

    def to_dict(self) -> dict:
        d = {"component": self.component, "bias_kind": self.bias_kind.value, "scope": self.scope,
             "cohorts": list(self.cohorts), "description": self.description}
        if self.annotation:
            d["annotation"] = self.annotation
        return d


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class ProtocolValidation:
    violations: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_protocol(p: TargetTrialProtocol) -> ProtocolValidation:
    violations, warnings = [], []
    if len(p.arms) < 2:
        violations.append("needs comparator + ≥1 intervention arm")
    ids = [a.id for a in p.arms]
    dups = sorted({i for i in ids if ids.count(i) > 1})
    if dups:
        violations.append(f"duplicate arm ids: {dups}")
    for label, value in (("eligibility", p.eligibility_text), ("assignment", p.assignment_text),
                         ("outcome", p.outcome_construct)):
        if not value:
            violations.append(f"missing component: {label}")
    if p.follow_up_start.ordinal >= p.follow_up_end.ordinal:
        violations.append("follow-up start must precede follow-up end")
    if p.effect_measure not in MEASURES:
        violations.append(f"unknown effect measure {p.effect_measure!r}")
    if p.effect_scope not in ("Marginal", "Conditional"):
        violations.append(f"effect scope must be Marginal or Conditional, not {p.effect_scope!r}")
    for a in p.arms[1:]:
        if not a.intervention_mechanism:
            warnings.append(MECHANISM_WARNING.format(arm=a.id))
    return ProtocolValidation(violations, warnings)


def validate_plan(plan: EmulationPlan, p: TargetTrialProtocol) -> list[str]:
    out = []
    unknown = sorted(set(plan.exposure_measures) - set(p.arm_ids))
    if unknown:
        out.append(f"plan {plan.cohort!r} references unknown arm(s) {unknown}")
    missing = [a for a in p.arm_ids if a not in plan.exposure_measures]
    if missing:
        out.append(f"plan {plan.cohort!r} has no exposure measure for arm(s) {missing}")
    md = plan.missing_data
    if md.kind == "MultipleImputation":
        if md.m is None or md.m < 2:
            out.append(f"plan {plan.cohort!r}: multiple imputation needs m >= 2")
        if md.scope not in ("PerCohort", "PooledWithIndicator"):
            out.append(f"plan {plan.cohort!r}: imputation scope must be PerCohort or PooledWithIndicator")
    elif md.kind != "CompleteCase":
        out.append(f"plan {plan.cohort!r}: unknown missing-data strategy {md.kind!r}")
    if plan.adjustment_approach not in ADJUSTMENT_APPROACHES:
        out.append(f"plan {plan.cohort!r}: unknown adjustment approach {plan.adjustment_approach!r}")
    return out


# ---------------------------------------------------------------------------
# emulation gaps
# ---------------------------------------------------------------------------

def _instruments(plan: EmulationPlan, arm: str) -> tuple[str, ...]:
    m = plan.exposure_measures.get(arm)
    return tuple(sorted(m.instruments)) if m else ()


def _when(t: TimePoint) -> str:
    return t.age if t.age is not None else t.event


def _within(p: TargetTrialProtocol, plan: EmulationPlan) -> list[BiasRiskEntry]:
    c = (plan.cohort,)
    note = plan.annotations.get
    out = []

    def add(component, kind, text):
        out.append(BiasRiskEntry(component, kind, "Within", c, text, note(component, "")))

    pop, target = plan.population, p.population
    for attr, label in (("age_at_entry", "age at entry"), ("setting", "setting"), ("epoch", "recruitment epoch")):
        mine, theirs = getattr(pop, attr), getattr(target, attr)
        if mine is not None and mine != theirs:
            add(ELIGIBILITY, BiasKind.SELECTION,
                f"sample {label} {mine} differs from target population ({theirs or 'unrestricted'})")
    for r in plan.restrictions:
        add(ELIGIBILITY, BiasKind.SELECTION, f"sample restricted: {r}")

    for arm in p.arms:
        m = plan.exposure_measures.get(arm.id)
        if m is None or not m.instruments:
            continue
        if tuple(m.instruments) != (arm.construct,):
            add(TREATMENT, BiasKind.MEASUREMENT,
                f"arm {arm.id}: exposure measured by {', '.join(m.instruments)} rather than the construct "
                f"itself ({arm.construct or arm.description})")

    if p.randomized and not plan.randomized:
        add(ASSIGNMENT, BiasKind.CONFOUNDING,
            f"exposure not randomized; adjustment by {plan.adjustment_approach} on "
            f"{len(plan.confounders)} measured confounder(s) leaves unmeasured confounding possible")
    for conf in plan.confounders:
        if conf.proxy:
            add(ASSIGNMENT, BiasKind.MEASUREMENT, f"confounder {conf.name} measured through a proxy ({conf.measure})")

    for point, target_point, label in ((plan.timing_start, p.follow_up_start, "start"),
                                       (plan.timing_end, p.follow_up_end, "end")):
        if _when(point) != _when(target_point):
            add(FOLLOW_UP, BiasKind.MEASUREMENT,
                f"follow-up {label} at {point.event}"
                + (f" ({point.age})" if point.age else "")
                + f" instead of {target_point.event}"
                + (f" ({target_point.age})" if target_point.age else ""))

    if plan.outcome_instrument != p.outcome_construct or plan.outcome_threshold != p.outcome_threshold:
        how = plan.outcome_instrument
        if plan.outcome_reporter:
            how += f" by {plan.outcome_reporter} report"
        if plan.outcome_threshold:
            how += f", {plan.outcome_threshold}"
        add(OUTCOME, BiasKind.MEASUREMENT, f"outcome {p.outcome_construct} measured by {how}")
    return out


def _exposure_ages(plan: EmulationPlan) -> dict[str, str | None]:
    return {a: m.ages for a, m in sorted(plan.exposure_measures.items())}


def _coding_key(conf: Confounder):
    return json.dumps(conf.coding, sort_keys=True, default=str)


def _across(a: EmulationPlan, b: EmulationPlan) -> list[BiasRiskEntry]:
    a, b = sorted((a, b), key=lambda p: p.cohort)
    pair = (a.cohort, b.cohort)
    out = []

    def note(component):
        return a.annotations.get(component) or b.annotations.get(component) or ""

    def add(component, kind, text):
        out.append(BiasRiskEntry(component, kind, "Across", pair, text, note(component)))

    def differ(label, x, y):
        return f"{label}: {x} ({a.cohort}) vs {y} ({b.cohort})"

    for attr, label in (("epoch", "recruitment epoch"), ("setting", "setting")):
        x, y = getattr(a.population, attr), getattr(b.population, attr)
        if x != y:
            add(ELIGIBILITY, BiasKind.SELECTION, differ(label, x, y))
            add(ASSIGNMENT, BiasKind.CONFOUNDING,
                differ(label, x, y) + "; cohort-level differences may act as common causes of exposure "
                "and outcome, so the cohort indicator is an additional confounder")
    if a.restrictions != b.restrictions:
        add(ELIGIBILITY, BiasKind.SELECTION,
            differ("sample restrictions", "; ".join(a.restrictions) or "none", "; ".join(b.restrictions) or "none"))

    arms = sorted(set(a.exposure_measures) | set(b.exposure_measures))
    ia = sorted({i for arm in arms for i in _instruments(a, arm)})
    ib = sorted({i for arm in arms for i in _instruments(b, arm)})
    if ia != ib:
        add(TREATMENT, BiasKind.MEASUREMENT, differ("exposure instruments", "/".join(ia), "/".join(ib)))
    ta = {arm: (a.exposure_measures[arm].threshold if arm in a.exposure_measures else None) for arm in arms}
    tb = {arm: (b.exposure_measures[arm].threshold if arm in b.exposure_measures else None) for arm in arms}
    if ia == ib and ta != tb:
        add(TREATMENT, BiasKind.MEASUREMENT, "exposure thresholds differ between cohorts")
    if _exposure_ages(a) != _exposure_ages(b):
        diffs = [arm for arm in arms if _exposure_ages(a).get(arm) != _exposure_ages(b).get(arm)]
        add(TREATMENT, BiasKind.MEASUREMENT, f"exposure wave timing differs for arm(s) {', '.join(diffs)}")

    na = {c.name: c for c in a.confounders}
    nb = {c.name: c for c in b.confounders}
    if set(na) != set(nb):
        add(ASSIGNMENT, BiasKind.CONFOUNDING,
            "adjustment sets differ: " + ", ".join(sorted(set(na) ^ set(nb))) + " not measured in every cohort")
    for name in sorted(set(na) & set(nb)):
        if _coding_key(na[name]) != _coding_key(nb[name]) or na[name].measure != nb[name].measure:
            add(ASSIGNMENT, BiasKind.MEASUREMENT, f"confounder {name} measured or coded differently")
    if a.adjustment_approach != b.adjustment_approach:
        add(ASSIGNMENT, BiasKind.CONFOUNDING,
            differ("adjustment approach", a.adjustment_approach, b.adjustment_approach))

    for pa, pb, label in ((a.timing_start, b.timing_start, "follow-up start"),
                          (a.timing_end, b.timing_end, "follow-up end")):
        if pa.age != pb.age:
            add(FOLLOW_UP, BiasKind.MEASUREMENT, differ(label, pa.age, pb.age))

    for attr, label in (("outcome_instrument", "outcome instrument"), ("outcome_reporter", "outcome reporter"),
                        ("outcome_threshold", "outcome threshold"), ("outcome_timing", "outcome timing")):
        x, y = getattr(a, attr), getattr(b, attr)
        if x != y:
            add(OUTCOME, BiasKind.MEASUREMENT, differ(label, x, y))
    return out


def emulation_gap_report(p: TargetTrialProtocol, plans: Sequence[EmulationPlan]) -> list[BiasRiskEntry]:
    """Within-cohort entries for each plan, then Across entries for every pair of plans."""
    if not plans:
        raise ProtocolError("at least one emulation plan is required")
    problems = [msg for plan in plans for msg in validate_plan(plan, p)]
    if problems:
        raise ProtocolError("; ".join(problems))
    cohorts = [plan.cohort for plan in plans]
    if len(set(cohorts)) != len(cohorts):
        raise ProtocolError(f"duplicate cohort ids among plans: {cohorts}")
    entries = [e for plan in plans for e in _within(p, plan)]
    for a, b in combinations(plans, 2):
        entries += _across(a, b)
    return sorted(set(entries), key=BiasRiskEntry.sort_key)


def plan_from_protocol(p: TargetTrialProtocol, cohort: str = "ideal") -> EmulationPlan:
    """A plan that reproduces the protocol exactly; useful as an identity reference."""
    return EmulationPlan(
        cohort, p.eligibility_text, p.population,
        {a.id: ExposureMeasure((a.construct,) if a.construct else ()) for a in p.arms},
        (), "Regression", p.follow_up_start, p.follow_up_end, p.outcome_construct,
        outcome_threshold=p.outcome_threshold, randomized=p.randomized)


# ---------------------------------------------------------------------------
# harmonization
# ---------------------------------------------------------------------------

@dataclass
class VariableHarmonization:
    name: str
    available_in: list[str]
    native: dict[str, list[str]]
    common: list[str]
    loss: list[str]
    uncovered: dict[str, list[str]]
    n_plans: int

    @property
    def subset_only(self) -> bool:
        return len(self.available_in) < self.n_plans

    def to_dict(self) -> dict:
        return {"variable": self.name, "available_in": self.available_in, "subset_only": self.subset_only,
                "native": self.native, "common": self.common, "loss": self.loss,
                **({"uncovered": self.uncovered} if self.uncovered else {})}


@dataclass
class HarmonizationAudit:
    cohorts: list[str]
    variables: list[VariableHarmonization]

    @property
    def subset_availability(self) -> list[str]:
        return [v.name for v in self.variables if v.subset_only]

    def to_dict(self) -> dict:
        return {"cohorts": self.cohorts, "variables": [v.to_dict() for v in self.variables]}


def _partition(coding) -> dict[str, tuple[str, ...]]:
    """category -> atoms.  A plain list of categories is its own atom set."""
    if coding is None:
        return {}
    if isinstance(coding, Mapping):
        return {str(k): tuple(str(a) for a in v) for k, v in coding.items()}
    return {str(c): (str(c),) for c in coding}


def _common_coding(parts: dict[str, dict[str, tuple[str, ...]]]):
    """Finest partition every cohort can express: merge atoms that share a category anywhere."""
    atom_sets = [set(a for atoms in p.values() for a in atoms) for p in parts.values()]
    shared = set.intersection(*atom_sets) if atom_sets else set()
    parent = {a: a for a in shared}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for p in parts.values():
        for atoms in p.values():
            keep = sorted(a for a in atoms if a in shared)
            for x in keep[1:]:
                ra, rb = find(keep[0]), find(x)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    blocks: dict[str, set[str]] = {}
    for a in shared:
        blocks.setdefault(find(a), set()).add(a)
    # name each block after a category that covers exactly it, preferring the coarsest coding
    names = []
    order = sorted(parts, key=lambda c: (len(parts[c]), c))
    for block in blocks.values():
        label = None
        for c in order:
            for cat, atoms in parts[c].items():
                if set(atoms) & shared == block:
                    label = cat
                    break
            if label:
                break
        names.append((label or "+".join(sorted(block)), block))
    first_atom = {}
    for c in parts:
        for i, (cat, atoms) in enumerate(parts[c].items()):
            for a in atoms:
                first_atom.setdefault(a, i)
    names.sort(key=lambda nb: (min(first_atom.get(a, 0) for a in nb[1]), nb[0]))
    lost = []
    for c, p in parts.items():
        cats = [set(atoms) & shared for atoms in p.values()]
        cats = [s for s in cats if s]
        if len(cats) > len(blocks):
            lost.append(c)
    uncovered = {c: sorted(set(a for atoms in p.values() for a in atoms) - shared) for c, p in parts.items()}
    return [n for n, _ in names], sorted(lost), {c: u for c, u in sorted(uncovered.items()) if u}


def harmonization_audit(plans: Sequence[EmulationPlan]) -> HarmonizationAudit:
    if len(plans) < 2:
        raise ProtocolError("harmonization audit needs at least two plans")
    cohorts = sorted(p.cohort for p in plans)
    names = sorted({c.name for p in plans for c in p.confounders})
    out = []
    for name in names:
        have = {p.cohort: c for p in plans for c in p.confounders if c.name == name}
        parts = {cid: _partition(have[cid].coding) for cid in sorted(have) if have[cid].coding is not None}
        native = {cid: list(part) for cid, part in parts.items()}
        common, lost, uncovered = _common_coding(parts) if parts else ([], [], {})
        out.append(VariableHarmonization(name, sorted(have), native, common, lost, uncovered, len(plans)))
    return HarmonizationAudit(cohorts, out)


# ---------------------------------------------------------------------------
# bundled report
# ---------------------------------------------------------------------------

@dataclass
class EmulationReport:
    protocol: TargetTrialProtocol
    plans: list[EmulationPlan]
    entries: list[BiasRiskEntry]
    warnings: list[str]
    harmonization: HarmonizationAudit | None

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol.name,
            "cohorts": [p.cohort for p in self.plans],
            "warnings": self.warnings,
            "entries": [e.to_dict() for e in self.entries],
            "harmonization": self.harmonization.to_dict() if self.harmonization else None,
        }


def emulation_report(p: TargetTrialProtocol, plans: Sequence[EmulationPlan]) -> EmulationReport:
    validation = validate_protocol(p)
    if not validation.ok:
        raise ProtocolError("; ".join(validation.violations))
    entries = emulation_gap_report(p, plans)
    harm = harmonization_audit(plans) if len(plans) >= 2 else None
    warnings = list(validation.warnings)
    if harm:
        warnings += [f"confounder {v.name} available in only a subset of cohorts ({', '.join(v.available_in)})"
                     for v in harm.variables if v.subset_only]
        warnings += [f"harmonizing {v.name} collapses categories in {', '.join(v.loss)}"
                     for v in harm.variables if v.loss]
    return EmulationReport(p, sorted(plans, key=lambda x: x.cohort), entries, warnings, harm)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

FORMATS = ("text", "json", "markdown")


def _md(s: str) -> str:
    return str(s).replace("|", "\\|").replace("\n", " ")


def _protocol_cells(p: TargetTrialProtocol) -> dict[str, str]:
    arms = "; ".join(f"{'comparator' if i == 0 else 'arm'} {a.id}: {a.description}" for i, a in enumerate(p.arms))
    return {
        ELIGIBILITY: p.eligibility_text,
        TREATMENT: arms,
        ASSIGNMENT: p.assignment_text,
        FOLLOW_UP: f"start: {p.follow_up_start.event}; end: {p.follow_up_end.event}",
        OUTCOME: p.outcome_construct + (f" ({p.outcome_threshold})" if p.outcome_threshold else ""),
        "Effect": p.effect_text or f"{p.effect_scope} {p.effect_measure}",
    }


def _plan_cells(plan: EmulationPlan) -> dict[str, str]:
    exposures = "; ".join(
        f"{arm}: {m.text or ', '.join(m.instruments)}" + (f" [{', '.join(m.waves)}]" if m.waves else "")
        for arm, m in plan.exposure_measures.items())
    confs = ", ".join(c.name for c in plan.confounders) or "none"
    md = plan.missing_data
    missing = md.kind if md.kind != "MultipleImputation" else f"multiple imputation ({md.scope}, m={md.m})"
    return {
        ELIGIBILITY: f"{plan.selection_text} Missing data: {missing}.",
        TREATMENT: exposures,
        ASSIGNMENT: f"confounders: {confs}; adjustment: {plan.adjustment_approach}",
        FOLLOW_UP: f"start: {plan.timing_start.event}; end: {plan.timing_end.event}",
        OUTCOME: plan.outcome_instrument
        + (f" via {plan.outcome_reporter} report" if plan.outcome_reporter else "")
        + (f", {plan.outcome_threshold}" if plan.outcome_threshold else ""),
        "Effect": "",
    }


def _entry_line(e: BiasRiskEntry) -> str:
    s = f"{e.bias_kind.value}/{e.scope_label}: {e.description}"
    if e.annotation:
        s += f" Note: {e.annotation}"
    return s


def render_report(obj, fmt: str = "text") -> str:
    """Render an EmulationReport, a list of BiasRiskEntry, or a HarmonizationAudit."""
    fmt = fmt.lower()
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if isinstance(obj, HarmonizationAudit):
        return _render_harmonization(obj, fmt)
    report = obj if isinstance(obj, EmulationReport) else None
    entries = report.entries if report else list(obj)
    if fmt == "json":
        data = report.to_dict() if report else {"entries": [e.to_dict() for e in entries]}
        return json.dumps(data, indent=2, ensure_ascii=False) + "\n"
    if fmt == "text":
        lines = ["Emulation gap report"]
        if report:
            lines.append(f"protocol: {report.protocol.name}")
            lines.append(f"cohorts: {', '.join(p.cohort for p in report.plans)}")
        lines.append("")
        if not entries:
            lines.append("no findings")
        for comp in COMPONENTS:
            rows = [e for e in entries if e.component == comp]
            if rows:
                lines.append(f"{ROW_LABELS[comp]}")
                lines += [f"  - {_entry_line(e)}" for e in rows]
        if report and report.warnings:
            lines += ["", "warnings:"] + [f"  - {w}" for w in report.warnings]
        if report and report.harmonization:
            lines += ["", _render_harmonization(report.harmonization, "text").rstrip("\n")]
        return "\n".join(lines) + "\n"
    # markdown
    lines = ["# Emulation gap report", ""]
    if not report:
        if not entries:
            return "\n".join(lines + ["no findings"]) + "\n"
        lines += ["| Component | Bias | Scope | Description |", "|---|---|---|---|"]
        lines += [f"| {ROW_LABELS[e.component]} | {e.bias_kind.value} | {e.scope_label} | {_md(_entry_line(e))} |"
                  for e in entries]
        return "\n".join(lines) + "\n"
    lines.append(f"Protocol: {_md(report.protocol.name)}")
    lines.append("")
    tt = _protocol_cells(report.protocol)
    plan_cells = [_plan_cells(p) for p in report.plans]
    header = ["Protocol component", "Target trial"] + [f"Emulation: {p.cohort}" for p in report.plans] \
        + ["Remaining bias risks"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for comp, label in ROW_LABELS.items():
        risks = [e for e in report.entries if e.component == comp]
        risk_text = "<br>".join(_md(_entry_line(e)) for e in risks) or ("no findings" if comp != "Effect" else "")
        row = [label, _md(tt[comp])] + [_md(pc[comp]) for pc in plan_cells] + [risk_text]
        lines.append("| " + " | ".join(row) + " |")
    if not report.entries:
        lines += ["", "no findings"]
    if report.warnings:
        lines += ["", "## Warnings", ""] + [f"- {_md(w)}" for w in report.warnings]
    if report.harmonization:
        lines += ["", _render_harmonization(report.harmonization, "markdown").rstrip("\n")]
    return "\n".join(lines) + "\n"


def _render_harmonization(h: HarmonizationAudit, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(h.to_dict(), indent=2, ensure_ascii=False) + "\n"
    if fmt == "text":
        lines = ["harmonization audit:"]
        for v in h.variables:
            flags = []
            if v.loss:
                flags.append("loss in " + ", ".join(v.loss))
            if v.subset_only:
                flags.append("subset-availability (" + ", ".join(v.available_in) + ")")
            common = "{" + ", ".join(v.common) + "}" if v.native else "n/a"
            lines.append(f"  {v.name}: common {common}" + (f" [{'; '.join(flags)}]" if flags else ""))
        return "\n".join(lines) + "\n"
    lines = ["## Harmonization audit", "", "| Variable | " + " | ".join(h.cohorts) + " | Common coding | Flags |",
             "|" + "---|" * (len(h.cohorts) + 3)]
    for v in h.variables:
        native = [("{" + ", ".join(v.native[c]) + "}") if c in v.native else
                  ("available" if c in v.available_in else "not available") for c in h.cohorts]
        flags = []
        if v.loss:
            flags.append("loss: " + ", ".join(v.loss))
        if v.subset_only:
            flags.append("subset-availability")
        common = "{" + ", ".join(v.common) + "}" if v.native else ""
        lines.append("| " + " | ".join([_md(v.name), *map(_md, native), _md(common), "; ".join(flags)]) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _check_keys(d: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ProtocolError(f"{where}: unknown keys {sorted(unknown)}")


def _timepoint(d: Mapping, where: str) -> TimePoint:
    _check_keys(d, {"event", "ordinal", "age"}, where)
    try:
        return TimePoint(str(d["event"]), int(d.get("ordinal", 0)), d.get("age"))
    except KeyError as exc:
        raise ProtocolError(f"{where}: missing {exc.args[0]!r}") from None


def _population(d: Mapping | None, where: str) -> Population:
    d = d or {}
    _check_keys(d, {"age_at_entry", "setting", "epoch"}, where)
    return Population(d.get("age_at_entry"), d.get("setting"), d.get("epoch"))


def protocol_from_dict(d: Mapping) -> TargetTrialProtocol:
    _check_keys(d, {"kind", "name", "eligibility", "arms", "assignment", "follow_up", "outcome",
                    "effect_measure", "annotations"}, "protocol")
    try:
        elig, assign, fu, out, eff = (d["eligibility"], d["assignment"], d["follow_up"], d["outcome"],
                                      d["effect_measure"])
        arms = tuple(Arm(str(a["id"]), a.get("description", ""), a.get("construct", ""),
                         a.get("intervention_mechanism")) for a in d["arms"])
    except KeyError as exc:
        raise ProtocolError(f"protocol: missing {exc.args[0]!r}") from None
    comparators = [a for a in d["arms"] if a.get("comparator")]
    if comparators and comparators[0] is not d["arms"][0]:
        raise ProtocolError("protocol: the comparator must be the first arm")
    if len(comparators) > 1:
        raise ProtocolError("protocol: exactly one comparator arm is allowed")
    return TargetTrialProtocol(
        name=d.get("name", ""),
        eligibility_text=elig.get("text", ""),
        population=_population(elig.get("population"), "protocol.eligibility.population"),
        arms=arms,
        assignment_text=assign.get("text", ""),
        follow_up_start=_timepoint(fu["start"], "protocol.follow_up.start"),
        follow_up_end=_timepoint(fu["end"], "protocol.follow_up.end"),
        outcome_construct=out.get("construct", ""),
        outcome_scale=out.get("scale", "binary"),
        outcome_threshold=out.get("threshold"),
        effect_measure=eff.get("measure", ""),
        effect_scope=eff.get("scope", "Marginal"),
        effect_text=eff.get("text", ""),
        randomized=bool(assign.get("randomized", True)),
        annotations=dict(d.get("annotations", {})),
    )


def plan_from_dict(d: Mapping) -> EmulationPlan:
    _check_keys(d, {"kind", "cohort", "sample_selection", "exposure_measures", "confounders",
                    "adjustment_approach", "timing", "outcome_measure", "missing_data_strategy",
                    "randomized", "annotations"}, "plan")
    try:
        sel = d["sample_selection"]
        cohort = str(d["cohort"])
        exposures = {}
        for arm, m in d["exposure_measures"].items():
            exposures[str(arm)] = ExposureMeasure(tuple(m.get("instruments", ())), tuple(m.get("waves", ())),
                                                  m.get("ages"), m.get("threshold"), m.get("text", ""))
        confs = tuple(Confounder(c["name"], c.get("measure", ""), c.get("coding"), bool(c.get("proxy", False)))
                      for c in d.get("confounders", []))
        timing = d["timing"]
        out = d["outcome_measure"]
        md = d.get("missing_data_strategy", {"kind": "CompleteCase"})
    except KeyError as exc:
        raise ProtocolError(f"plan: missing {exc.args[0]!r}") from None
    return EmulationPlan(
        cohort=cohort,
        selection_text=sel.get("text", ""),
        population=_population({k: sel.get(k) for k in ("age_at_entry", "setting", "epoch")},
                               f"plan {cohort}.sample_selection"),
        restrictions=tuple(sel.get("restrictions", ())),
        exposure_measures=exposures,
        confounders=confs,
        adjustment_approach=d.get("adjustment_approach", "Regression"),
        timing_start=_timepoint(timing["start"], f"plan {cohort}.timing.start"),
        timing_end=_timepoint(timing["end"], f"plan {cohort}.timing.end"),
        outcome_instrument=out.get("instrument", ""),
        outcome_reporter=out.get("reporter"),
        outcome_threshold=out.get("threshold"),
        outcome_timing=out.get("timing"),
        missing_data=MissingDataStrategy(md.get("kind", "CompleteCase"), md.get("scope"), md.get("m")),
        randomized=bool(d.get("randomized", False)),
        annotations=dict(d.get("annotations", {})),
    )


def load_bundle(path) -> tuple[TargetTrialProtocol | None, list[EmulationPlan]]:
    """Read a JSON file holding a protocol, a plan, or {"protocol": ..., "plans": [...]}."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"{path}: line {exc.lineno}: malformed JSON ({exc.msg})") from None
    if "protocol" in data or "plans" in data:
        p = protocol_from_dict(data["protocol"]) if data.get("protocol") else None
        return p, [plan_from_dict(x) for x in data.get("plans", [])]
    if data.get("kind") == "plan" or "cohort" in data:
        return None, [plan_from_dict(data)]
    return protocol_from_dict(data), []
