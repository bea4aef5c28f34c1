import json
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from cohortforge.dag import BiasKind
from cohortforge.fixtures import fixture_dir
from cohortforge.protocol import (
    ALLOWED_COMPONENTS,
    Arm,
    BiasRiskEntry,
    Confounder,
    EmulationPlan,
    ExposureMeasure,
    MissingDataStrategy,
    Population,
    ProtocolError,
    TargetTrialProtocol,
    TimePoint,
    emulation_gap_report,
    emulation_report,
    harmonization_audit,
    load_bundle,
    plan_from_dict,
    plan_from_protocol,
    protocol_from_dict,
    render_report,
    validate_protocol,
)

OCONNOR_NOTE = ("The difference in the time of outcome measurement is the key factor of interest in the "
                "research question, therefore it is not a bias per se but the source of difference to be assessed")


@pytest.fixture(scope="module")
def spry():
    return load_bundle(fixture_dir() / "spry2020.json")


@pytest.fixture(scope="module")
def oconnor():
    return load_bundle(fixture_dir() / "oconnor2020.json")


def toy_protocol(**kw):
    base = TargetTrialProtocol(
        "toy", "adults", Population("18 years", "Australia", None),
        (Arm("none", construct="exposure"), Arm("any", construct="exposure", intervention_mechanism="program")),
        "randomised", TimePoint("randomisation", 0), TimePoint("year 5", 1), "outcome", "binary", "OddsRatio")
    return replace(base, **kw)


def toy_plan(cohort, instruments=("Q1",), coding=("none", "partial", "complete"), epoch="2000s", **kw):
    plan = EmulationPlan(
        cohort, "sample", Population("18 years", "Australia", epoch),
        {"none": ExposureMeasure(instruments), "any": ExposureMeasure(instruments)},
        (Confounder("education", coding=coding if isinstance(coding, dict) else list(coding)),), "Regression",
        TimePoint("wave 1", 0), TimePoint("wave 5", 1), "outcome")
    return replace(plan, **kw)


class TestValidation:
    def test_fixtures_ok(self, spry, oconnor):
        for p, _ in (spry, oconnor):
            assert validate_protocol(p).ok

    def test_single_arm(self):
        v = validate_protocol(toy_protocol(arms=(Arm("none"),)))
        assert "needs comparator + ≥1 intervention arm" in v.violations

    def test_duplicate_arms_and_ordering(self):
        v = validate_protocol(toy_protocol(arms=(Arm("a"), Arm("a")), follow_up_end=TimePoint("start", 0)))
        assert any("duplicate" in x for x in v.violations)
        assert any("precede" in x for x in v.violations)

    def test_mechanism_warning_not_error(self, spry):
        v = validate_protocol(spry[0])
        assert v.ok and len(v.warnings) == 3
        assert all("imprecisely defined" in w for w in v.warnings)

    def test_unknown_arm_in_plan(self):
        p = toy_protocol()
        plan = toy_plan("a")
        bad = replace(plan, exposure_measures={**plan.exposure_measures, "mystery": ExposureMeasure(("Q1",))})
        with pytest.raises(ProtocolError, match="unknown arm"):
            emulation_gap_report(p, [bad])

    def test_mi_needs_m(self):
        plan = toy_plan("a", missing_data=MissingDataStrategy("MultipleImputation", "PooledWithIndicator", 1))
        with pytest.raises(ProtocolError, match="m >= 2"):
            emulation_gap_report(toy_protocol(), [plan])

    def test_entry_consistency_enforced(self):
        with pytest.raises(ProtocolError):
            BiasRiskEntry("Outcome", BiasKind.CONFOUNDING, "Within", ("a",), "x")


class TestGapReport:
    def test_spry_maternal_age_restriction(self, spry):
        entries = emulation_gap_report(*spry)
        hits = [e for e in entries if "29-35" in e.description]
        assert {e.cohorts for e in hits} == {("VIHCS",), ("ATPG3",)}
        assert all(e.bias_kind == BiasKind.SELECTION and e.scope == "Within" and e.component == "Eligibility"
                   for e in hits)

    def test_spry_instrument_across(self, spry):
        entries = emulation_gap_report(*spry)
        inst = [e for e in entries if e.scope == "Across" and e.description.startswith("exposure instruments")]
        assert len(inst) == 1
        e = inst[0]
        assert e.bias_kind == BiasKind.MEASUREMENT and e.component == "Treatment"
        for name in ("CIS-R", "GHQ-12", "SMFQ", "RBPCSF", "RCMAS", "DASS-21"):
            assert name in e.description

    def test_identical_plans_no_across(self):
        p = toy_protocol()
        entries = emulation_gap_report(p, [toy_plan("a"), toy_plan("b")])
        assert entries and not [e for e in entries if e.scope == "Across"]

    def test_single_plan_no_across(self, spry):
        p, plans = spry
        assert not [e for e in emulation_gap_report(p, plans[:1]) if e.scope == "Across"]

    def test_identity_plan_zero_entries(self, spry, oconnor):
        for p, _ in (spry, oconnor):
            assert emulation_gap_report(p, [plan_from_protocol(p)]) == []
        assert emulation_gap_report(toy_protocol(), [plan_from_protocol(toy_protocol())]) == []

    def test_symmetric_in_plan_order(self, spry, oconnor):
        for p, plans in (spry, oconnor):
            assert emulation_gap_report(p, plans) == emulation_gap_report(p, plans[::-1])

    def test_every_entry_consistent(self, spry, oconnor):
        for p, plans in (spry, oconnor):
            for e in emulation_gap_report(p, plans):
                assert e.component in ALLOWED_COMPONENTS[e.bias_kind]

    def test_epoch_difference_is_selection_across(self):
        entries = emulation_gap_report(toy_protocol(), [toy_plan("a"), toy_plan("b", epoch="2010s")])
        kinds = {(e.component, e.bias_kind) for e in entries if e.scope == "Across"}
        assert ("Eligibility", BiasKind.SELECTION) in kinds
        assert ("Assignment", BiasKind.CONFOUNDING) in kinds

    def test_deterministic_order(self, spry):
        entries = emulation_gap_report(*spry)
        assert entries == sorted(entries, key=BiasRiskEntry.sort_key)
        comps = [e.component for e in entries]
        order = ["Eligibility", "Treatment", "Assignment", "FollowUp", "Outcome"]
        assert comps == sorted(comps, key=order.index)

    def test_oconnor_note_verbatim(self, oconnor):
        entries = emulation_gap_report(*oconnor)
        follow = [e for e in entries if e.component == "FollowUp"]
        assert follow and all(e.annotation == OCONNOR_NOTE for e in follow)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["Q1", "Q2", "Q3"]), min_size=1, max_size=3, unique=True),
           st.lists(st.sampled_from(["Q1", "Q2", "Q3"]), min_size=1, max_size=3, unique=True),
           st.sampled_from(["2000s", "2010s"]), st.sampled_from(["2000s", "2010s"]))
    def test_across_iff_plans_differ(self, inst_a, inst_b, ep_a, ep_b):
        a = toy_plan("a", tuple(inst_a), epoch=ep_a)
        b = toy_plan("b", tuple(inst_b), epoch=ep_b)
        across = [e for e in emulation_gap_report(toy_protocol(), [a, b]) if e.scope == "Across"]
        assert bool(across) == (sorted(inst_a) != sorted(inst_b) or ep_a != ep_b)


class TestHarmonization:
    def test_education_example(self):
        plans = [toy_plan("c1"), toy_plan("c2", coding={"never": ["none", "partial"], "ever": ["complete"]})]
        (v,) = harmonization_audit(plans).variables
        assert v.common == ["never", "ever"]
        assert v.loss == ["c1"]
        assert len(v.common) <= min(len(n) for n in v.native.values())

    def test_identical_codings(self):
        (v,) = harmonization_audit([toy_plan("a"), toy_plan("b")]).variables
        assert v.loss == [] and v.common == ["none", "partial", "complete"]

    def test_subset_availability(self):
        b = toy_plan("b", confounders=(Confounder("education", coding=["x", "y"]), Confounder("income")))
        audit = harmonization_audit([toy_plan("a"), b])
        assert audit.subset_availability == ["income"]
        report = emulation_report(toy_protocol(), [toy_plan("a"), b])
        assert any("subset of cohorts" in w for w in report.warnings)

    def test_needs_two_plans(self):
        with pytest.raises(ProtocolError):
            harmonization_audit([toy_plan("a")])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 5), min_size=6, max_size=6), min_size=2, max_size=4))
    def test_common_never_finer_than_inputs(self, labellings):
        # each cohort groups the atoms 0..5 into categories by label
        plans = []
        for i, labels in enumerate(labellings):
            coding = {}
            for atom, lab in enumerate(labels):
                coding.setdefault(f"k{lab}", []).append(f"a{atom}")
            plans.append(toy_plan(f"c{i}", confounders=(Confounder("v", coding=coding),)))
        (v,) = harmonization_audit(plans).variables
        assert len(v.common) <= min(len(n) for n in v.native.values())


class TestRender:
    def test_empty(self):
        for fmt in ("text", "markdown"):
            assert "no findings" in render_report([], fmt)
        assert json.loads(render_report([], "json")) == {"entries": []}

    def test_markdown_rows_a_to_f(self, spry):
        md = render_report(emulation_report(*spry), "markdown")
        for label in ("A. Eligibility", "B. Treatment", "C. Assignment", "D. Follow-up", "E. Outcome", "F. Causal"):
            assert f"| {label}" in md
        assert "Emulation: ATPG3" in md and "Emulation: VIHCS" in md

    def test_deterministic(self, spry):
        for fmt in ("text", "json", "markdown"):
            assert render_report(emulation_report(*spry), fmt) == render_report(emulation_report(*spry), fmt)

    def test_oconnor_note_rendered(self, oconnor):
        for fmt in ("text", "markdown"):
            assert "not a bias per se but the source of difference to be assessed" in \
                render_report(emulation_report(*oconnor), fmt)

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_report([], "pdf")


class TestJson:
    def test_roundtrip_fixture(self, spry):
        raw = json.loads((fixture_dir() / "spry2020.json").read_text(encoding="utf-8"))
        p = protocol_from_dict(raw["protocol"])
        plans = [plan_from_dict(d) for d in raw["plans"]]
        assert (p, plans) == spry

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "protocol": ,\n}\n')
        with pytest.raises(ProtocolError, match="line 2"):
            load_bundle(path)

    def test_unknown_key(self):
        raw = json.loads((fixture_dir() / "spry2020.json").read_text(encoding="utf-8"))
        raw["protocol"]["colour"] = "blue"
        with pytest.raises(ProtocolError, match="unknown keys"):
            protocol_from_dict(raw["protocol"])
