import json
import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit
from scipy.stats import chi2_contingency

from cohortforge.dag import CausalDag, Node, NodeKind
from cohortforge.scenarios import (
    TRUE_MARGINAL_OR,
    drop_unmeasured,
    get_scenario,
    replicate_cohorts,
    s_1a,
    s_1b,
    s_2a,
    s_3a,
    scenario_library,
    without_cohort_effects,
)
from cohortforge.scm import (
    STATE_SPACE_LIMIT,
    BernoulliLogit,
    CohortConfig,
    Coarsen,
    HarmonizationError,
    Missingness,
    ModelError,
    MultiCohortDataset,
    StructuralModel,
    _enumerate,
    cohort_from_dict,
    cohort_to_dict,
    interventional_risks,
    mask_unselected,
    model_from_dict,
    model_to_dict,
    pool,
    restrict_to_selected,
    simulate,
    true_effect,
)

K = NodeKind


def chain_model(names, coef=0.0):
    """X -> Y with extra binary roots feeding Y; everything with zero intercepts."""
    nodes = [Node("X", K.EXPOSURE), Node("Y", K.OUTCOME)] + [Node(n, K.MEASURED_CONFOUNDER) for n in names]
    dag = CausalDag.build(nodes, [("X", "Y")] + [(n, "Y") for n in names])
    mechs = {"Y": BernoulliLogit(0.0, {"X": coef, **{n: 0.0 for n in names}})}
    return StructuralModel(dag, mechs, {"X": 0.5, **{n: 0.5 for n in names}}, "X", "Y")


# -- independent Monte Carlo do-oracle, written from the P1 table directly ----

P1_Y = {"S-1A": (-1.0, {"X": 0.7, "C": 0.8, "U": 0.8}),
        "S-1B": (-1.0, {"X": 0.7, "C": 0.8, "U": 0.8, "S": 0.6}),
        "S-2A": (-1.0, {"X": 0.7, "A": 0.8}),
        "S-2B": (-1.0, {"X": 0.7, "A": 0.8, "S": 0.6}),
        "S-3A": (-1.0, {"X": 0.7}),
        "S-3B": (-1.0, {"X": 0.7})}


def mc_do_or(scenario_id, n, rng):
    intercept, coefs = P1_Y[scenario_id]
    risks = []
    for a in (0, 1):
        eta = np.full(n, intercept + coefs["X"] * a)
        for parent, b in coefs.items():
            if parent != "X":
                eta += b * (rng.random(n) < 0.5)
        risks.append((rng.random(n) < expit(eta)).mean())
    r0, r1 = risks
    log_or = math.log(r1 / (1 - r1)) - math.log(r0 / (1 - r0))
    se = math.sqrt(1 / (n * r1 * (1 - r1)) + 1 / (n * r0 * (1 - r0)))
    return log_or, se


class TestSimulate:
    def test_null_model_means(self):
        m = chain_model(["A", "B"])
        n = 20_000
        f = simulate(m, [CohortConfig("c", n)], seed=3).frame
        for col in ("X", "Y", "A", "B"):
            assert abs(f[col].mean() - 0.5) < 3 * math.sqrt(0.25 / n)
        assert f["selected"].all()

    def test_selection_falls_with_a_prevalence(self):
        sc = s_2a(20_000)
        model = sc.model.with_overrides({"P": {"coefficients": {"A": -3.0}}})
        fractions = []
        for prior in (0.1, 0.5, 0.9):
            cfg = CohortConfig("c", 20_000, {"A": {"prior": prior}}, selection="P")
            fractions.append(simulate(model, [cfg], seed=1).frame["selected"].mean())
        assert fractions[0] > fractions[1] > fractions[2]

    def test_bytes_identical(self, tmp_path):
        sc = s_1b(1000)
        for name in ("a.csv", "b.csv"):
            simulate(sc.model, sc.cohorts, seed=42).to_csv(tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.csv.json").read_bytes() == (tmp_path / "b.csv.json").read_bytes()

    def test_replications_differ(self):
        sc = s_1a(500)
        a = simulate(sc.model, sc.cohorts, seed=1, replication=0).frame
        b = simulate(sc.model, sc.cohorts, seed=1, replication=1).frame
        assert not a.equals(b)

    def test_overrides_per_cohort(self):
        sc = s_1b(20_000)
        f = simulate(sc.model, sc.cohorts, seed=2).frame
        assert set(f.loc[f.cohort == "cohort1", "S"]) == {0}
        assert set(f.loc[f.cohort == "cohort2", "S"]) == {1}

    def test_unknown_override(self):
        sc = s_1a(10)
        with pytest.raises(ModelError, match="unknown node"):
            simulate(sc.model, [CohortConfig("c", 10, {"Q": {"prior": 0.2}})], seed=0)
        with pytest.raises(ModelError, match="unknown coefficient"):
            simulate(sc.model, [CohortConfig("c", 10, {"X": {"coefficients": {"A": 1.0}}})], seed=0)
        with pytest.raises(ModelError, match="unsupported keys"):
            simulate(sc.model, [CohortConfig("c", 10, {"X": {"slope": 1.0}})], seed=0)

    def test_misclassification_rates(self):
        sc = s_3a(100_000)
        f = simulate(sc.model, sc.cohorts, seed=4).frame
        x, xs = f["X"].to_numpy(int), f["X*"].to_numpy(int)
        sens = xs[x == 1].mean()
        spec = 1 - xs[x == 0].mean()
        assert abs(sens - 0.85) < 3 * math.sqrt(0.85 * 0.15 / (x == 1).sum())
        assert abs(spec - 0.95) < 3 * math.sqrt(0.95 * 0.05 / (x == 0).sum())

    def test_mcar_and_mar_missingness(self):
        sc = s_1a(20_000)
        cfg = CohortConfig("c", 20_000, missingness=(Missingness("Y", rate=0.3),
                                                     Missingness("C", intercept=-2.0, coefficients={"X": 2.0})))
        f = simulate(sc.model, [cfg], seed=5).frame
        assert abs(f["Y"].isna().mean() - 0.3) < 0.015
        full = simulate(sc.model, [replace(cfg, missingness=())], seed=5).frame
        by_x = f["C"].isna().groupby(full["X"]).mean()
        assert by_x[1] > 0.4 > 0.2 > by_x[0]

    def test_mar_predictor_must_be_observed(self):
        sc = s_1a(10)
        cfg = CohortConfig("c", 10, missingness=(Missingness("Y", coefficients={"U": 1.0}),))
        with pytest.raises(ModelError, match="observed"):
            simulate(sc.model, [cfg], seed=0)

    def test_csv_roundtrip(self, tmp_path):
        sc = replace(s_1a(300), cohorts=(CohortConfig("c", 300, missingness=(Missingness("C", rate=0.2),)),))
        ds = simulate(sc.model, sc.cohorts, seed=6)
        ds.to_csv(tmp_path / "d.csv")
        back = MultiCohortDataset.read_csv(tmp_path / "d.csv")
        pd.testing.assert_frame_equal(back.frame, ds.frame, check_dtype=False)
        assert back.metadata["seed"] == 6


class TestTrueEffect:
    def test_null_effect_is_one(self):
        assert true_effect(chain_model(["A"]), "Marginal", "OR") == 1.0
        assert true_effect(chain_model(["A"]), "Marginal", "RD") == 0.0

    def test_dag_1a_within_half_percent_of_monte_carlo(self):
        exact = true_effect(s_1a().model)
        mc, _ = mc_do_or("S-1A", 10**7, np.random.default_rng(0))
        assert abs(exact / math.exp(mc) - 1) < 0.005

    @pytest.mark.parametrize("scenario_id", sorted(P1_Y))
    def test_matches_monte_carlo(self, scenario_id):
        exact = math.log(true_effect(get_scenario(scenario_id).model))
        mc, se = mc_do_or(scenario_id, 10**7, np.random.default_rng(1))
        assert abs(exact - mc) < 3 * se

    def test_do_equals_association_when_randomized(self):
        sc = s_2a()
        model = sc.model.with_overrides({"P": {"coefficients": {"X": 0.0}}})
        do = interventional_risks(model)
        states, prob = _enumerate(model, {}, ["Y", "X", "P"])
        for a in (0, 1):
            x = states["X"] == a
            assoc = prob[x & (states["Y"] == 1)].sum() / prob[x].sum()
            assert do[a] == pytest.approx(assoc, abs=1e-14)
            # the intervention leaves the participation distribution alone
            p_do = _enumerate(model, {"X": a}, ["P"])
            assert p_do[1][p_do[0]["P"] == 1].sum() == pytest.approx(prob[states["P"] == 1].sum())

    def test_conditional_homogeneous(self):
        m = drop_unmeasured(s_1a()).model
        assert true_effect(m, "Conditional", "OR", strata=["C"], scale="log") == pytest.approx(0.7, abs=1e-12)
        with pytest.raises(ValueError):
            true_effect(m, "Conditional", "OR")

    def test_state_space_limit(self):
        names = [f"R{i}" for i in range(20)]
        with pytest.raises(ModelError, match="state space"):
            true_effect(chain_model(names))
        assert 2**20 == STATE_SPACE_LIMIT


class TestPool:
    def test_identity_roundtrip(self):
        a = simulate(s_1a(300).model, [CohortConfig("a", 300)], seed=1)
        b = simulate(s_1a(200).model, [CohortConfig("b", 200)], seed=2)
        pooled = pool([a, b])
        assert len(pooled.frame) == 500 and "cohort" in pooled.frame
        for ds, cid in ((a, "a"), (b, "b")):
            pd.testing.assert_frame_equal(pooled.cohort(cid).frame, ds.frame)

    def test_coarsen_education(self):
        def ds(cid, levels):
            return MultiCohortDataset(pd.DataFrame({"cohort": cid, "edu": levels, "selected": True}))
        merge = {"none": "never", "partial": "never", "complete": "ever"}
        pooled = pool([ds("a", ["none", "complete"]), ds("b", ["partial", "complete"])], Coarsen("edu", merge))
        assert sorted(pooled.frame["edu"].unique()) == ["ever", "never"]
        with pytest.raises(HarmonizationError, match="no entry"):
            pool([ds("a", ["none", "vocational"])], Coarsen("edu", merge))

    def test_disjoint_codings(self):
        a = MultiCohortDataset(pd.DataFrame({"cohort": "a", "X": ["low", "high"]}))
        b = MultiCohortDataset(pd.DataFrame({"cohort": "b", "X": ["0-5", "6+"]}))
        with pytest.raises(HarmonizationError, match="different codings"):
            pool([a, b])

    def test_irreconcilable_columns(self):
        a = MultiCohortDataset(pd.DataFrame({"cohort": "a", "X": [1]}))
        b = MultiCohortDataset(pd.DataFrame({"cohort": "b", "Z": [1]}))
        with pytest.raises(HarmonizationError, match="irreconcilable"):
            pool([a, b])


class TestSelection:
    def test_identity_without_selection(self):
        ds = simulate(s_1a(100).model, [CohortConfig("a", 100)], seed=0)
        pd.testing.assert_frame_equal(restrict_to_selected(ds).frame, ds.frame)

    def test_keeps_selected_rows_in_order(self):
        ds = simulate(s_2a(1000).model, s_2a(1000).cohorts, seed=0)
        out = restrict_to_selected(ds).frame
        expected = ds.frame[ds.frame["selected"]].reset_index(drop=True)
        pd.testing.assert_frame_equal(out, expected)
        masked = mask_unselected(ds, ["Y"]).frame
        assert masked.loc[~masked["selected"], "Y"].isna().all()

    def test_collider_induces_association(self):
        sc = s_2a(100_000)
        full = simulate(sc.model, sc.cohorts, seed=8).frame
        sel = full[full["selected"]]
        p_full = chi2_contingency(pd.crosstab(full["X"], full["A"]))[1]
        p_sel = chi2_contingency(pd.crosstab(sel["X"], sel["A"]))[1]
        assert p_full > 0.01 and p_sel < 1e-10


class TestLibrary:
    def test_six_scenarios_with_stored_truth(self):
        lib = scenario_library(100)
        assert sorted(lib) == ["S-1A", "S-1B", "S-2A", "S-2B", "S-3A", "S-3B"]
        for sid, sc in lib.items():
            assert sc.true_or == TRUE_MARGINAL_OR[sid]
            assert sc.recompute_true_or() == pytest.approx(sc.true_or, rel=1e-12)
            assert sc.dag.name == "DAG-" + sid[2:]

    def test_1b_differs_only_by_s(self):
        a, b = s_1a().model, s_1b().model
        assert set(b.dag.edges) - set(a.dag.edges) == {("S", "X"), ("S", "Y")}
        for node in ("X", "Y"):
            coefs = dict(b.mechanisms[node].coefficients)
            assert coefs.pop("S") == pytest.approx({"X": 0.6, "Y": 0.6}[node])
            assert coefs == dict(a.mechanisms[node].coefficients)
            assert b.mechanisms[node].intercept == a.mechanisms[node].intercept

    def test_variants(self):
        assert "U" not in get_scenario("S-1B/noU").dag.ids
        ident = without_cohort_effects(s_1b())
        assert ident.model.mechanisms["Y"].coefficients["S"] == 0.0
        assert [c.cohort_id for c in replicate_cohorts(s_1a(), 3).cohorts] == ["cohort1", "cohort2", "cohort3"]
        with pytest.raises(KeyError):
            get_scenario("S-9Z")
        assert get_scenario("S-1B-cancel").cohorts[1].overrides["X"]["coefficients"]["U"] < 0

    def test_json_roundtrip(self):
        for sc in scenario_library(50).values():
            model = model_from_dict(json.loads(json.dumps(model_to_dict(sc.model))))
            assert model_to_dict(model) == model_to_dict(sc.model)
            for c in sc.cohorts:
                assert cohort_from_dict(json.loads(json.dumps(cohort_to_dict(c)))) == c
