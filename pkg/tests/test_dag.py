import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cohortforge.dag import (
    BiasKind,
    CausalDag,
    DagError,
    Node,
    NodeKind,
    PathMode,
    PathStatus,
    backdoor_valid,
    bias_audit_report,
    classify_path,
    d_separated,
    dag_from_dict,
    dag_to_dict,
    enumerate_paths,
    expand_with_cohort_indicator,
    minimal_adjustment_sets,
    validate_dag,
)
from cohortforge.fixtures import canonical_dag, dag_1a, dag_1b, dag_2a, dag_2b, dag_3a, dag_3b, dag_3b_core

from oracles import PathOracle, random_dag

K = NodeKind


def plain_dag(names, edges, conditioned=()):
    return CausalDag.build([Node(n, K.AUXILIARY) for n in names], edges, conditioned)


def paths_by_display(dag, mode=PathMode.TRUE_EXPOSURE):
    return {p.render(): p for p in enumerate_paths(dag, mode)}


class TestValidate:
    def test_fixture_ok(self):
        for name in ("DAG-1A", "DAG-1B", "DAG-2A", "DAG-2B", "DAG-3A", "DAG-3B"):
            assert validate_dag(canonical_dag(name)).ok

    def test_two_cycle(self):
        d = CausalDag.build([Node("X", K.EXPOSURE), Node("Y", K.OUTCOME)], [("X", "Y"), ("Y", "X")])
        report = validate_dag(d)
        assert not report.ok
        cycle = [v for v in report.violations if v.startswith("cycle")]
        assert cycle and "X" in cycle[0] and "Y" in cycle[0]

    def test_conditioning_on_unobservable(self):
        d = dag_1a().with_conditioned({"U"})
        assert any("conditioning on unobservable" in v for v in validate_dag(d).violations)

    def test_dangling_and_duplicate(self):
        d = CausalDag.build([Node("X", K.EXPOSURE), Node("X", K.OUTCOME)], [("X", "Q")])
        v = validate_dag(d).violations
        assert any("duplicate" in s for s in v)
        assert any("dangling" in s for s in v)


class TestDSeparation:
    def test_fork_blocked(self):
        d = plain_dag("XCY", [("C", "X"), ("C", "Y")])
        assert d_separated(d, {"X"}, {"Y"}, {"C"})
        assert not d_separated(d, {"X"}, {"Y"}, set())

    def test_collider(self):
        d = plain_dag("XPAY", [("X", "P"), ("A", "P"), ("A", "Y")])
        assert d_separated(d, {"X"}, {"Y"}, set())
        assert not d_separated(d, {"X"}, {"Y"}, {"P"})

    def test_descendant_of_collider_opens(self):
        d = plain_dag(["X", "P", "A", "Y", "R"], [("X", "P"), ("A", "P"), ("A", "Y"), ("P", "R")])
        assert not d_separated(d, {"X"}, {"Y"}, {"R"})

    def test_unknown_node(self):
        with pytest.raises(DagError):
            d_separated(dag_1a(), {"X"}, {"Q"}, set())

    def test_overlapping_sets_rejected(self):
        with pytest.raises(DagError):
            d_separated(dag_1a(), {"X"}, {"Y"}, {"X"})

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_path_oracle(self, seed):
        rng = np.random.default_rng(seed)
        names, edges = random_dag(rng, int(rng.integers(3, 9)))
        dag = plain_dag(names, edges)
        oracle = PathOracle(names, edges)
        for a, b in itertools.combinations(names, 2):
            rest = [n for n in names if n not in (a, b)]
            for k in range(len(rest) + 1):
                for z in itertools.combinations(rest, k):
                    assert d_separated(dag, {a}, {b}, set(z)) == oracle.d_separated(a, b, z)


class TestEnumeratePaths:
    def test_dag_1a(self):
        paths = paths_by_display(dag_1a())
        assert set(paths) == {"X→Y", "X←C→Y", "X←U→Y"}
        assert paths["X→Y"].classification == BiasKind.CAUSAL
        assert paths["X←C→Y"].classification == BiasKind.CONFOUNDING
        assert paths["X←U→Y"].classification == BiasKind.CONFOUNDING
        assert all(p.status == PathStatus.OPEN for p in paths.values())

    def test_dag_1a_conditioned_on_c(self):
        paths = paths_by_display(dag_1a().with_conditioned({"C"}))
        assert paths["X←C→Y"].status == PathStatus.BLOCKED
        assert paths["X←U→Y"].status == PathStatus.OPEN

    def test_dag_2a_selection(self):
        paths = paths_by_display(dag_2a())
        p = paths["X→P←A→Y"]
        assert p.status == PathStatus.OPEN
        assert p.openers == {"P"}
        assert p.classification == BiasKind.SELECTION

    def test_proxy_mode_requires_proxy(self):
        with pytest.raises(DagError):
            enumerate_paths(dag_1a(), PathMode.PROXY_EXPOSURE)

    def test_proxy_mode_measurement(self):
        paths = paths_by_display(dag_3a(), PathMode.PROXY_EXPOSURE)
        assert set(paths) == {"X*←X→Y"}
        assert paths["X*←X→Y"].classification == BiasKind.MEASUREMENT

    def test_differential_outcome_extension(self):
        paths = paths_by_display(dag_3a(differential_outcome=True), PathMode.PROXY_EXPOSURE)
        assert "X*←X→Y*" in paths
        assert "X*←X→Y→Y*" in paths
        assert all(p.classification == BiasKind.MEASUREMENT for p in paths.values())

    @pytest.mark.parametrize("seed", range(30))
    def test_exactly_the_simple_paths(self, seed):
        rng = np.random.default_rng(1000 + seed)
        names, edges = random_dag(rng, int(rng.integers(3, 9)), 0.4)
        nodes = [Node(n, K.AUXILIARY) for n in names]
        nodes[0] = Node(names[0], K.EXPOSURE)
        nodes[-1] = Node(names[-1], K.OUTCOME)
        dag = CausalDag.build(nodes, edges)
        got = {p.path for p in enumerate_paths(dag)}
        assert got == set(PathOracle(names, edges).paths(names[0], names[-1]))


class TestClassify:
    def test_backdoor(self):
        assert classify_path((("X", "C", "Y"), (False, True), frozenset()), dag_1a()) == BiasKind.CONFOUNDING

    def test_selection(self):
        assert classify_path((("X", "P", "A", "Y"), (True, False, True), frozenset({"P"})),
                             dag_2a()) == BiasKind.SELECTION

    def test_measurement(self):
        assert classify_path((("X*", "X", "Y"), (False, True), frozenset()), dag_3a(),
                             PathMode.PROXY_EXPOSURE) == BiasKind.MEASUREMENT

    def test_measurement_beats_selection(self):
        # proxy node on an opened collider path
        d = dag_2a()
        assert classify_path((("X", "P", "A", "Y"), (True, False, True), frozenset({"P"})), d,
                             PathMode.PROXY_EXPOSURE) == BiasKind.MEASUREMENT

    def test_blocked_collider_path_is_selection_pattern(self):
        d = dag_2a().with_conditioned(())
        p = paths_by_display(d)["X→P←A→Y"]
        assert p.status == PathStatus.BLOCKED
        assert p.classification == BiasKind.SELECTION


class TestBackdoor:
    def test_unmeasured_confounder_blocks_validity(self):
        assert not backdoor_valid(dag_1a(), {"C"})

    def test_single_fork(self):
        assert backdoor_valid(dag_1a().without_nodes({"U"}), {"C"})

    def test_cohort_indicator_needed(self):
        d = dag_1b().without_nodes({"U"})
        assert not backdoor_valid(d, {"C"})
        assert backdoor_valid(d, {"C", "S"})

    def test_descendant_rejected(self):
        with pytest.raises(DagError, match="P"):
            backdoor_valid(dag_2a(), {"P"})

    @pytest.mark.parametrize("seed", range(25))
    def test_valid_sets_block_confounding_paths(self, seed):
        rng = np.random.default_rng(50 + seed)
        names, edges = random_dag(rng, int(rng.integers(4, 8)), 0.45)
        nodes = [Node(n, K.AUXILIARY) for n in names]
        nodes[0] = Node(names[0], K.EXPOSURE)
        nodes[-1] = Node(names[-1], K.OUTCOME)
        dag = CausalDag.build(nodes, edges)
        for z in minimal_adjustment_sets(dag):
            for p in enumerate_paths(dag.with_conditioned(z)):
                if p.classification == BiasKind.CONFOUNDING:
                    assert p.status == PathStatus.BLOCKED


class TestExpand:
    def test_1a_to_1b(self):
        d = expand_with_cohort_indicator(dag_1a(), ["X", "Y"])
        assert set(d.edges) == set(dag_1b().edges)
        assert d.node("S").kind == K.COHORT_INDICATOR and d.node("S").observed

    def test_2a_to_2b(self):
        d = expand_with_cohort_indicator(dag_2a(), ["P", "Y"])
        assert set(d.edges) == set(dag_2b().edges)
        assert d.conditioned == {"P"}

    def test_3a_to_3b_core(self):
        d = expand_with_cohort_indicator(dag_3a(), ["X*"])
        assert set(d.edges) == set(dag_3b_core().edges)
        assert validate_dag(dag_3b()).ok

    def test_errors(self):
        with pytest.raises(DagError):
            expand_with_cohort_indicator(dag_1b(), ["X"])
        with pytest.raises(DagError):
            expand_with_cohort_indicator(dag_1a(), [])

    @pytest.mark.parametrize("seed", range(25))
    def test_preserves_existing_path_status(self, seed):
        rng = np.random.default_rng(300 + seed)
        names, edges = random_dag(rng, int(rng.integers(3, 8)), 0.4)
        nodes = [Node(n, K.AUXILIARY) for n in names]
        nodes[0] = Node(names[0], K.EXPOSURE)
        nodes[-1] = Node(names[-1], K.OUTCOME)
        cond = [n for n in names[1:-1] if rng.random() < 0.3]
        dag = CausalDag.build(nodes, edges, cond)
        before = {p.path: p.status for p in enumerate_paths(dag)}
        targets = [n for n in names if rng.random() < 0.5] or [names[0]]
        after = {p.path: p.status for p in enumerate_paths(expand_with_cohort_indicator(dag, targets))}
        for path, status in before.items():
            assert after[path] == status


class TestAuditReport:
    def test_dag_1b(self):
        r = bias_audit_report(dag_1b())
        shown = {k: [p.render() for p in v] for k, v in r.groups.items()}
        assert shown == {"Confounding/Within": ["X←C→Y", "X←U→Y"], "Confounding/Across": ["X←S→Y"]}
        assert r.adjustment_sets == []

    def test_dag_1b_without_u(self):
        r = bias_audit_report(dag_1b().without_nodes({"U"}))
        assert r.adjustment_sets == [frozenset({"C", "S"})]

    def test_dag_2b(self):
        r = bias_audit_report(dag_2b())
        shown = {k: [p.render() for p in v] for k, v in r.groups.items()}
        assert shown == {"Selection/Within": ["X→P←A→Y"], "Selection/Across": ["X→P←S→Y"]}

    def test_no_bias(self):
        d = CausalDag.build([Node("X", K.EXPOSURE), Node("Y", K.OUTCOME)], [("X", "Y")])
        r = bias_audit_report(d)
        assert r.groups == {} and not r.biased
        assert "no open biasing paths" in r.to_text()

    def test_cohort_dependent_measurement_flag(self):
        assert bias_audit_report(dag_3b()).measurement_modifiers == ["X*", "X**"]
        assert bias_audit_report(dag_3a()).measurement_modifiers == []

    def test_adjustment_search_matches_brute_force(self):
        d = dag_1b().without_nodes({"U"})
        valid = [set(z) for k in range(3) for z in itertools.combinations(["C", "S"], k)
                 if backdoor_valid(d, z)]
        assert valid == [{"C", "S"}]


class TestJson:
    def test_roundtrip(self):
        for name in ("DAG-1A", "DAG-2B", "DAG-3B"):
            d = canonical_dag(name)
            back = dag_from_dict(json.loads(json.dumps(dag_to_dict(d))))
            assert back == d

    def test_schema_error_has_line(self):
        text = '{\n "nodes": [\n  {"id": "X", "kind": "Exposur"}\n ],\n "edges": []\n}'
        with pytest.raises(DagError, match="line 3"):
            dag_from_dict(json.loads(text), text)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=6),
       st.booleans())
def test_classify_is_total_and_deterministic(dirs, proxy):
    d = dag_3a() if proxy else dag_1a()
    forward = tuple(x[0] for x in dirs)
    nodes = tuple(["X"] + [f"n{i}" for i in range(len(forward) - 1)] + ["Y"])
    openers = frozenset(n for n, x in zip(nodes[1:-1], dirs) if x[1])
    # only known ids can be looked up; use a graph whose every id exists
    g = CausalDag.build(list(d.nodes) + [Node(n, K.AUXILIARY) for n in nodes[1:-1]], d.edges)
    mode = PathMode.PROXY_EXPOSURE if proxy else PathMode.TRUE_EXPOSURE
    first = classify_path((nodes, forward, openers), g, mode)
    assert first == classify_path((nodes, forward, openers), g, mode)
    assert isinstance(first, BiasKind)
    if proxy:
        assert first == BiasKind.MEASUREMENT
    elif openers:
        assert first == BiasKind.SELECTION
    elif not forward[0]:
        assert first == BiasKind.CONFOUNDING
    elif all(forward):
        assert first == BiasKind.CAUSAL
