"""Canonical DAG fixtures and bundled fixture files.

The six graphs are the smallest structures consistent with the textual
descriptions of the three within-cohort/across-cohort figure pairs:

    DAG-1A  X->Y, C->X, C->Y, U->X, U->Y
    DAG-1B  DAG-1A + S->X, S->Y
    DAG-2A  X->Y, X->P, A->P, A->Y            conditioned on P
    DAG-2B  DAG-2A + S->P, S->Y
    DAG-3A  X->Y, X->X*, U_X->X*              analysed through X*
    DAG-3B  DAG-3A + S->X*, X*->X**, S->X**   analysed through X**
"""
from __future__ import annotations

import os
from pathlib import Path

from .dag import CausalDag, Node, NodeKind, expand_with_cohort_indicator

K = NodeKind

_X = Node("X", K.EXPOSURE, True, "exposure")
_Y = Node("Y", K.OUTCOME, True, "outcome")


def fixture_dir() -> Path:
    env = os.environ.get("COHORTFORGE_FIXTURES")
    if env:
        return Path(env)
    return Path(__file__).parent / "data"


def dag_1a() -> CausalDag:
    return CausalDag.build(
        [_X, _Y,
         Node("C", K.MEASURED_CONFOUNDER, True, "measured confounder"),
         Node("U", K.UNMEASURED_CONFOUNDER, False, "unmeasured confounder")],
        [("X", "Y"), ("C", "X"), ("C", "Y"), ("U", "X"), ("U", "Y")],
        name="DAG-1A",
    )


def dag_1b() -> CausalDag:
    d = expand_with_cohort_indicator(dag_1a(), ["X", "Y"])
    return CausalDag(d.nodes, d.edges, d.conditioned, "DAG-1B")


def dag_2a() -> CausalDag:
    return CausalDag.build(
        [_X, _Y,
         Node("P", K.SELECTION, True, "study participation"),
         Node("A", K.AUXILIARY, True, "maternal age at birth")],
        [("X", "Y"), ("X", "P"), ("A", "P"), ("A", "Y")],
        conditioned=["P"],
        name="DAG-2A",
    )


def dag_2b() -> CausalDag:
    d = expand_with_cohort_indicator(dag_2a(), ["P", "Y"])
    return CausalDag(d.nodes, d.edges, d.conditioned, "DAG-2B")


def dag_3a(differential_outcome: bool = False) -> CausalDag:
    """Exposure measurement error; optionally a misreported outcome Y* that depends on X."""
    nodes = [_X, _Y,
             Node("X*", K.MEASURED_PROXY, True, "measured exposure", proxy_of="X"),
             Node("U_X", K.AUXILIARY, False, "exposure measurement error")]
    edges = [("X", "Y"), ("X", "X*"), ("U_X", "X*")]
    if differential_outcome:
        nodes.append(Node("Y*", K.MEASURED_PROXY, True, "measured outcome", proxy_of="Y"))
        edges += [("Y", "Y*"), ("X", "Y*")]
    return CausalDag.build(nodes, edges, name="DAG-3A")


def dag_3b_core() -> CausalDag:
    d = expand_with_cohort_indicator(dag_3a(), ["X*"])
    return CausalDag(d.nodes, d.edges, d.conditioned, "DAG-3B-core")


def dag_3b() -> CausalDag:
    core = dag_3b_core()
    harmonized = Node("X**", K.MEASURED_PROXY, True, "harmonized exposure", proxy_of="X*")
    return CausalDag(core.nodes + (harmonized,), core.edges + (("X*", "X**"), ("S", "X**")),
                     core.conditioned, "DAG-3B")


CANONICAL_DAGS = {
    "DAG-1A": dag_1a,
    "DAG-1B": dag_1b,
    "DAG-2A": dag_2a,
    "DAG-2B": dag_2b,
    "DAG-3A": dag_3a,
    "DAG-3B": dag_3b,
}


def canonical_dag(name: str) -> CausalDag:
    try:
        return CANONICAL_DAGS[name]()
    except KeyError:
        raise KeyError(f"unknown DAG fixture {name!r}; known: {sorted(CANONICAL_DAGS)}") from None
