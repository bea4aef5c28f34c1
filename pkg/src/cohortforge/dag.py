"""Typed causal DAGs and bias-path analysis.

Paths between the exposure and the outcome are enumerated on the skeleton of
the graph, judged open or blocked under the graph's conditioning set, and
labelled as confounding, selection, measurement or causal.  Paths that pass
through the cohort indicator are reported as across-cohort biases; all other
biasing paths are within-cohort.
"""
from __future__ import annotations

import enum
import itertools
import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping


class NodeKind(str, enum.Enum):
    EXPOSURE = "Exposure"
    OUTCOME = "Outcome"
    MEASURED_CONFOUNDER = "MeasuredConfounder"
    UNMEASURED_CONFOUNDER = "UnmeasuredConfounder"
    SELECTION = "Selection"
    MEASURED_PROXY = "MeasuredProxy"
    COHORT_INDICATOR = "CohortIndicator"
    AUXILIARY = "Auxiliary"


class PathMode(str, enum.Enum):
    TRUE_EXPOSURE = "TrueExposure"
    PROXY_EXPOSURE = "ProxyExposure"


class PathStatus(str, enum.Enum):
    OPEN = "Open"
    BLOCKED = "Blocked"


class BiasKind(str, enum.Enum):
    CONFOUNDING = "Confounding"
    SELECTION = "Selection"
    MEASUREMENT = "Measurement"
    CAUSAL = "Causal"


class DagError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    observed: bool = True
    label: str = ""
    # Which node a MeasuredProxy measures; inferred from its parents when absent.
    proxy_of: str | None = None


@dataclass(frozen=True)
class CausalDag:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[str, str], ...]
    conditioned: frozenset[str] = frozenset()
    name: str = ""

    @classmethod
    def build(cls, nodes: Iterable[Node], edges: Iterable[tuple[str, str]],
              conditioned: Iterable[str] = (), name: str = "") -> "CausalDag":
        return cls(tuple(nodes), tuple((p, c) for p, c in edges), frozenset(conditioned), name)

    # -- lookups -------------------------------------------------------
    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise DagError(f"unknown node id: {node_id!r}")

    def has(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def parents(self, node_id: str) -> list[str]:
        return [p for p, c in self.edges if c == node_id]

    def children(self, node_id: str) -> list[str]:
        return [c for p, c in self.edges if p == node_id]

    def of_kind(self, kind: NodeKind) -> list[str]:
        return [n.id for n in self.nodes if n.kind == kind]

    @property
    def exposure(self) -> str:
        found = self.of_kind(NodeKind.EXPOSURE)
        if len(found) != 1:
            raise DagError(f"expected exactly one Exposure node, found {len(found)}")
        return found[0]

    @property
    def outcome(self) -> str:
        found = self.of_kind(NodeKind.OUTCOME)
        if len(found) != 1:
            raise DagError(f"expected exactly one Outcome node, found {len(found)}")
        return found[0]

    def descendants(self, node_ids: Iterable[str]) -> set[str]:
        """Strict descendants of ``node_ids`` (a start node is included only if reachable)."""
        children = _adjacency(self.edges, forward=True)
        seen: set[str] = set()
        stack = [c for n in node_ids for c in children.get(n, ())]
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(children.get(n, ()))
        return seen

    def ancestors(self, node_ids: Iterable[str]) -> set[str]:
        parents = _adjacency(self.edges, forward=False)
        seen: set[str] = set()
        stack = [p for n in node_ids for p in parents.get(n, ())]
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(parents.get(n, ()))
        return seen

    def topological_order(self) -> list[str]:
        indeg = {n: 0 for n in self.ids}
        for _, c in self.edges:
            indeg[c] += 1
        children = _adjacency(self.edges, forward=True)
        queue = deque(n for n in self.ids if indeg[n] == 0)
        order = []
        while queue:
            n = queue.popleft()
            order.append(n)
            for c in children.get(n, ()):
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if len(order) != len(indeg):
            raise DagError("graph contains a cycle")
        return order

    # -- derived graphs -----------------------------------------------
    def with_conditioned(self, conditioned: Iterable[str]) -> "CausalDag":
        return replace(self, conditioned=frozenset(conditioned))

    def without_nodes(self, drop: Iterable[str]) -> "CausalDag":
        drop = set(drop)
        return CausalDag(
            tuple(n for n in self.nodes if n.id not in drop),
            tuple(e for e in self.edges if e[0] not in drop and e[1] not in drop),
            frozenset(self.conditioned - drop),
            self.name,
        )

    def proxies_of(self, node_id: str) -> list[str]:
        """MeasuredProxy nodes that measure ``node_id`` directly."""
        out = []
        for n in self.nodes:
            if n.kind != NodeKind.MEASURED_PROXY:
                continue
            if _proxy_target(self, n) == node_id:
                out.append(n.id)
        return out

    def terminal_proxy(self, node_id: str) -> str | None:
        """Most-derived proxy in the measurement chain of ``node_id`` (e.g. X -> X* -> X**)."""
        current = None
        frontier = self.proxies_of(node_id)
        while frontier:
            current = sorted(frontier)[0]
            frontier = self.proxies_of(current)
        return current


def _proxy_target(dag: CausalDag, node: Node) -> str | None:
    if node.proxy_of is not None:
        return node.proxy_of
    parents = dag.parents(node.id)
    kinds = {p: dag.node(p).kind for p in parents if dag.has(p)}
    # An outcome parent wins: Y* with parents {Y, X} measures Y, with X as differential error.
    for wanted in (NodeKind.OUTCOME, NodeKind.EXPOSURE, NodeKind.MEASURED_PROXY):
        hits = sorted(p for p, k in kinds.items() if k == wanted)
        if hits:
            return hits[0]
    return None


def _adjacency(edges, forward: bool) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {}
    for p, c in edges:
        if forward:
            adj.setdefault(p, []).append(c)
        else:
            adj.setdefault(c, []).append(p)
    return adj


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _find_cycle(ids: list[str], edges) -> list[str] | None:
    children = _adjacency(edges, forward=True)
    color = {n: 0 for n in ids}
    stack_path: list[str] = []

    def visit(n: str) -> list[str] | None:
        color[n] = 1
        stack_path.append(n)
        for c in children.get(n, ()):
            if c not in color:
                continue
            if color[c] == 1:
                return stack_path[stack_path.index(c):]
            if color[c] == 0:
                found = visit(c)
                if found:
                    return found
        stack_path.pop()
        color[n] = 2
        return None

    for n in ids:
        if color[n] == 0:
            found = visit(n)
            if found:
                return found
    return None


def validate_dag(dag: CausalDag) -> ValidationReport:
    report = ValidationReport()
    ids = [n.id for n in dag.nodes]
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            report.violations.append(f"duplicate node id: {i}")
        seen.add(i)
    for p, c in dag.edges:
        for end in (p, c):
            if end not in seen:
                report.violations.append(f"dangling edge {p}->{c}: unknown node {end}")
    for n in dag.nodes:
        if n.kind == NodeKind.UNMEASURED_CONFOUNDER and n.observed:
            report.violations.append(f"unmeasured confounder {n.id} marked observed")
    for cid in sorted(dag.conditioned):
        if cid not in seen:
            report.violations.append(f"conditioned node {cid} not in graph")
            continue
        node = dag.node(cid)
        if not node.observed and node.kind != NodeKind.SELECTION:
            report.violations.append(f"conditioning on unobservable node {cid}")
    valid_edges = [(p, c) for p, c in dag.edges if p in seen and c in seen]
    cycle = _find_cycle(list(dict.fromkeys(ids)), valid_edges)
    if cycle:
        report.violations.append("cycle: " + " -> ".join(cycle + [cycle[0]]))
    return report


# ---------------------------------------------------------------------------
# d-separation
# ---------------------------------------------------------------------------

def _check_sets(dag: CausalDag, *sets: Iterable[str]) -> list[set[str]]:
    out = []
    for s in sets:
        s = set(s)
        for n in s:
            if not dag.has(n):
                raise DagError(f"unknown node id: {n!r}")
        out.append(s)
    for x, y in itertools.combinations(out, 2):
        if x & y:
            raise DagError(f"node sets must be disjoint, shared: {sorted(x & y)}")
    return out


def d_separated(dag: CausalDag, a: Iterable[str], b: Iterable[str], given: Iterable[str] = ()) -> bool:
    """Reachability ("Bayes ball") test of whether ``given`` d-separates ``a`` from ``b``."""
    a, b, given = _check_sets(dag, a, b, given)
    parents = _adjacency(dag.edges, forward=False)
    children = _adjacency(dag.edges, forward=True)
    # A collider is open iff it is in ``given`` or has a descendant in ``given``.
    opens_collider = given | dag.ancestors(given)

    # "up": arrived from a child; "down": arrived from a parent.
    queue = deque((n, "up") for n in a)
    visited: set[tuple[str, str]] = set()
    while queue:
        node, direction = queue.popleft()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node in b:
            return False
        if direction == "up":
            if node in given:
                continue
            queue.extend((p, "up") for p in parents.get(node, ()))
            queue.extend((c, "down") for c in children.get(node, ()))
        else:
            if node not in given:
                queue.extend((c, "down") for c in children.get(node, ()))
            if node in opens_collider:
                queue.extend((p, "up") for p in parents.get(node, ()))
    return True


# ---------------------------------------------------------------------------
# path enumeration and classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasPath:
    path: tuple[str, ...]
    # forward[i] is True when the i-th edge points from path[i] to path[i+1].
    forward: tuple[bool, ...]
    status: PathStatus
    openers: frozenset[str]
    classification: BiasKind

    def render(self) -> str:
        parts = [self.path[0]]
        for node, fwd in zip(self.path[1:], self.forward):
            parts.append("→" if fwd else "←")
            parts.append(node)
        return "".join(parts)

    @property
    def colliders(self) -> list[str]:
        return _colliders(self.path, self.forward)

    def to_dict(self) -> dict:
        return {
            "path": list(self.path),
            "display": self.render(),
            "status": self.status.value,
            "openers": sorted(self.openers),
            "classification": self.classification.value,
        }


def _colliders(path, forward) -> list[str]:
    return [path[i] for i in range(1, len(path) - 1) if forward[i - 1] and not forward[i]]


def _simple_paths(dag: CausalDag, start: str, end: str) -> list[tuple[tuple[str, ...], tuple[bool, ...]]]:
    neighbours: dict[str, list[tuple[str, bool]]] = {}
    for p, c in dag.edges:
        neighbours.setdefault(p, []).append((c, True))
        neighbours.setdefault(c, []).append((p, False))
    for k in neighbours:
        neighbours[k].sort()
    found = []

    def walk(node, path, dirs, on_path):
        if node == end:
            found.append((tuple(path), tuple(dirs)))
            return
        for nxt, fwd in neighbours.get(node, ()):
            if nxt in on_path:
                continue
            on_path.add(nxt)
            path.append(nxt)
            dirs.append(fwd)
            walk(nxt, path, dirs, on_path)
            dirs.pop()
            path.pop()
            on_path.discard(nxt)

    walk(start, [start], [], {start})
    return found


def _path_status(dag: CausalDag, path, forward, conditioned) -> tuple[PathStatus, frozenset[str]]:
    conditioned = set(conditioned)
    openers = set()
    blocked = False
    for i in range(1, len(path) - 1):
        node = path[i]
        if forward[i - 1] and not forward[i]:
            if node in conditioned or dag.descendants([node]) & conditioned:
                openers.add(node)
            else:
                blocked = True
        elif node in conditioned:
            blocked = True
    return (PathStatus.BLOCKED if blocked else PathStatus.OPEN), frozenset(openers)


def classify_path(path: BiasPath | tuple[tuple[str, ...], tuple[bool, ...], frozenset[str]],
                  dag: CausalDag, mode: PathMode = PathMode.TRUE_EXPOSURE) -> BiasKind:
    """Label a path; precedence Measurement > Selection > Confounding > Causal.

    Selection requires a conditioned (opened) collider; a collider path left
    blocked is still labelled Selection unless it is a backdoor path.
    """
    if isinstance(path, BiasPath):
        nodes, forward, openers = path.path, path.forward, path.openers
    else:
        nodes, forward, openers = path
    mode = PathMode(mode)
    if mode == PathMode.PROXY_EXPOSURE or any(
            dag.node(n).kind == NodeKind.MEASURED_PROXY for n in nodes):
        return BiasKind.MEASUREMENT
    if openers:
        return BiasKind.SELECTION
    if not forward[0]:
        return BiasKind.CONFOUNDING
    if all(forward):
        return BiasKind.CAUSAL
    return BiasKind.SELECTION


def analysis_endpoints(dag: CausalDag, mode: PathMode) -> tuple[str, str]:
    exposure, outcome = dag.exposure, dag.outcome
    if PathMode(mode) == PathMode.TRUE_EXPOSURE:
        return exposure, outcome
    proxy = dag.terminal_proxy(exposure)
    if proxy is None:
        raise DagError(f"ProxyExposure mode needs a MeasuredProxy of {exposure}")
    return proxy, dag.terminal_proxy(outcome) or outcome


def default_mode(dag: CausalDag) -> PathMode:
    """Proxy mode whenever the exposure has a measured proxy."""
    return PathMode.PROXY_EXPOSURE if dag.proxies_of(dag.exposure) else PathMode.TRUE_EXPOSURE


def enumerate_paths(dag: CausalDag, mode: PathMode = PathMode.TRUE_EXPOSURE) -> list[BiasPath]:
    mode = PathMode(mode)
    start, end = analysis_endpoints(dag, mode)
    out = []
    for nodes, forward in _simple_paths(dag, start, end):
        status, openers = _path_status(dag, nodes, forward, dag.conditioned)
        kind = classify_path((nodes, forward, openers), dag, mode)
        out.append(BiasPath(nodes, forward, status, openers, kind))
    return out


# ---------------------------------------------------------------------------
# adjustment
# ---------------------------------------------------------------------------

def backdoor_valid(dag: CausalDag, adjustment: Iterable[str]) -> bool:
    adjustment = set(adjustment)
    x, y = dag.exposure, dag.outcome
    for n in adjustment:
        if not dag.has(n):
            raise DagError(f"unknown node id: {n!r}")
    bad = adjustment & (dag.descendants([x]) | {x})
    if bad:
        raise DagError(f"adjustment contains descendant of exposure: {sorted(bad)[0]}")
    hidden = sorted(n for n in adjustment if not dag.node(n).observed)
    if hidden:
        raise DagError(f"adjustment contains unobserved node: {hidden[0]}")
    cut = replace(dag, edges=tuple(e for e in dag.edges if e[0] != x))
    return d_separated(cut, {x}, {y}, adjustment)


def minimal_adjustment_sets(dag: CausalDag, max_size: int = 6) -> list[frozenset[str]]:
    """All inclusion-minimal valid observed adjustment sets of size <= ``max_size``."""
    x, y = dag.exposure, dag.outcome
    banned = dag.descendants([x]) | {x, y}
    candidates = sorted(n.id for n in dag.nodes if n.observed and n.id not in banned)
    found: list[frozenset[str]] = []
    for size in range(0, min(max_size, len(candidates)) + 1):
        for combo in itertools.combinations(candidates, size):
            s = frozenset(combo)
            if any(f <= s for f in found):
                continue
            if backdoor_valid(dag, s):
                found.append(s)
    return found


def expand_with_cohort_indicator(dag: CausalDag, targets: Iterable[str], indicator: str = "S",
                                 label: str = "cohort indicator") -> CausalDag:
    targets = list(dict.fromkeys(targets))
    if dag.of_kind(NodeKind.COHORT_INDICATOR):
        raise DagError("graph already has a CohortIndicator node")
    if not targets:
        raise DagError("targets must be non-empty")
    for t in targets:
        if not dag.has(t):
            raise DagError(f"unknown node id: {t!r}")
    if dag.has(indicator):
        raise DagError(f"node id {indicator!r} already in use")
    node = Node(indicator, NodeKind.COHORT_INDICATOR, True, label)
    return CausalDag(dag.nodes + (node,), dag.edges + tuple((indicator, t) for t in targets),
                     dag.conditioned, dag.name)


# ---------------------------------------------------------------------------
# audit report
# ---------------------------------------------------------------------------

@dataclass
class AuditReport:
    dag_name: str
    mode: PathMode
    groups: dict[str, list[BiasPath]]
    adjustment_sets: list[frozenset[str]] | None
    measurement_modifiers: list[str]
    max_adjustment_size: int

    @property
    def biased(self) -> bool:
        return any(self.groups.values())

    def to_dict(self) -> dict:
        return {
            "dag": self.dag_name,
            "mode": self.mode.value,
            "biased": self.biased,
            "groups": {k: [p.to_dict() for p in v] for k, v in self.groups.items()},
            "minimal_adjustment_sets": (None if self.adjustment_sets is None
                                        else [sorted(s) for s in self.adjustment_sets]),
            "max_adjustment_size": self.max_adjustment_size,
            "cohort_dependent_measurement": self.measurement_modifiers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def to_text(self) -> str:
        rows = [("group", "status", "path", "openers")]
        for key, paths in self.groups.items():
            for p in paths:
                rows.append((key, p.status.value, p.render(), ",".join(sorted(p.openers)) or "-"))
        lines = [f"bias audit: {self.dag_name or '<unnamed>'} ({self.mode.value})"]
        if len(rows) == 1:
            lines.append("no open biasing paths")
        else:
            widths = [max(len(r[i]) for r in rows) for i in range(4)]
            for r in rows:
                lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        if self.adjustment_sets is not None:
            if self.adjustment_sets:
                sets = "; ".join("{" + ", ".join(sorted(s)) + "}" for s in self.adjustment_sets)
            else:
                sets = "none"
            lines.append(f"minimal observed adjustment sets (size <= {self.max_adjustment_size}): {sets}")
        if self.measurement_modifiers:
            lines.append("cohort-dependent measurement: " + ", ".join(self.measurement_modifiers))
        return "\n".join(lines) + "\n"


def bias_audit_report(dag: CausalDag, mode: PathMode | None = None, max_adjustment_size: int = 6) -> AuditReport:
    mode = default_mode(dag) if mode is None else PathMode(mode)
    cohort = set(dag.of_kind(NodeKind.COHORT_INDICATOR))
    groups: dict[str, list[BiasPath]] = {}
    order = [BiasKind.CONFOUNDING, BiasKind.SELECTION, BiasKind.MEASUREMENT]
    paths = [p for p in enumerate_paths(dag, mode)
             if p.status == PathStatus.OPEN and p.classification != BiasKind.CAUSAL]
    for kind in order:
        for scope in ("Within", "Across"):
            members = [p for p in paths if p.classification == kind
                       and (bool(cohort & set(p.path)) == (scope == "Across"))]
            if members:
                groups[f"{kind.value}/{scope}"] = sorted(members, key=lambda p: p.render())

    adjustment = None
    if any(k.startswith("Confounding") for k in groups):
        adjustment = minimal_adjustment_sets(dag, max_adjustment_size)

    # Cohort-dependent error on a proxy changes the X*-X link per cohort without opening a new path.
    modifiers = []
    for p in paths:
        if p.classification != BiasKind.MEASUREMENT:
            continue
        for n in p.path:
            if dag.node(n).kind == NodeKind.MEASURED_PROXY and cohort & set(dag.parents(n)):
                if n not in modifiers:
                    modifiers.append(n)
    return AuditReport(dag.name, mode, groups, adjustment, sorted(modifiers), max_adjustment_size)


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def dag_to_dict(dag: CausalDag) -> dict:
    nodes = []
    for n in dag.nodes:
        entry = {"id": n.id, "kind": n.kind.value, "observed": n.observed, "label": n.label}
        if n.proxy_of is not None:
            entry["proxy_of"] = n.proxy_of
        nodes.append(entry)
    out = {"nodes": nodes, "edges": [list(e) for e in dag.edges], "conditioned": sorted(dag.conditioned)}
    if dag.name:
        out["name"] = dag.name
    return out


def _line_of(text: str | None, needle: str) -> int | None:
    if not text:
        return None
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def dag_from_dict(data: Mapping, source_text: str | None = None) -> CausalDag:
    """Parse the DAG file schema; errors carry a line number when ``source_text`` is given."""

    def fail(msg: str, needle: str | None = None):
        line = _line_of(source_text, needle) if needle else None
        raise DagError(f"line {line}: {msg}" if line else msg)

    if not isinstance(data, Mapping):
        fail("top level must be an object")
    for key in ("nodes", "edges"):
        if key not in data:
            fail(f"missing required key {key!r}")
    if not isinstance(data["nodes"], list) or not isinstance(data["edges"], list):
        fail("'nodes' and 'edges' must be arrays")
    nodes = []
    for i, raw in enumerate(data["nodes"]):
        if not isinstance(raw, Mapping) or "id" not in raw or "kind" not in raw:
            fail(f"nodes[{i}] needs 'id' and 'kind'", json.dumps(raw)[:20] if raw else None)
        node_id = raw["id"]
        needle = f'"{node_id}"'
        if not isinstance(node_id, str) or not node_id:
            fail(f"nodes[{i}].id must be a non-empty string")
        try:
            kind = NodeKind(raw["kind"])
        except ValueError:
            fail(f"nodes[{i}].kind {raw['kind']!r} is not a NodeKind", f'"{raw["kind"]}"')
        observed = raw.get("observed", kind != NodeKind.UNMEASURED_CONFOUNDER)
        if not isinstance(observed, bool):
            fail(f"nodes[{i}].observed must be boolean", needle)
        extra = set(raw) - {"id", "kind", "observed", "label", "proxy_of"}
        if extra:
            fail(f"nodes[{i}] has unknown keys {sorted(extra)}", needle)
        nodes.append(Node(node_id, kind, observed, str(raw.get("label", "")), raw.get("proxy_of")))
    edges = []
    for i, e in enumerate(data["edges"]):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, str) for v in e)):
            fail(f"edges[{i}] must be a [parent, child] pair", json.dumps(e) if e is not None else None)
        edges.append((e[0], e[1]))
    conditioned = data.get("conditioned", [])
    if not isinstance(conditioned, list):
        fail("'conditioned' must be an array")
    extra = set(data) - {"nodes", "edges", "conditioned", "name"}
    if extra:
        fail(f"unknown top-level keys {sorted(extra)}", f'"{sorted(extra)[0]}"')
    return CausalDag.build(nodes, edges, conditioned, str(data.get("name", "")))


def load_dag(path) -> CausalDag:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DagError(f"line {exc.lineno}: malformed JSON: {exc.msg}") from None
    return dag_from_dict(data, text)


def dump_dag(dag: CausalDag, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dag_to_dict(dag), fh, indent=2)
        fh.write("\n")
