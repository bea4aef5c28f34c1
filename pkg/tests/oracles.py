"""Independent reference computations used by the test-suite.

Nothing here imports the code paths it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# -- d-separation by brute-force path enumeration -------------------------

def random_dag(rng: np.random.Generator, n_nodes: int, edge_prob: float = 0.3):
    """Random DAG over n0..n{k-1}; edges only go from lower to higher index in a random order."""
    names = [f"n{i}" for i in range(n_nodes)]
    order = list(rng.permutation(n_nodes))
    edges = []
    for i, j in itertools.combinations(range(n_nodes), 2):
        if rng.random() < edge_prob:
            edges.append((names[order[i]], names[order[j]]))
    return names, edges


class PathOracle:
    """All simple skeleton paths between every pair, judged per path under the blocking rules."""

    def __init__(self, names, edges):
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(self.names)}
        self.edges = set(edges)
        nb = {n: set() for n in self.names}
        for p, c in edges:
            nb[p].add(c)
            nb[c].add(p)
        self.nb = nb
        # descendant masks, including the node itself
        children = {n: [c for p, c in edges if p == n] for n in self.names}
        self.desc_mask = {}
        for n in self.names:
            seen, stack = {n}, [n]
            while stack:
                for c in children[stack.pop()]:
                    if c not in seen:
                        seen.add(c)
                        stack.append(c)
            self.desc_mask[n] = sum(1 << self.index[d] for d in seen)
        self._paths = {}

    def paths(self, a, b):
        key = (a, b)
        if key not in self._paths:
            out = []

            def walk(path):
                last = path[-1]
                if last == b:
                    out.append(tuple(path))
                    return
                for nxt in sorted(self.nb[last]):
                    if nxt not in path:
                        walk(path + [nxt])

            walk([a])
            self._paths[key] = out
        return self._paths[key]

    def path_open(self, path, given_mask: int) -> bool:
        for i in range(1, len(path) - 1):
            prev, node, nxt = path[i - 1], path[i], path[i + 1]
            collider = (prev, node) in self.edges and (nxt, node) in self.edges
            if collider:
                if not (self.desc_mask[node] & given_mask):
                    return False
            elif given_mask >> self.index[node] & 1:
                return False
        return True

    def d_separated(self, a, b, given) -> bool:
        mask = sum(1 << self.index[g] for g in given)
        return not any(self.path_open(p, mask) for p in self.paths(a, b))


# -- logistic regression by plain Newton steps ----------------------------

def newton_logistic(X, y, w=None, iters=100):
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if w is None else np.asarray(w, float)
    beta = np.zeros(X.shape[1])
    for _ in range(iters):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (w * (y - p))
        hess = (X * (w * p * (1 - p))[:, None]).T @ X
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-13:
            break
    return beta


# -- meta-analysis and Rubin's rules by direct formula ---------------------

def inverse_variance(thetas, ses):
    total_w = 0.0
    acc = 0.0
    for t, s in zip(thetas, ses):
        w = 1.0 / (s * s)
        total_w += w
        acc += w * t
    est = acc / total_w
    q = sum((t - est) ** 2 / (s * s) for t, s in zip(thetas, ses))
    sw2 = sum(1.0 / s ** 4 for s in ses)
    df = len(thetas) - 1
    c = total_w - sw2 / total_w
    tau2 = max(0.0, (q - df) / c)
    i2 = 0.0 if q <= 0 else max(0.0, (q - df) / q) * 100.0
    rw = [1.0 / (s * s + tau2) for s in ses]
    rand = sum(w * t for w, t in zip(rw, thetas)) / sum(rw)
    return {"fixed": est, "fixed_se": math.sqrt(1.0 / total_w), "q": q, "tau2": tau2, "i2": i2,
            "random": rand, "random_se": math.sqrt(1.0 / sum(rw))}


def rubin(thetas, variances):
    m = len(thetas)
    qbar = sum(thetas) / m
    w = sum(variances) / m
    b = sum((t - qbar) ** 2 for t in thetas) / (m - 1)
    return qbar, w, b, w + (1 + 1 / m) * b


# -- forward misclassification at expectation -----------------------------

def forward_misclassify(true_counts, sensitivity, specificity):
    """true_counts: {'cases': (exposed, unexposed), 'controls': (exposed, unexposed)}."""
    out = {}
    for stratum, (e, u) in true_counts.items():
        obs_e = sensitivity * e + (1 - specificity) * u
        obs_u = (1 - sensitivity) * e + specificity * u
        out[stratum] = (obs_e, obs_u)
    return out
