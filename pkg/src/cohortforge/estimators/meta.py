"""Two-step (inverse-variance) meta-analysis of cohort-specific estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2


@dataclass
class MetaResult:
    fixed: float
    fixed_se: float
    random: float
    random_se: float
    tau2: float
    q: float
    df: int
    q_pvalue: float
    i2: float
    fixed_weights: np.ndarray
    random_weights: np.ndarray

    def to_dict(self) -> dict:
        return {
            "fixed": self.fixed, "fixed_se": self.fixed_se,
            "random": self.random, "random_se": self.random_se,
            "tau2": self.tau2, "Q": self.q, "df": self.df, "Q_pvalue": self.q_pvalue, "I2": self.i2,
            "fixed_weights": self.fixed_weights.tolist(), "random_weights": self.random_weights.tolist(),
        }


def meta_fixed_random(estimates) -> MetaResult:
    """Pool ``(log_effect, se)`` pairs; tau^2 by DerSimonian-Laird.

    Accepts tuples or objects with ``log_point`` and ``se`` attributes.
    """
    theta, se = [], []
    for e in estimates:
        if hasattr(e, "log_point"):
            theta.append(e.log_point)
            se.append(e.se)
        else:
            t, s = e
            theta.append(t)
            se.append(s)
    theta = np.asarray(theta, float)
    se = np.asarray(se, float)
    if len(theta) < 2:
        raise ValueError("meta-analysis needs at least two estimates")
    if np.any(~(se > 0)):
        raise ValueError("standard errors must be positive")
    w = 1.0 / se**2
    sw = w.sum()
    fixed = float(np.sum(w * theta) / sw)
    q = float(np.sum(w * (theta - fixed) ** 2))
    df = len(theta) - 1
    c = sw - np.sum(w**2) / sw
    tau2 = max(0.0, (q - df) / c) if c > 0 else 0.0
    i2 = max(0.0, (q - df) / q) * 100.0 if q > 0 else 0.0
    rw = 1.0 / (se**2 + tau2)
    random = float(np.sum(rw * theta) / rw.sum())
    return MetaResult(fixed, math.sqrt(1.0 / sw), random, math.sqrt(1.0 / rw.sum()), float(tau2), q, df,
                      float(chi2.sf(q, df)), float(i2), w / sw, rw / rw.sum())
