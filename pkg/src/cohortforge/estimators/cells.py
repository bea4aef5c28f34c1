"""Collapsing analysis rows into distinct covariate cells.

With discrete covariates every estimator here depends on the data only
through the count of each distinct row, so fitting on cells with frequency
weights gives the same answer as fitting on rows.  A nonparametric bootstrap
over rows is the same as a multinomial draw over cell counts, and a Bayesian
bootstrap (Dirichlet row weights) aggregates to Gamma(count) cell weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd


@dataclass
class Cells:
    frame: pd.DataFrame
    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def column(self, name) -> np.ndarray:
        return self.frame[name].to_numpy()


def collapse(df: pd.DataFrame, columns, weights: np.ndarray | None = None) -> Cells:
    cols = list(dict.fromkeys(columns))
    df = df[cols]
    ext = [c for c in cols if isinstance(df[c].dtype, pd.api.extensions.ExtensionDtype)
           and pd.api.types.is_numeric_dtype(df[c].dtype)]
    if ext:
        df = df.astype({c: float for c in ext})
    if weights is None:
        grouped = df.groupby(cols, sort=True, dropna=False, observed=True).size()
    else:
        grouped = (df.assign(_w=np.asarray(weights, float))
                   .groupby(cols, sort=True, dropna=False, observed=True)["_w"].sum())
    frame = grouped.index.to_frame(index=False)
    return Cells(frame, grouped.to_numpy().astype(float))


def bootstrap_counts(cells: Cells, n_boot: int, rng: np.random.Generator) -> np.ndarray:
    """(n_boot, K) resampled cell counts, equivalent to resampling rows with replacement."""
    n = int(round(cells.counts.sum()))
    return rng.multinomial(n, cells.counts / cells.counts.sum(), size=n_boot).astype(float)


def bayesian_bootstrap_weights(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Cell totals of Dirichlet(1, ..., 1) row weights, scaled to sum to the row count."""
    g = rng.gamma(np.maximum(counts, 1e-300), 1.0)
    g[counts <= 0] = 0.0
    return g * counts.sum() / g.sum()


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> np.ndarray:
    """Row-wise lower weighted quantile of ``values`` (B, K) under ``weights`` (B, K)."""
    values = np.atleast_2d(values)
    weights = np.atleast_2d(weights)
    order = np.argsort(values, axis=1, kind="stable")
    v = np.take_along_axis(values, order, axis=1)
    w = np.take_along_axis(np.broadcast_to(weights, values.shape), order, axis=1)
    cum = np.cumsum(w, axis=1) / np.sum(w, axis=1, keepdims=True)
    pos = np.argmax(cum >= q - 1e-12, axis=1)
    return v[np.arange(v.shape[0]), pos]
