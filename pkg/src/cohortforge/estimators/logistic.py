"""Logistic regression by iteratively reweighted least squares."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

MAX_ITER = 50
COEF_LIMIT = 30.0
SCORE_TOL = 1e-8
LOGLIK_RTOL = 1e-10


class RankDeficientError(ValueError):
    pass


@dataclass
class FitResult:
    coef: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    names: tuple[str, ...] = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def index(self, name: str) -> int:
        return self.names.index(name)


def _loglik(eta, y, w):
    return np.sum(w * (y * log_expit(eta) + (1.0 - y) * log_expit(-eta)), axis=-1)


def irls_batch(X: np.ndarray, y: np.ndarray, W: np.ndarray, max_iter: int = MAX_ITER):
    """Fit one logistic model per row of ``W`` on a shared design.

    ``X`` is (K, p), ``y`` is (K,) and ``W`` is (B, K) non-negative weights,
    typically bootstrap counts over collapsed covariate cells.  Returns
    ``(coef, converged, iterations, loglik)`` with leading dimension B.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    W = np.atleast_2d(np.asarray(W, float))
    B, p = W.shape[0], X.shape[1]
    beta = np.zeros((B, p))
    active = np.ones(B, bool)
    converged = np.zeros(B, bool)
    iterations = np.zeros(B, int)
    ll_old = _loglik(beta @ X.T, y, W)

    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        b = beta[idx]
        w = W[idx]
        mu = expit(b @ X.T)
        score = (w * (y - mu)) @ X
        done = np.max(np.abs(score), axis=1) < SCORE_TOL
        converged[idx[done]] = True
        active[idx[done]] = False
        if it == max_iter:
            break
        go = ~done
        idx, b, w, mu, score = idx[go], b[go], w[go], mu[go], score[go]
        if idx.size == 0:
            break
        info = np.einsum("bk,ki,kj->bij", w * mu * (1.0 - mu), X, X)
        try:
            step = np.linalg.solve(info, score[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.empty_like(score)
            for j in range(idx.size):
                try:
                    step[j] = np.linalg.solve(info[j], score[j])
                except np.linalg.LinAlgError:
                    step[j] = np.nan
        bad = ~np.all(np.isfinite(step), axis=1)
        active[idx[bad]] = False
        keep = ~bad
        idx, b, step, w = idx[keep], b[keep], step[keep], w[keep]
        new = b + step
        beta[idx] = new
        iterations[idx] = it + 1
        # separation guard
        diverged = np.max(np.abs(new), axis=1) > COEF_LIMIT
        active[idx[diverged]] = False
        ll_new = _loglik(new @ X.T, y, w)
        flat = np.abs(ll_new - ll_old[idx]) <= LOGLIK_RTOL * (np.abs(ll_old[idx]) + 1e-300)
        flat &= ~diverged
        converged[idx[flat]] = True
        active[idx[flat]] = False
        ll_old[idx] = ll_new
    loglik = _loglik(beta @ X.T, y, W)
    return beta, converged, iterations, loglik


def fit_logistic(X, y, weights=None, names=None) -> FitResult:
    """Maximum-likelihood logistic fit; ``weights`` act as frequency/IPW weights."""
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("design and response lengths differ")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("response must be 0/1")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    support = X[w > 0]
    if support.shape[0] < X.shape[1] or np.linalg.matrix_rank(support) < X.shape[1]:
        raise RankDeficientError(f"design is rank deficient ({X.shape[1]} columns)")
    coef, conv, iters, ll = irls_batch(X, y, w[None, :])
    coef = coef[0]
    mu = expit(X @ coef)
    info = (X * (w * mu * (1 - mu))[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((X.shape[1], X.shape[1]), np.nan)
    cov = (cov + cov.T) / 2.0
    return FitResult(coef, cov, bool(conv[0]), int(iters[0]), float(ll[0]),
                     tuple(names) if names is not None else ())
