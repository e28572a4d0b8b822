"""Mass-univariate bias-reduced (Jeffreys-penalised) probit regression.

Each voxel is fitted independently by modified Fisher scoring on the grouped
binomial form of the data, maximising

    l(b) + 1/2 log det I(b),    I(b) = X' diag(n w(eta)) X,
    w(eta) = phi(eta)^2 / (Phi(eta) (1 - Phi(eta)))

with step-halving so the penalised log-likelihood never decreases.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .model import LOG2PI, Dataset, GroupedData

log = logging.getLogger(__name__)

RIDGE = 1e-8


@dataclass
class FirthFit:
    coef: np.ndarray  # (M, P + 1), intercept first
    se: np.ndarray
    pvalues: np.ndarray
    converged: np.ndarray  # (M,)
    degenerate: np.ndarray  # (M,)

    @property
    def tstat(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se


def _mills(t):
    """phi(t) / Phi(t), stable in both tails."""
    return np.exp(-0.5 * t * t - 0.5 * LOG2PI - log_ndtr(t))


def _pieces(X, n, k, beta):
    eta = X @ beta
    l1, l0 = log_ndtr(eta), log_ndtr(-eta)
    ll = float(np.sum(k * l1 + (n - k) * l0))
    lw = -eta * eta - LOG2PI - l1 - l0
    W = n * np.exp(lw)
    info = (X * W[:, None]).T @ X
    return eta, ll, W, info


def _penalized(info, ll):
    sign, ld = np.linalg.slogdet(info)
    if sign <= 0:
        sign, ld = np.linalg.slogdet(info + RIDGE * np.eye(info.shape[0]))
        if sign <= 0:
            return -np.inf
    return ll + 0.5 * ld


def fit_firth_probit(y=None, X=None, *, counts=None, max_iter: int = 100, tol: float = 1e-8,
                     return_trace: bool = False):
    """Bias-reduced probit fit.

    Pass either subject-level ``y`` (N,) and design ``X`` (N, P+1) including
    the intercept column, or ``counts=(n, k)`` with ``X`` holding one row per
    covariate pattern.  Returns ``(coef, se, pvalues, converged)`` and, if
    ``return_trace``, the penalised log-likelihood per accepted iterate.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if counts is None:
        y = np.asarray(y, dtype=float)
        n, k = np.ones_like(y), y
    else:
        n, k = (np.asarray(c, dtype=float) for c in counts)
    p = X.shape[1]
    beta = np.zeros(p)
    eta, ll, W, info = _pieces(X, n, k, beta)
    pen = _penalized(info, ll)
    trace = [pen]
    converged = False
    for _ in range(max_iter):
        try:
            Iinv = np.linalg.inv(info + RIDGE * np.eye(p))
        except np.linalg.LinAlgError:
            break
        score = X.T @ (k * _mills(eta) - (n - k) * _mills(-eta))
        h = W * np.einsum("gp,pq,gq->g", X, Iinv, X)
        dlogw = -2 * eta - (_mills(eta) - _mills(-eta))
        step = Iinv @ (score + 0.5 * X.T @ (h * dlogw))
        accepted = False
        for _ in range(40):
            cand = beta + step
            c_eta, c_ll, c_W, c_info = _pieces(X, n, k, cand)
            c_pen = _penalized(c_info, c_ll)
            if c_pen >= pen - 1e-12 * abs(pen):
                accepted = True
                break
            step = step / 2
        if not accepted:
            converged = np.max(np.abs(step)) < 1e-6
            break
        beta, eta, ll, W, info = cand, c_eta, c_ll, c_W, c_info
        pen_old, pen = pen, max(c_pen, pen)
        trace.append(c_pen)
        if np.max(np.abs(step)) < tol or abs(pen - pen_old) < 1e-12:
            converged = True
            break
    try:
        cov = np.linalg.inv(info)
        se = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        se = np.full(p, np.nan)
        converged = False
    if not np.all(np.isfinite(se)) or not np.all(np.isfinite(beta)):
        converged = False
    with np.errstate(divide="ignore", invalid="ignore"):
        pv = 2 * ndtr(-np.abs(beta / se))
    pv = np.where(np.isfinite(pv), pv, 1.0)
    out = (beta, se, pv, converged)
    return out + (np.array(trace),) if return_trace else out


def _fit_block(args):
    U1, n, K1, cols = args
    P1 = U1.shape[1]
    res = []
    for j in cols:
        k = K1[:, j]
        used = n > 0
        if k.sum() <= 0 or np.all(k >= n - 1e-12):
            b0, se0, _, conv = fit_firth_probit(X=np.ones((1, 1)), counts=([n.sum()], [k.sum()]))
            coef = np.zeros(P1)
            coef[0] = b0[0]
            se = np.full(P1, np.nan)
            se[0] = se0[0]
            pv = np.ones(P1)
            res.append((coef, se, pv, conv, True))
        else:
            coef, se, pv, conv = fit_firth_probit(X=U1[used], counts=(n[used], k[used]))
            res.append((coef, se, pv, conv, False))
    return res


def fit_all_voxels(data: Dataset, workers: int = 1, weights=None) -> FirthFit:
    """Firth fit at every voxel; constant-response voxels are flagged degenerate."""
    gd = GroupedData(data, weights)
    U1 = np.column_stack([np.ones(gd.G), gd.U])
    M = data.M
    chunks = np.array_split(np.arange(M), max(1, workers * 4)) if workers > 1 else [np.arange(M)]
    jobs = [(U1, gd.n, gd.K1, c) for c in chunks]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_fit_block, jobs))
    else:
        parts = [_fit_block(j) for j in jobs]
    flat = [r for part in parts for r in part]
    return FirthFit(
        coef=np.array([r[0] for r in flat]),
        se=np.array([r[1] for r in flat]),
        pvalues=np.array([r[2] for r in flat]),
        converged=np.array([r[3] for r in flat], dtype=bool),
        degenerate=np.array([r[4] for r in flat], dtype=bool),
    )


def bh_fdr_adjust(pvals, level: float = 0.05):
    """Benjamini-Hochberg step-up.  Returns ``(adjusted, rejected)``."""
    p = np.asarray(pvals, dtype=float)
    shape = p.shape
    p = p.reshape(-1)
    p = np.where(np.isnan(p), 1.0, p)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.reshape(shape), np.zeros(shape, dtype=bool)
    order = np.argsort(p, kind="mergesort")
    ranked = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(1.0, np.minimum.accumulate(ranked[::-1])[::-1])
    adj = np.empty(m)
    adj[order] = adj_sorted
    # reject by the step-up rule itself; p * m / k can round past level at the boundary
    below = np.flatnonzero(p[order] <= level * np.arange(1, m + 1) / m)
    rej = np.zeros(m, dtype=bool)
    if below.size:
        rej[order[:below[-1] + 1]] = True
    return adj.reshape(shape), rej.reshape(shape)
