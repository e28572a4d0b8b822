"""Evaluation measures: confusion rates, bias/variance/MSE and posterior distances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd


@dataclass
class Rates:
    TPR: Optional[float]
    TDR: Optional[float]
    FPR: Optional[float]
    FDR: Optional[float]
    counts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"TPR": self.TPR, "TDR": self.TDR, "FPR": self.FPR, "FDR": self.FDR, **self.counts}


def _ratio(a: int, b: int) -> Optional[float]:
    return None if b == 0 else a / b


def confusion_rates(est_active, truth) -> Rates:
    """TPR, TDR, FPR, FDR; a ratio with an empty denominator is ``None``."""
    est = np.asarray(est_active, dtype=bool).reshape(-1)
    tru = np.asarray(truth, dtype=bool).reshape(-1)
    if est.shape != tru.shape:
        raise ValueError("estimate and truth differ in length")
    tp = int(np.sum(est & tru))
    fp = int(np.sum(est & ~tru))
    fn = int(np.sum(~est & tru))
    tn = int(np.sum(~est & ~tru))
    return Rates(TPR=_ratio(tp, tp + fn), TDR=_ratio(tp, tp + fp), FPR=_ratio(fp, fp + tn),
                 FDR=_ratio(fp, tp + fp), counts={"TP": tp, "FP": fp, "FN": fn, "TN": tn})


@dataclass
class BiasVarMse:
    bias: np.ndarray  # per voxel
    variance: np.ndarray
    mse: np.ndarray
    aggregate: dict  # voxel set name -> (bias, variance, mse)


def _voxel_sets(shape, active):
    sets = {"all": np.ones(shape, dtype=bool)}
    if active is not None:
        a = np.broadcast_to(np.asarray(active, dtype=bool), shape)
        sets["active"] = a
        sets["inactive"] = ~a
    return sets


def bias_var_mse(estimates, truth, active=None) -> BiasVarMse:
    """Frequentist trio over R replicate estimates (R, ...) of a fixed truth (...).

    Per voxel: bias = mean(est) - truth, variance with denominator R and
    mse = mean (est - truth)^2, so mse = bias^2 + variance.  Aggregates
    average the per-voxel values over all voxels and, if ``active`` is given,
    over the truth-active and truth-inactive sets separately.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.ndim < 1 or est.shape[0] < 2:
        raise ValueError("need at least two replicates")
    if est.shape[1:] != tru.shape:
        raise ValueError("estimate and truth shapes differ")
    bias = est.mean(axis=0) - tru
    var = est.var(axis=0)
    mse = ((est - tru) ** 2).mean(axis=0)
    agg = {}
    for name, sel in _voxel_sets(tru.shape, active).items():
        if sel.any():
            agg[name] = (float(bias[sel].mean()), float(var[sel].mean()), float(mse[sel].mean()))
    return BiasVarMse(bias=bias, variance=var, mse=mse, aggregate=agg)


def reported_trio(estimates, variances, truth, active=None) -> dict:
    """Summary trio built from each method's own uncertainty.

    bias = voxel- and replicate-averaged (estimate - truth), variance = the
    averaged reported variance (posterior variance or squared standard
    error) and mse = bias^2 + variance.  ``estimates``/``variances`` are
    (R, ...) or (...) for a single dataset.
    """
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != var.shape:
        raise ValueError("estimates and variances differ in shape")
    if est.shape == tru.shape:
        est, var = est[None], var[None]
    if est.shape[1:] != tru.shape:
        raise ValueError("estimate and truth shapes differ")
    out = {}
    for name, sel in _voxel_sets(tru.shape, active).items():
        if not sel.any():
            continue
        b = float(np.mean((est - tru)[:, sel]))
        v = float(np.nanmean(var[:, sel]))
        out[name] = (b, v, b * b + v)
    return out


def _fit(x):
    """Mean vector and covariance (denominator S) of samples (S, D)."""
    mu = x.mean(axis=0)
    xc = x - mu
    return mu, xc.T @ xc / x.shape[0]


def gaussian_kl(mu_a, cov_a, mu_b, cov_b) -> float:
    """KL(N_a || N_b); NaN if either covariance is singular."""
    D = mu_a.shape[0]
    try:
        La = np.linalg.cholesky(cov_a)
        Lb = np.linalg.cholesky(cov_b)
    except np.linalg.LinAlgError:
        return float("nan")
    Lbinv = np.linalg.inv(Lb)
    M = Lbinv @ La
    d = Lbinv @ (mu_b - mu_a)
    ld = 2.0 * (np.sum(np.log(np.diag(Lb))) - np.sum(np.log(np.diag(La))))
    return float(0.5 * (np.sum(M * M) + d @ d - D + ld))


def wasserstein1(a, b) -> float:
    """Mean |difference| of matched order statistics of two 1-d samples.

    The larger sample's empirical quantile function is linearly interpolated
    at the plotting positions of the smaller one.
    """
    a = np.sort(np.asarray(a, dtype=float).reshape(-1))
    b = np.sort(np.asarray(b, dtype=float).reshape(-1))
    if a.size > b.size:
        a, b = b, a
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    pa = (np.arange(a.size) + 0.5) / a.size
    pb = (np.arange(b.size) + 0.5) / b.size
    return float(np.mean(np.abs(a - np.interp(pa, pb, b))))


@dataclass
class Distance:
    kl: np.ndarray  # (M,), NaN where a Gaussian fit is degenerate
    w1: np.ndarray  # (M,)

    @property
    def kl_defined(self) -> np.ndarray:
        return np.isfinite(self.kl)


def posterior_distance(samples_a, samples_b) -> Distance:
    """Per-voxel KL(a || b) of moment-matched Gaussians and W1 between samples.

    Inputs are (S, M) or (S, M, P).  With P > 1 the Gaussian fits are
    P-variate and W1 is summed over covariates (coordinate-wise quantile
    coupling under the L1 ground metric).
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim == 2:
        a = a[:, :, None]
    if b.ndim == 2:
        b = b[:, :, None]
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("sample sets describe different voxels")
    if a.shape[0] < 30 or b.shape[0] < 30:
        raise ValueError("need at least 30 samples per set")
    M = a.shape[1]
    kl = np.empty(M)
    w1 = np.empty(M)
    for j in range(M):
        ma, ca = _fit(a[:, j])
        mb, cb = _fit(b[:, j])
        if a is b or (np.array_equal(ma, mb) and np.array_equal(ca, cb)):
            kl[j] = 0.0 if np.all(np.diag(ca) > 0) else np.nan
        else:
            kl[j] = gaussian_kl(ma, ca, mb, cb)
        w1[j] = sum(wasserstein1(a[:, j, p], b[:, j, p]) for p in range(a.shape[2]))
    return Distance(kl=kl, w1=w1)


def gaussian_samples(mean, cov, S: int, rng: np.random.Generator) -> np.ndarray:
    """(S, M, P) draws from independent per-voxel Gaussians (e.g. a VI posterior)."""
    mean = np.asarray(mean, dtype=float)
    L = np.linalg.cholesky(cov)
    eps = rng.standard_normal((S,) + mean.shape)
    return mean[None] + np.einsum("mpq,smq->smp", L, eps)


def rates_table(rows: dict) -> pd.DataFrame:
    """``{label: Rates}`` to a table with one row per label."""
    return pd.DataFrame([{"label": k, **v.as_dict()} for k, v in rows.items()])
