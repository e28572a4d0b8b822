"""Backwards dynamic posterior exploration over a decreasing spike-variance grid."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import log_expit, log_ndtr

from .lattice import NeighborGraph
from .model import LOG2PI, GroupedData, Hyperparams, mcar_quadratic, wishart_logpdf
from .vi import NumericalError, VariationalState, _Problem, _run

log = logging.getLogger(__name__)


@dataclass
class DpeStep:
    nu0: float
    state: VariationalState
    active: np.ndarray  # (M, P) bool
    log_marginal: float


@dataclass
class DpePath:
    steps: list = field(default_factory=list)

    @property
    def nu0(self) -> np.ndarray:
        return np.array([s.nu0 for s in self.steps])

    @property
    def final(self) -> DpeStep:
        """The step at the smallest spike variance."""
        return self.steps[-1]

    @property
    def log_marginals(self) -> np.ndarray:
        return np.array([s.log_marginal for s in self.steps])


def threshold_inclusion(vs: VariationalState) -> np.ndarray:
    """Local median probability model: include where q(gamma = 1) > 0.5."""
    return vs.q_gamma > 0.5


def approx_log_marginal_nu0(vs: VariationalState, data, hp: Hyperparams, graph: NeighborGraph,
                            active=None) -> float:
    """Jensen lower bound on log pi_{nu0=0}(gamma_hat | Y, theta, Sigma^-1).

    Excluded coefficients are dropped from the design; included ones keep a
    N(0, nu1) slab prior.  q(beta_gamma) is the marginal of q(beta) on the
    included coordinates, q(z) is optimal given it, and theta, Sigma^-1 are
    plugged in at their variational means.
    """
    gd = data if isinstance(data, GroupedData) else GroupedData(data)
    act = threshold_inclusion(vs) if active is None else np.asarray(active, dtype=bool)
    M, P = act.shape
    U = gd.U
    nu1, s0 = hp.nu1, hp.sigma0_sq

    total = 0.0
    b0 = vs.m_beta0
    v0 = vs.v_beta0
    total += np.sum(-0.5 * np.log(2 * np.pi * s0) - (b0 ** 2 + v0) / (2 * s0)
                    + 0.5 * (1 + LOG2PI + np.log(v0)))
    for pattern in itertools.product((False, True), repeat=P):
        pat = np.array(pattern)
        vox = np.flatnonzero(np.all(act == pat, axis=1))
        if vox.size == 0:
            continue
        inc = np.flatnonzero(pat)
        m = vs.m_beta[np.ix_(vox, inc)]
        S = vs.S_beta[np.ix_(vox, inc, inc)]
        Ui = U[:, inc]
        eta = Ui @ m.T + b0[vox][None, :]
        ell = (gd.K1[:, vox] * log_ndtr(eta) + gd.K0[:, vox] * log_ndtr(-eta)).sum(axis=0)
        XtWX = (Ui * gd.n[:, None]).T @ Ui
        ell -= 0.5 * (np.einsum("pq,mqp->m", XtWX, S) + gd.wsum * v0[vox])
        total += ell.sum()
        if inc.size:
            vb = np.diagonal(S, axis1=1, axis2=2)
            total += np.sum(-0.5 * np.log(2 * np.pi * nu1) - (m ** 2 + vb) / (2 * nu1))
            _, ld = np.linalg.slogdet(S)
            total += np.sum(0.5 * (inc.size * (1 + LOG2PI) + ld))

    th = vs.m_theta
    total += np.sum(np.where(act, log_expit(th), log_expit(-th)))
    EL = vs.E_sigma_inv
    G = graph.n_components()
    _, ldL = np.linalg.slogdet(EL)
    total += mcar_quadratic(th, EL, graph) + 0.5 * (M - G) * (ldL - P * LOG2PI)
    total -= 0.5 * hp.theta_ridge * np.sum(th ** 2)
    total += wishart_logpdf(EL, hp.df(P), hp.scale(P))
    return float(total)


def run_dpe(data, hp: Hyperparams, graph: NeighborGraph, init: VariationalState,
            callback=None) -> DpePath:
    """Anneal through ``hp.nu0_sequence`` (largest first), warm-starting each step.

    The answer is ``path.final`` (smallest spike variance); no re-selection.
    """
    gd = data if isinstance(data, GroupedData) else GroupedData(data)
    path = DpePath()
    state = init
    for k, nu0 in enumerate(hp.nu0_sequence):
        prob = _Problem(gd, hp, graph, nu0=nu0)
        try:
            state = _run(prob, state)
        except NumericalError as e:
            raise NumericalError(f"DPE step {k} (nu0={nu0:.3g}): {e}") from e
        act = threshold_inclusion(state)
        lm = approx_log_marginal_nu0(state, gd, hp, graph, act)
        path.steps.append(DpeStep(float(nu0), state, act, lm))
        log.info("DPE step %d log(nu0)=%.2f sweeps=%d %s active=%s logmarg=%.3f",
                 k, np.log(nu0), state.n_sweeps, state.status, act.sum(axis=0), lm)
        if callback is not None:
            callback(k, path.steps[-1])
    return path


def export_regularization_path(path: DpePath, names=None) -> pd.DataFrame:
    """Long table (nu0, voxel, covariate, coefficient mean, active flag), one row per K*M*P."""
    if not path.steps:
        raise ValueError("empty DPE path")
    M, P = path.steps[0].active.shape
    names = list(names) if names is not None else [f"x{p + 1}" for p in range(P)]
    frames = []
    for st in path.steps:
        frames.append(pd.DataFrame({
            "nu0": np.repeat(st.nu0, M * P),
            "log_nu0": np.repeat(np.log(st.nu0), M * P),
            "voxel": np.repeat(np.arange(M), P),
            "covariate": np.tile(names, M),
            "coef_mean": st.state.m_beta.reshape(-1),
            "active": st.active.reshape(-1),
        }))
    return pd.concat(frames, ignore_index=True)


def export_marginal_trace(path: DpePath) -> pd.DataFrame:
    return pd.DataFrame({
        "nu0": path.nu0,
        "log_nu0": np.log(path.nu0),
        "log_marginal": path.log_marginals,
        "n_active": [int(s.active.sum()) for s in path.steps],
        "sweeps": [s.state.n_sweeps for s in path.steps],
        "status": [s.state.status for s in path.steps],
    })
