"""Mean-field coordinate ascent VI for BLESS.

Variational family::

    q(z_i(s_j))   truncated N(eta~, 1) on the side given by y     (never stored)
    q(beta(s_j))  N(m_beta, S_beta)           q(beta0(s_j))  N(m_beta0, v_beta0)
    q(gamma_p)    Bernoulli(q_gamma)          q(theta(s_j))  N(m_theta, S_theta)
    q(Sigma^-1)   Wishart(df, scale)

The logistic factors in p(gamma | theta) are replaced by the Jaakkola-Jordan
quadratic bound with local parameters ``xi``.  Observation weights multiply
each subject's entire (augmented) likelihood contribution and ``shifts`` move
the centre of the spike-and-slab prior; unit weights and zero shifts give
plain BLESS-VI.

``compute_elbo`` evaluates the bound with q(z) at its optimum given the other
factors, so one pass over the data serves both the z-update and the bound.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.special import digamma, entr, expit, log_expit, log_ndtr, logit, multigammaln

from .lattice import NeighborGraph
from .model import LOG2PI, Dataset, GroupedData, Hyperparams

log = logging.getLogger(__name__)

SHIFT_MODES = ("both", "spike")


class NumericalError(RuntimeError):
    pass


@dataclass
class VariationalState:
    m_beta: np.ndarray  # (M, P)
    S_beta: np.ndarray  # (M, P, P)
    m_beta0: np.ndarray  # (M,)
    v_beta0: np.ndarray  # (M,)
    q_gamma: np.ndarray  # (M, P)
    m_theta: np.ndarray  # (M, P)
    S_theta: np.ndarray  # (M, P, P)
    xi: np.ndarray  # (M, P)
    wishart_df: float
    wishart_scale: np.ndarray  # (P, P)
    elbo_trace: list = field(default_factory=list)
    status: str = "init"
    n_sweeps: int = 0

    @property
    def M(self) -> int:
        return self.m_beta.shape[0]

    @property
    def P(self) -> int:
        return self.m_beta.shape[1]

    @property
    def E_sigma_inv(self) -> np.ndarray:
        return self.wishart_df * self.wishart_scale

    @property
    def sd_beta(self) -> np.ndarray:
        return np.sqrt(np.diagonal(self.S_beta, axis1=1, axis2=2))

    def copy(self) -> "VariationalState":
        return copy.deepcopy(self)


def jj_lambda(xi):
    """tanh(xi/2) / (4 xi) with its limit 1/8 at xi = 0."""
    xi = np.abs(np.asarray(xi, dtype=float))
    small = xi < 1e-6
    safe = np.where(small, 1.0, xi)
    return np.where(small, 0.125 - xi ** 2 / 96.0, np.tanh(safe / 2) / (4 * safe))


def truncnorm_mean(eta, y):
    """E[z] for z ~ N(eta, 1) truncated to z > 0 (y = 1) or z <= 0 (y = 0)."""
    eta = np.asarray(eta, dtype=float)
    sgn = np.where(np.asarray(y) > 0, 1.0, -1.0)
    t = sgn * eta
    r = np.exp(-0.5 * t * t - 0.5 * LOG2PI - log_ndtr(t))
    return eta + sgn * r


class _Problem:
    """Everything a sweep needs that does not change across sweeps."""

    def __init__(self, data, hp: Hyperparams, graph: NeighborGraph, weights=None,
                 shifts=None, nu0: Optional[float] = None, shift_mode: str = "both",
                 shift_iters: int = 1):
        if isinstance(data, GroupedData):
            gd = data
            if weights is not None and not np.array_equal(np.asarray(weights), gd.w):
                raise ValueError("weights disagree with the supplied grouped data")
        else:
            if weights is not None:
                weights = np.asarray(weights, dtype=float)
                if np.any(weights <= 0):
                    raise ValueError("weights must be positive")
                if abs(weights.sum() - data.N) > 1e-8 * data.N:
                    raise ValueError("weights must sum to N")
            gd = GroupedData(data, weights)
        if gd.K1.shape[1] != graph.M:
            raise ValueError(f"data has {gd.K1.shape[1]} voxels, graph has {graph.M}")
        if shift_mode not in SHIFT_MODES:
            raise ValueError(f"shift_mode must be one of {SHIFT_MODES}")
        self.gd = gd
        self.hp = hp
        self.graph = graph
        self.M = graph.M
        self.P = gd.U.shape[1]
        self.nu0 = float(hp.nu0 if nu0 is None else nu0)
        self.nu1 = float(hp.nu1)
        if not 0 < self.nu0 <= self.nu1:
            raise ValueError("need 0 < nu0 <= nu1")
        self.shifts = (np.zeros((self.M, self.P)) if shifts is None
                       else np.asarray(shifts, dtype=float).reshape(self.M, self.P))
        self.shift_mode = shift_mode
        self.deg = graph.degree.astype(float)
        self.G, self.comp = sparse.csgraph.connected_components(graph.adjacency(), directed=False)
        self.shift_iters = shift_iters
        A = graph.adjacency()
        self.colors = []
        for c in (0, 1):
            idx = np.flatnonzero(graph.color == c)
            self.colors.append((idx, A[idx]))
        self.df0 = hp.df(self.P)
        self.W0 = hp.scale(self.P)
        self.W0inv = np.linalg.inv(self.W0)
        self.df_post = self.df0 + self.M - self.G

    @property
    def slab_shift(self):
        return self.shifts if self.shift_mode == "both" else 0.0


def _zpass(prob: _Problem, vs: VariationalState, anchor: Optional[VariationalState] = None):
    """Moments of the optimal q(z) and the likelihood part of the bound.

    q(z) is centred on the predictor of ``anchor`` (defaults to ``vs``); the
    bound is evaluated at the q(beta), q(beta0) of ``vs``.  Returns
    ``(r, s, ell)`` with r = X'W E[z] (P, M), s = 1'W E[z] (M,) and the
    per-voxel likelihood term ell (M,).
    """
    gd = prob.gd
    U = gd.U
    eta = U @ vs.m_beta.T + vs.m_beta0[None, :]
    a = eta if anchor is None else U @ anchor.m_beta.T + anchor.m_beta0[None, :]
    lz1 = log_ndtr(a)
    lz0 = log_ndtr(-a)
    lphi = -0.5 * a * a - 0.5 * LOG2PI
    R1 = np.exp(lphi - lz1)
    R0 = np.exp(lphi - lz0)
    K1, K0 = gd.K1, gd.K0
    T = gd.n[:, None] * a + K1 * R1 - K0 * R0  # sum_i w_i E[z_i] per group
    r = U.T @ T
    s = T.sum(axis=0)
    ell = (K1 * lz1 + K0 * lz0).sum(axis=0)
    if anchor is not None:
        d = a - eta
        ell -= (d * (K1 * R1 - K0 * R0)).sum(axis=0) + 0.5 * (gd.n[:, None] * d * d).sum(axis=0)
    # predictor variance: x' S x + v0, weighted
    ell -= 0.5 * (np.einsum("pq,mqp->m", gd.XtWX, vs.S_beta) + gd.wsum * vs.v_beta0)
    return r, s, ell


def _batched_inv(prec: np.ndarray, what: str, offset=None) -> np.ndarray:
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        for j in range(prec.shape[0]):
            try:
                np.linalg.cholesky(prec[j])
            except np.linalg.LinAlgError:
                vox = j if offset is None else int(offset[j])
                raise NumericalError(f"{what} precision not positive definite at voxel {vox}") from None
        raise
    Linv = np.linalg.inv(L)
    return np.swapaxes(Linv, 1, 2) @ Linv


def _update(prob: _Problem, vs: VariationalState, r, s) -> VariationalState:
    gd = prob.gd
    P = prob.P
    nu0, nu1 = prob.nu0, prob.nu1
    mu = prob.shifts
    out = vs.copy()
    eyeP = np.eye(P)

    # (b) q(beta)
    q = vs.q_gamma
    d = q / nu1 + (1 - q) / nu0
    prec = gd.XtWX[None] + d[:, :, None] * eyeP
    if prob.shift_mode == "both":
        lin_prior = d * mu
    else:
        lin_prior = (1 - q) / nu0 * mu
    rhs = r.T - vs.m_beta0[:, None] * gd.Xtw[None, :] + lin_prior
    S = _batched_inv(prec, "beta")
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    m = np.einsum("mpq,mq->mp", S, rhs)
    out.S_beta, out.m_beta = S, m

    # (c) q(beta0)
    p0 = gd.wsum + 1.0 / prob.hp.sigma0_sq
    out.m_beta0 = (s - m @ gd.Xtw) / p0
    out.v_beta0 = np.full(prob.M, 1.0 / p0)

    # (d) q(gamma)
    vb = np.diagonal(S, axis1=1, axis2=2)
    e_spike = (m - mu) ** 2 + vb
    e_slab = (m - prob.slab_shift) ** 2 + vb
    lg = vs.m_theta + 0.5 * np.log(nu0 / nu1) + e_spike / (2 * nu0) - e_slab / (2 * nu1)
    out.q_gamma = expit(lg)

    # (e) q(theta), checkerboard order; xi refreshed per colour
    EL = vs.E_sigma_inv
    m_t = vs.m_theta.copy()
    S_t = vs.S_theta.copy()
    xi = vs.xi.copy()
    for idx, A_c in prob.colors:
        if idx.size == 0:
            continue
        nb = A_c @ m_t
        lam = jj_lambda(xi[idx])
        Lam = prob.deg[idx, None, None] * EL[None] + (2 * lam[:, :, None] + prob.hp.theta_ridge) * eyeP
        rhs = nb @ EL + (out.q_gamma[idx] - 0.5)
        St = _batched_inv(Lam, "theta", offset=idx)
        St = 0.5 * (St + np.swapaxes(St, 1, 2))
        m_t[idx] = np.einsum("mpq,mq->mp", St, rhs)
        S_t[idx] = St
        xi[idx] = np.sqrt(m_t[idx] ** 2 + np.diagonal(St, axis1=1, axis2=2))
    # exact move along the constant direction of each connected component,
    # which the pairwise-difference prior leaves flat
    for _ in range(prob.shift_iters):
        lam = jj_lambda(xi)
        k = prob.hp.theta_ridge
        num = _component_sum(prob, (out.q_gamma - 0.5) - (2 * lam + k) * m_t)
        den = _component_sum(prob, 2 * lam + k)
        m_t = m_t + (num / den)[prob.comp]
        xi = np.sqrt(m_t ** 2 + np.diagonal(S_t, axis1=1, axis2=2))
    out.m_theta, out.S_theta, out.xi = m_t, S_t, xi

    # (f) q(Sigma^-1)
    out.wishart_df = prob.df_post
    out.wishart_scale = np.linalg.inv(prob.W0inv + _pair_scatter(prob, m_t, S_t))
    out.wishart_scale = 0.5 * (out.wishart_scale + out.wishart_scale.T)
    out.n_sweeps = vs.n_sweeps + 1
    return out


def _component_sum(prob: _Problem, a: np.ndarray) -> np.ndarray:
    out = np.zeros((prob.G, a.shape[1]))
    np.add.at(out, prob.comp, a)
    return out


def _pair_scatter(prob: _Problem, m_t, S_t) -> np.ndarray:
    """sum over unordered pairs of E[(theta_j - theta_j')(theta_j - theta_j')']."""
    e = prob.graph.edges
    D = m_t[e[:, 0]] - m_t[e[:, 1]] if e.size else np.zeros((0, prob.P))
    return D.T @ D + np.einsum("m,mpq->pq", prob.deg, S_t)


def _elbo_rest(prob: _Problem, vs: VariationalState, ell) -> float:
    """Every bound term except the likelihood term already in ``ell``."""
    P, M = prob.P, prob.M
    nu0, nu1 = prob.nu0, prob.nu1
    mu = prob.shifts
    q = vs.q_gamma
    vb = np.diagonal(vs.S_beta, axis1=1, axis2=2)
    e_spike = (vs.m_beta - mu) ** 2 + vb
    e_slab = (vs.m_beta - prob.slab_shift) ** 2 + vb
    lp_beta = np.sum(q * (-0.5 * np.log(2 * np.pi * nu1) - e_slab / (2 * nu1))
                     + (1 - q) * (-0.5 * np.log(2 * np.pi * nu0) - e_spike / (2 * nu0)))
    _, ldS = np.linalg.slogdet(vs.S_beta)
    h_beta = 0.5 * np.sum(P * (1 + LOG2PI) + ldS)

    s0 = prob.hp.sigma0_sq
    lp_b0 = np.sum(-0.5 * np.log(2 * np.pi * s0) - (vs.m_beta0 ** 2 + vs.v_beta0) / (2 * s0))
    h_b0 = 0.5 * np.sum(1 + LOG2PI + np.log(vs.v_beta0))

    vt = np.diagonal(vs.S_theta, axis1=1, axis2=2)
    et2 = vs.m_theta ** 2 + vt
    xi = vs.xi
    lp_gamma = np.sum((q - 0.5) * vs.m_theta + log_expit(xi) - 0.5 * xi
                      - jj_lambda(xi) * (et2 - xi ** 2))
    h_gamma = np.sum(entr(q) + entr(1 - q))

    df, V = vs.wishart_df, vs.wishart_scale
    _, ldV = np.linalg.slogdet(V)
    e_ld = np.sum(digamma(0.5 * (df - np.arange(P)))) + P * np.log(2.0) + ldV
    EL = df * V
    Spair = _pair_scatter(prob, vs.m_theta, vs.S_theta)
    rank = M - prob.G
    lp_theta = -0.5 * np.sum(EL * Spair) + 0.5 * rank * (e_ld - P * LOG2PI)
    lp_theta -= 0.5 * prob.hp.theta_ridge * np.sum(et2)
    _, ldt = np.linalg.slogdet(vs.S_theta)
    h_theta = 0.5 * np.sum(P * (1 + LOG2PI) + ldt)

    nu, W0 = prob.df0, prob.W0
    _, ldW0 = np.linalg.slogdet(W0)
    lp_sig = (0.5 * (nu - P - 1) * e_ld - 0.5 * np.sum(prob.W0inv * EL)
              - 0.5 * nu * P * np.log(2.0) - 0.5 * nu * ldW0 - multigammaln(0.5 * nu, P))
    h_sig = (-0.5 * (df - P - 1) * e_ld + 0.5 * df * P + 0.5 * df * P * np.log(2.0)
             + 0.5 * df * ldV + multigammaln(0.5 * df, P))
    return float(lp_beta + h_beta + lp_b0 + h_b0 + lp_gamma + h_gamma
                 + lp_theta + h_theta + lp_sig + h_sig)


def cavi_sweep(vs: VariationalState, data, hp: Hyperparams, graph: NeighborGraph,
               weights=None, shifts=None, *, nu0: Optional[float] = None,
               shift_mode: str = "both") -> VariationalState:
    """One full cycle z -> beta -> beta0 -> gamma -> theta/xi -> Sigma^-1."""
    prob = _Problem(data, hp, graph, weights, shifts, nu0, shift_mode)
    r, s, _ = _zpass(prob, vs)
    return _update(prob, vs, r, s)


def compute_elbo(vs: VariationalState, data, hp: Hyperparams, graph: NeighborGraph,
                 weights=None, shifts=None, *, nu0: Optional[float] = None,
                 shift_mode: str = "both", z_anchor: Optional[VariationalState] = None) -> float:
    """Evidence lower bound at ``vs``.

    q(z) is the optimal truncated normal given ``vs`` unless ``z_anchor`` is
    given, in which case q(z) is the one implied by the anchor state (used to
    hold q(z) fixed while perturbing other factors).
    """
    prob = _Problem(data, hp, graph, weights, shifts, nu0, shift_mode)
    _, _, ell = _zpass(prob, vs, anchor=z_anchor)
    return float(ell.sum()) + _elbo_rest(prob, vs, ell)


def _run(prob: _Problem, init: VariationalState, max_sweeps=None, epsilon=None) -> VariationalState:
    max_sweeps = prob.hp.max_sweeps if max_sweeps is None else max_sweeps
    epsilon = prob.hp.epsilon if epsilon is None else epsilon
    vs = init.copy()
    vs.elbo_trace = []
    vs.n_sweeps = 0
    r, s, ell = _zpass(prob, vs)
    elbo = float(ell.sum()) + _elbo_rest(prob, vs, ell)
    vs.elbo_trace.append(elbo)
    vs.status = "max_sweeps_reached"
    for _ in range(max_sweeps):
        new = _update(prob, vs, r, s)
        r, s, ell = _zpass(prob, new)
        val = float(ell.sum()) + _elbo_rest(prob, new, ell)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite ELBO after sweep {new.n_sweeps}")
        new.elbo_trace = vs.elbo_trace + [val]
        vs = new
        if abs(val - elbo) < epsilon:
            vs.status = "converged"
            break
        elbo = val
    return vs


def run_cavi(init: VariationalState, data, hp: Hyperparams, graph: NeighborGraph,
             weights=None, shifts=None, *, nu0: Optional[float] = None,
             shift_mode: str = "both", epsilon: Optional[float] = None) -> VariationalState:
    """Iterate sweeps until |delta ELBO| < epsilon or ``hp.max_sweeps``.

    ``elbo_trace[0]`` is the bound at ``init``; the returned state carries
    ``status`` ``"converged"`` or ``"max_sweeps_reached"``.
    """
    prob = _Problem(data, hp, graph, weights, shifts, nu0, shift_mode)
    return _run(prob, init, epsilon=epsilon)


def active_fraction(pvalues: np.ndarray, usable: np.ndarray, level: float = 0.05) -> np.ndarray:
    """Per-covariate fraction of usable voxels with p < level."""
    pv = np.asarray(pvalues)[np.asarray(usable, dtype=bool)]
    if pv.shape[0] == 0:
        return np.full(np.asarray(pvalues).shape[1], 0.0)
    return (pv < level).mean(axis=0)


def default_init(data, hp: Hyperparams, firth_fit, graph: NeighborGraph) -> VariationalState:
    """Starting point built from voxelwise Firth fits.

    ``firth_fit`` is a :class:`bless.firth.FirthFit` or ``None`` (fallback:
    zero coefficients and a neutral theta).
    """
    gd = data if isinstance(data, GroupedData) else GroupedData(data)
    M, P = graph.M, gd.U.shape[1]
    if firth_fit is not None:
        coef = np.asarray(firth_fit.coef)
        m_beta0 = np.nan_to_num(coef[:, 0]).copy()
        m_beta = np.nan_to_num(coef[:, 1:]).copy()
        frac = active_fraction(firth_fit.pvalues[:, 1:], ~firth_fit.degenerate)
    else:
        m_beta0 = np.zeros(M)
        m_beta = np.zeros((M, P))
        frac = np.full(P, 0.5)
    with np.errstate(divide="ignore"):
        th = np.clip(logit(frac), -8.0, 8.0)
    G = graph.n_components()
    df = hp.df(P) + M - G
    return VariationalState(
        m_beta=m_beta,
        S_beta=np.broadcast_to(hp.nu1 * np.eye(P), (M, P, P)).copy(),
        m_beta0=m_beta0,
        v_beta0=np.full(M, 1.0 / (gd.wsum + 1.0 / hp.sigma0_sq)),
        q_gamma=np.full((M, P), 0.5),
        m_theta=np.broadcast_to(th, (M, P)).copy(),
        S_theta=np.broadcast_to(np.eye(P), (M, P, P)).copy(),
        xi=np.ones((M, P)),
        wishart_df=float(df),
        wishart_scale=np.eye(P) / df,
    )
