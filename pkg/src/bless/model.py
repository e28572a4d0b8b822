"""Data containers, hyperparameters and the exact BLESS log joint density.

Model, per voxel j and subject i::

    y_i(s_j) = 1[z_i(s_j) > 0],   z_i(s_j) ~ N(x_i' beta(s_j) + beta0(s_j), 1)
    beta_p(s_j) | gamma ~ N(0, nu1 gamma + nu0 (1 - gamma))
    gamma_p(s_j) | theta ~ Bernoulli(sigmoid(theta_p(s_j)))
    theta | Sigma^-1 ~ pairwise-difference MCAR on the face graph
    Sigma^-1 ~ Wishart(df, scale)
    beta0(s_j) ~ N(0, sigma0_sq)
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import log_ndtr, log_expit, multigammaln

from .lattice import NeighborGraph

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


def default_nu0_sequence(lo: float = -20.0, hi: float = -1.0, k: int = 15) -> np.ndarray:
    """Spike variances exp(hi) > ... > exp(lo), equispaced in log space."""
    return np.exp(np.linspace(hi, lo, k))


@dataclass
class Dataset:
    Y: np.ndarray  # (N, M) in {0, 1}
    X: np.ndarray  # (N, P)
    names: Sequence[str] = ()

    def __post_init__(self):
        Y = np.asarray(self.Y)
        if Y.ndim != 2:
            raise ValueError("Y must be an N x M matrix")
        if not np.isin(Y, (0, 1)).all():
            raise ValueError("Y entries must be 0 or 1")
        self.Y = Y.astype(np.uint8)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if not np.isfinite(X).all():
            raise ValueError("X contains non-finite values")
        self.X = X
        if not self.names:
            self.names = tuple(f"x{p + 1}" for p in range(X.shape[1]))
        if len(self.names) != X.shape[1]:
            raise ValueError("one covariate name per column of X required")
        if np.linalg.matrix_rank(np.column_stack([np.ones(len(X)), X])) < X.shape[1] + 1:
            warnings.warn("design [1, X] is not of full column rank", RuntimeWarning)

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def M(self) -> int:
        return self.Y.shape[1]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    def standardized(self) -> "Dataset":
        sd = self.X.std(axis=0)
        sd[sd == 0] = 1.0
        return Dataset(self.Y, (self.X - self.X.mean(axis=0)) / sd, self.names)


@dataclass
class Hyperparams:
    nu0_sequence: np.ndarray = field(default_factory=default_nu0_sequence)
    nu1: float = 10.0
    sigma0_sq: float = 100.0
    wishart_df: Optional[float] = None  # None -> P
    wishart_scale: Optional[np.ndarray] = None  # None -> identity
    epsilon: float = 1e-3
    max_sweeps: int = 2000
    # extra factor exp(-ridge/2 |theta|^2) anchoring the level of theta, which
    # the pairwise-difference MCAR leaves flat; 0 recovers the improper prior.
    theta_ridge: float = 1.0

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.nu0_sequence, dtype=float))
        if v.size == 0 or np.any(v <= 0):
            raise ValueError("spike variances must be positive")
        if np.any(np.diff(v) >= 0):
            raise ValueError("nu0_sequence must be strictly decreasing")
        if v.max() > self.nu1:
            raise ValueError("largest spike variance exceeds the slab variance")
        if self.sigma0_sq <= 0 or self.epsilon <= 0 or self.max_sweeps < 1:
            raise ValueError("sigma0_sq, epsilon and max_sweeps must be positive")
        if self.theta_ridge < 0:
            raise ValueError("theta_ridge must be non-negative")
        self.nu0_sequence = v

    @property
    def nu0(self) -> float:
        """Smallest (target) spike variance."""
        return float(self.nu0_sequence[-1])

    def at(self, nu0: float) -> "Hyperparams":
        """Copy with a single spike variance."""
        return Hyperparams(np.array([nu0]), self.nu1, self.sigma0_sq, self.wishart_df,
                           self.wishart_scale, self.epsilon, self.max_sweeps, self.theta_ridge)

    def df(self, P: int) -> float:
        df = float(P if self.wishart_df is None else self.wishart_df)
        if df < P:
            raise ValueError("wishart_df must be >= P")
        return df

    def scale(self, P: int) -> np.ndarray:
        if self.wishart_scale is None:
            return np.eye(P)
        return np.asarray(self.wishart_scale, dtype=float).reshape(P, P)


@dataclass
class ModelState:
    beta: np.ndarray  # (M, P)
    beta0: np.ndarray  # (M,)
    gamma: np.ndarray  # (M, P) in [0, 1]
    theta: np.ndarray  # (M, P)
    sigma_inv: np.ndarray  # (P, P)
    z: Optional[np.ndarray] = None  # (N, M)


class GroupedData:
    """Sufficient statistics of (Y, X) under observation weights.

    Subjects with identical covariate rows are pooled: ``U`` holds the G
    distinct rows and ``K1[g, j]`` / ``K0[g, j]`` the weighted counts of
    y = 1 / y = 0 in group g at voxel j.  Everything the probit likelihood,
    its variational bound and the Firth fits need is a function of these.
    """

    def __init__(self, data: Dataset, weights: Optional[np.ndarray] = None):
        X = data.X
        w = np.ones(data.N) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (data.N,) or np.any(w < 0):
            raise ValueError("weights must be a non-negative N-vector")
        U, inv = np.unique(X, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        if U.shape[0] == data.N:
            # every row distinct: keep subject order, no pooling
            U, inv = X, np.arange(data.N)
        A = sparse.csr_matrix((w, (inv, np.arange(data.N))), shape=(U.shape[0], data.N))
        self.U = U
        self.group = inv
        self.n = np.asarray(A.sum(axis=1)).reshape(-1)  # weighted group sizes
        self.K1 = np.asarray(A @ data.Y.astype(float))
        self.K0 = self.n[:, None] - self.K1
        self.w = w
        self.XtWX = (U * self.n[:, None]).T @ U
        self.Xtw = U.T @ self.n  # X' W 1
        self.wsum = float(self.n.sum())

    @property
    def G(self) -> int:
        return self.U.shape[0]


def linear_predictor(X, beta, beta0) -> np.ndarray:
    """eta_i(s_j) = x_i' beta(s_j) + beta0(s_j).

    ``beta`` may be a P-vector (single voxel) or (M, P); the result is (N,) or (N, M).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    beta = np.asarray(beta, dtype=float)
    if beta.shape[-1] != X.shape[1]:
        raise ValueError(f"beta has {beta.shape[-1]} coefficients, X has {X.shape[1]} columns")
    if beta.ndim == 1:
        return X @ beta + float(beta0)
    beta0 = np.asarray(beta0, dtype=float)
    if beta0.shape != (beta.shape[0],):
        raise ValueError("beta0 must have one entry per voxel")
    return X @ beta.T + beta0[None, :]


def mcar_quadratic(theta: np.ndarray, sigma_inv: np.ndarray, graph: NeighborGraph) -> float:
    """-1/2 sum over unordered neighbour pairs of d' Sigma^-1 d, d = theta_j - theta_j'."""
    if graph.edges.size == 0:
        return 0.0
    d = theta[graph.edges[:, 0]] - theta[graph.edges[:, 1]]
    return -0.5 * float(np.einsum("ep,pq,eq->", d, sigma_inv, d))


def wishart_logpdf(L: np.ndarray, df: float, scale: np.ndarray) -> float:
    P = L.shape[0]
    _, ld = np.linalg.slogdet(L)
    _, lds = np.linalg.slogdet(scale)
    return float(0.5 * (df - P - 1) * ld - 0.5 * np.trace(np.linalg.solve(scale, L))
                 - 0.5 * df * P * np.log(2.0) - 0.5 * df * lds - multigammaln(0.5 * df, P))


def _check_pd(L: np.ndarray) -> None:
    try:
        np.linalg.cholesky(L)
    except np.linalg.LinAlgError:
        raise ValueError("precision not positive definite") from None


def log_joint(state: ModelState, data: Dataset, hp: Hyperparams, graph: NeighborGraph,
              nu0: Optional[float] = None) -> float:
    """Log of the joint density at ``state`` (up to the improper-MCAR constant).

    Uses the augmented likelihood p(Y|Z) p(Z|beta, beta0) when ``state.z`` is
    given and the marginal probit likelihood otherwise.
    """
    nu0 = hp.nu0 if nu0 is None else nu0
    _check_pd(state.sigma_inv)
    M, P = state.beta.shape
    eta = linear_predictor(data.X, state.beta, state.beta0)
    Y = data.Y.astype(bool)
    if state.z is not None:
        z = state.z
        if np.any(z[Y] <= 0) or np.any(z[~Y] > 0):
            return -np.inf
        lik = float(np.sum(-0.5 * LOG2PI - 0.5 * (z - eta) ** 2))
    else:
        lik = float(np.sum(log_ndtr(np.where(Y, eta, -eta))))

    s0 = hp.sigma0_sq
    lp_b0 = float(np.sum(-0.5 * np.log(2 * np.pi * s0) - state.beta0 ** 2 / (2 * s0)))
    g = state.gamma
    b2 = state.beta ** 2
    lp_slab = -0.5 * np.log(2 * np.pi * hp.nu1) - b2 / (2 * hp.nu1)
    lp_spike = -0.5 * np.log(2 * np.pi * nu0) - b2 / (2 * nu0)
    lp_beta = float(np.sum(g * lp_slab + (1 - g) * lp_spike))
    th = state.theta
    lp_gamma = float(np.sum(g * log_expit(th) + (1 - g) * log_expit(-th)))

    G = graph.n_components()
    _, ld = np.linalg.slogdet(state.sigma_inv)
    lp_theta = mcar_quadratic(th, state.sigma_inv, graph) + 0.5 * (M - G) * (ld - P * LOG2PI)
    lp_theta -= 0.5 * hp.theta_ridge * float(np.sum(th ** 2))
    lp_sig = wishart_logpdf(state.sigma_inv, hp.df(P), hp.scale(P))
    return lik + lp_b0 + lp_beta + lp_gamma + lp_theta + lp_sig
