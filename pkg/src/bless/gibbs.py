"""Full Gibbs sampler for BLESS at a fixed spike variance.

One iteration draws, in order,

* z | rest and (beta0, beta)(s_j) | z, gamma jointly per voxel.  Subjects
  sharing a covariate row only enter through the sum of their latent
  z, so each group's truncated normals are summed as they are drawn;
* gamma | beta, theta (Bernoulli);
* theta | rest with Polya-Gamma augmentation, voxels in checkerboard order,
  followed by an exact translation of each connected component along the
  direction the pairwise-difference prior leaves flat;
* Sigma^-1 | theta (Wishart, Bartlett construction).

Inner loops are compiled with numba.  Numba's generator is re-seeded at the
start of every iteration from ``stream(seed, "gibbs", t)``, so a chain is a
deterministic function of its seed and initial state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy import sparse

from .lattice import NeighborGraph
from .model import Dataset, GroupedData, Hyperparams, ModelState
from .rng import stream
from .vi import NumericalError, VariationalState

log = logging.getLogger(__name__)

THETA_SAMPLERS = ("pg", "rwm")


@dataclass
class GibbsConfig:
    iterations: int = 15000
    burn_in: int = 5000
    seed: int = 0
    thin: int = 1
    theta_sampler: str = "pg"  # "rwm": random-walk Metropolis, for cross-checking
    rwm_step: float = 0.5
    keep_gamma: bool = False
    keep_theta: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("iterations and thin must be positive, burn_in non-negative")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.theta_sampler not in THETA_SAMPLERS:
            raise ValueError(f"theta_sampler must be one of {THETA_SAMPLERS}")

    @property
    def retained(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))


@dataclass
class ChainOutput:
    beta: np.ndarray  # (R, M, P) retained draws
    beta0_mean: np.ndarray  # (M,)
    gamma_mean: np.ndarray  # (M, P) posterior inclusion probability
    theta_mean: np.ndarray  # (M, P)
    sigma_inv: np.ndarray  # (R, P, P)
    gamma: Optional[np.ndarray] = None  # (R, M, P) uint8 if kept
    theta: Optional[np.ndarray] = None  # (R, M, P) if kept
    final: Optional[ModelState] = None
    accept_rate: float = float("nan")  # theta RWM only

    @property
    def R(self) -> int:
        return self.beta.shape[0]


@dataclass
class ChainSummary:
    mean: np.ndarray
    sd: np.ndarray
    tstat: np.ndarray
    ess: np.ndarray
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- samplers


@numba.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@numba.njit(cache=True)
def _tn_lower(a):
    """x ~ N(0, 1) conditioned on x >= a."""
    if a < 0.45:
        while True:
            x = np.random.standard_normal()
            if x >= a:
                return x
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    while True:
        x = a + np.random.exponential(1.0) / alpha
        if np.random.random() <= math.exp(-0.5 * (x - alpha) ** 2):
            return x


@numba.njit(cache=True)
def _tn_sum(a, k, buf, pos):
    """Sum of k iid N(0, 1) draws conditioned on x >= a.

    Normals come from ``buf`` while it lasts (numba's generator after that);
    tail bounds use exponential rejection.  Returns ``(sum, pos)``.
    """
    s = 0.0
    if a < 0.45:
        n = buf.shape[0]
        while k > 0:
            if pos < n:
                x = buf[pos]
                pos += 1
            else:
                x = np.random.standard_normal()
            if x >= a:
                s += x
                k -= 1
    else:
        for _ in range(k):
            s += _tn_lower(a)
    return s, pos


@numba.njit(cache=True)
def _ncdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


_PG_T = 0.64


@numba.njit(cache=True)
def _pg_coef(n, x):
    """n-th term of the alternating series for the PG(1, 0) / J* density."""
    k = n + 0.5
    if x > _PG_T:
        return math.pi * k * math.exp(-0.5 * k * k * math.pi * math.pi * x)
    return math.pi * k * (2.0 / (math.pi * x)) ** 1.5 * math.exp(-2.0 * k * k / x)


@numba.njit(cache=True)
def _tig(z):
    """Inverse Gaussian(1/z, 1) truncated to (0, t)."""
    t = _PG_T
    mu = 1.0 / z if z > 0 else np.inf
    if mu > t:
        while True:
            while True:
                e1 = np.random.exponential(1.0)
                e2 = np.random.exponential(1.0)
                if e1 * e1 <= 2.0 * e2 / t:
                    break
            x = t / (1.0 + t * e1) ** 2
            if np.random.random() <= math.exp(-0.5 * z * z * x):
                return x
    while True:
        y = np.random.standard_normal() ** 2
        x = mu + 0.5 * mu * mu * y - 0.5 * mu * math.sqrt(4.0 * mu * y + (mu * y) ** 2)
        if np.random.random() > mu / (mu + x):
            x = mu * mu / x
        if x <= t:
            return x


@numba.njit(cache=True)
def _pg1(c):
    """One draw from the Polya-Gamma PG(1, c) distribution (Devroye-type)."""
    z = 0.5 * abs(c)
    t = _PG_T
    K = math.pi * math.pi / 8.0 + 0.5 * z * z
    p = math.pi / (2.0 * K) * math.exp(-K * t)
    if z > 0:
        rt = math.sqrt(1.0 / t)
        q = 2.0 * math.exp(-z) * (_ncdf(rt * (t * z - 1.0))
                                  + math.exp(2.0 * z) * _ncdf(-rt * (t * z + 1.0)))
    else:
        q = 2.0 * 2.0 * _ncdf(-math.sqrt(1.0 / t))
    while True:
        if np.random.random() < p / (p + q):
            x = t + np.random.exponential(1.0) / K
        else:
            x = _tig(z)
        s = _pg_coef(0, x)
        y = np.random.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _pg_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _pg_coef(n, x)
                if y > s:
                    break


@numba.njit(cache=True)
def _chol(A, L):
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, n):
            L[i, j] = 0.0
    return True


@numba.njit(cache=True)
def _gauss_canonical(Q, b, L, out):
    """out ~ N(Q^-1 b, Q^-1); False if Q is not positive definite."""
    n = Q.shape[0]
    if not _chol(Q, L):
        return False
    y = np.empty(n)
    for i in range(n):  # L y = b
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    for i in range(n):
        y[i] += np.random.standard_normal()
    for i in range(n - 1, -1, -1):  # L' out = y + eps
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return True


# ---------------------------------------------------------------- sweeps


@numba.njit(cache=True)
def _sweep_beta(U1, K1, K0, UtnU, coef, gamma, nu0, nu1, s0inv, buf):
    """z and (beta0, beta) per voxel.  coef is (M, P+1), intercept first.

    ``buf`` holds pre-drawn standard normals for the truncated-normal draws.
    """
    G, P1 = U1.shape
    M = coef.shape[0]
    Q = np.empty((P1, P1))
    L = np.zeros((P1, P1))
    b = np.empty(P1)
    out = np.empty(P1)
    pos = 0
    for j in range(M):
        b[:] = 0.0
        for g in range(G):
            eta = 0.0
            for p in range(P1):
                eta += U1[g, p] * coef[j, p]
            zs = (K1[g, j] + K0[g, j]) * eta
            x, pos = _tn_sum(-eta, K1[g, j], buf, pos)
            zs += x
            x, pos = _tn_sum(eta, K0[g, j], buf, pos)
            zs -= x
            for p in range(P1):
                b[p] += U1[g, p] * zs
        Q[:, :] = UtnU
        Q[0, 0] += s0inv
        for p in range(1, P1):
            Q[p, p] += 1.0 / nu1 if gamma[j, p - 1] else 1.0 / nu0
        if not _gauss_canonical(Q, b, L, out):
            return j
        coef[j, :] = out
    return -1


@numba.njit(cache=True)
def _sweep_gamma(beta, theta, gamma, gsum, nu0, nu1):
    M, P = beta.shape
    c = 0.5 * math.log(nu0 / nu1)
    for j in range(M):
        for p in range(P):
            b2 = beta[j, p] ** 2
            lg = theta[j, p] + c + 0.5 * b2 / nu0 - 0.5 * b2 / nu1
            if lg >= 0:
                pr = 1.0 / (1.0 + math.exp(-lg))
            else:
                e = math.exp(lg)
                pr = e / (1.0 + e)
            gamma[j, p] = 1 if np.random.random() < pr else 0
            gsum[j, p] += gamma[j, p]


@numba.njit(cache=True)
def _sweep_theta_pg(order, indptr, indices, theta, gamma, Sinv, ridge):
    M, P = theta.shape
    Q = np.empty((P, P))
    L = np.zeros((P, P))
    b = np.empty(P)
    nb = np.empty(P)
    out = np.empty(P)
    for j in order:
        deg = indptr[j + 1] - indptr[j]
        nb[:] = 0.0
        for k in range(indptr[j], indptr[j + 1]):
            for p in range(P):
                nb[p] += theta[indices[k], p]
        for p in range(P):
            s = gamma[j, p] - 0.5
            for q in range(P):
                s += Sinv[p, q] * nb[q]
                Q[p, q] = deg * Sinv[p, q]
            b[p] = s
            Q[p, p] += _pg1(theta[j, p]) + ridge
        if not _gauss_canonical(Q, b, L, out):
            return j
        theta[j, :] = out
    return -1


@numba.njit(cache=True)
def _shift_theta_pg(comp, ncomp, theta, gamma, ridge):
    """Exact draw of a per-component translation given fresh PG variables."""
    M, P = theta.shape
    prec = np.zeros((ncomp, P))
    lin = np.zeros((ncomp, P))
    for j in range(M):
        c = comp[j]
        for p in range(P):
            w = _pg1(theta[j, p])
            prec[c, p] += w + ridge
            lin[c, p] += gamma[j, p] - 0.5 - (w + ridge) * theta[j, p]
    for c in range(ncomp):
        for p in range(P):
            prec_cp = prec[c, p]
            lin[c, p] = lin[c, p] / prec_cp + np.random.standard_normal() / math.sqrt(prec_cp)
    for j in range(M):
        for p in range(P):
            theta[j, p] += lin[comp[j], p]


@numba.njit(cache=True)
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@numba.njit(cache=True)
def _sweep_theta_rwm(order, indptr, indices, theta, gamma, Sinv, ridge, step):
    M, P = theta.shape
    nb = np.empty(P)
    prop = np.empty(P)
    acc = 0
    for j in order:
        deg = indptr[j + 1] - indptr[j]
        nb[:] = 0.0
        for k in range(indptr[j], indptr[j + 1]):
            for p in range(P):
                nb[p] += theta[indices[k], p]
        for p in range(P):
            prop[p] = theta[j, p] + step * np.random.standard_normal()
        d = 0.0
        for p in range(P):
            for x, sgn in ((prop[p], 1.0), (theta[j, p], -1.0)):
                lp = _log_sigmoid(x) if gamma[j, p] else _log_sigmoid(-x)
                lp -= 0.5 * ridge * x * x
                d += sgn * lp
            for q in range(P):
                d -= 0.5 * deg * Sinv[p, q] * (prop[p] * prop[q] - theta[j, p] * theta[j, q])
                d += Sinv[p, q] * nb[q] * (prop[p] - theta[j, p])
        if math.log(np.random.random()) < d:
            theta[j, :] = prop
            acc += 1
    return acc


@numba.njit(cache=True)
def _draw_wishart(edges, theta, W0inv, df, out):
    P = theta.shape[1]
    S = W0inv.copy()
    for e in range(edges.shape[0]):
        for p in range(P):
            dp = theta[edges[e, 0], p] - theta[edges[e, 1], p]
            for q in range(P):
                S[p, q] += dp * (theta[edges[e, 0], q] - theta[edges[e, 1], q])
    V = np.linalg.inv(S)
    V = 0.5 * (V + V.T)
    C = np.zeros((P, P))
    if not _chol(V, C):
        return False
    A = np.zeros((P, P))
    for i in range(P):
        A[i, i] = math.sqrt(np.random.chisquare(df - i))
        for k in range(i):
            A[i, k] = np.random.standard_normal()
    CA = C @ A
    out[:, :] = CA @ CA.T
    return True


# ---------------------------------------------------------------- driver


def _initial(init, M, P):
    if isinstance(init, VariationalState):
        return (init.m_beta.copy(), init.m_beta0.copy(), (init.q_gamma > 0.5).astype(np.uint8),
                init.m_theta.copy(), init.E_sigma_inv.copy())
    if isinstance(init, ModelState):
        return (np.array(init.beta, dtype=float), np.array(init.beta0, dtype=float),
                (np.asarray(init.gamma) > 0.5).astype(np.uint8),
                np.array(init.theta, dtype=float), np.array(init.sigma_inv, dtype=float))
    if init is None:
        return np.zeros((M, P)), np.zeros(M), np.zeros((M, P), np.uint8), np.zeros((M, P)), np.eye(P)
    raise TypeError("init must be a VariationalState, ModelState or None")


def run_gibbs(data: Dataset, hp: Hyperparams, graph: NeighborGraph, cfg: GibbsConfig,
              init=None, nu0: Optional[float] = None, callback=None) -> ChainOutput:
    """Sample the BLESS posterior at spike variance ``nu0`` (default ``hp.nu0``)."""
    nu0 = float(hp.nu0 if nu0 is None else nu0)
    nu1 = float(hp.nu1)
    if not 0 < nu0 <= nu1:
        raise ValueError("need 0 < nu0 <= nu1")
    gd = GroupedData(data)
    if gd.K1.shape[1] != graph.M:
        raise ValueError(f"data has {gd.K1.shape[1]} voxels, graph has {graph.M}")
    M, P = graph.M, data.P
    U1 = np.ascontiguousarray(np.column_stack([np.ones(gd.G), gd.U]))
    K1 = np.rint(gd.K1).astype(np.int64)
    K0 = np.rint(gd.K0).astype(np.int64)
    UtnU = (U1 * gd.n[:, None]).T @ U1

    beta, beta0, gamma, theta, Sinv = _initial(init, M, P)
    coef = np.ascontiguousarray(np.column_stack([beta0, beta]))
    gamma = np.ascontiguousarray(gamma)
    theta = np.ascontiguousarray(theta)
    Sinv = np.ascontiguousarray(Sinv)

    indptr = graph.indptr.astype(np.int64)
    indices = graph.indices.astype(np.int64)
    order = np.concatenate([np.flatnonzero(graph.color == 0), np.flatnonzero(graph.color == 1)]).astype(np.int64)
    ncomp, comp = sparse.csgraph.connected_components(graph.adjacency(), directed=False)
    comp = comp.astype(np.int64)
    edges = np.ascontiguousarray(graph.edges.astype(np.int64).reshape(-1, 2))
    W0inv = np.linalg.inv(hp.scale(P))
    df = hp.df(P) + M - ncomp
    ridge = float(hp.theta_ridge)
    s0inv = 1.0 / hp.sigma0_sq

    R = cfg.retained
    draws = np.empty((R, M, P))
    sig_draws = np.empty((R, P, P))
    g_draws = np.empty((R, M, P), np.uint8) if cfg.keep_gamma else None
    t_draws = np.empty((R, M, P)) if cfg.keep_theta else None
    gsum = np.zeros((M, P))
    tsum = np.zeros((M, P))
    b0sum = np.zeros(M)
    gscratch = np.zeros((M, P))
    accepted = 0
    r = 0
    buf = np.empty(int(1.1 * data.N * M) + 64)
    for t in range(cfg.iterations):
        rng = stream(cfg.seed, "gibbs", t)
        _seed(int(rng.integers(2 ** 32)))
        rng.standard_normal(out=buf)
        bad = _sweep_beta(U1, K1, K0, UtnU, coef, gamma, nu0, nu1, s0inv, buf)
        if bad >= 0:
            raise NumericalError(f"iteration {t}: beta precision not positive definite at voxel {bad}")
        beta = coef[:, 1:]
        _sweep_gamma(np.ascontiguousarray(beta), theta, gamma, gscratch, nu0, nu1)
        if cfg.theta_sampler == "pg":
            bad = _sweep_theta_pg(order, indptr, indices, theta, gamma, Sinv, ridge)
            if bad >= 0:
                raise NumericalError(f"iteration {t}: theta precision not positive definite at voxel {bad}")
            _shift_theta_pg(comp, ncomp, theta, gamma, ridge)
        else:
            accepted += _sweep_theta_rwm(order, indptr, indices, theta, gamma, Sinv, ridge, cfg.rwm_step)
        if edges.shape[0] > 0:
            if not _draw_wishart(edges, theta, W0inv, df, Sinv):
                raise NumericalError(f"iteration {t}: Wishart scale not positive definite")
        else:
            # no edges: the MCAR term is constant and Sigma^-1 keeps its prior
            if not _draw_wishart(edges, theta, W0inv, hp.df(P), Sinv):
                raise NumericalError(f"iteration {t}: Wishart scale not positive definite")
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"iteration {t}: non-finite theta")
        if t >= cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0:
            draws[r] = beta
            sig_draws[r] = Sinv
            gsum += gamma
            tsum += theta
            b0sum += coef[:, 0]
            if g_draws is not None:
                g_draws[r] = gamma
            if t_draws is not None:
                t_draws[r] = theta
            r += 1
        if callback is not None:
            callback(t)
    final = ModelState(beta=coef[:, 1:].copy(), beta0=coef[:, 0].copy(), gamma=gamma.astype(float),
                       theta=theta.copy(), sigma_inv=Sinv.copy())
    rate = accepted / (cfg.iterations * M) if cfg.theta_sampler == "rwm" else float("nan")
    return ChainOutput(beta=draws, beta0_mean=b0sum / R, gamma_mean=gsum / R, theta_mean=tsum / R,
                       sigma_inv=sig_draws, gamma=g_draws, theta=t_draws, final=final,
                       accept_rate=rate)


def effective_sample_size(x: np.ndarray) -> np.ndarray:
    """ESS of each column of a (R, ...) chain, Geyer initial positive sequence.

    Constant columns report R.
    """
    x = np.asarray(x, dtype=float)
    R = x.shape[0]
    flat = x.reshape(R, -1)
    xc = flat - flat.mean(axis=0)
    var = (xc ** 2).mean(axis=0)
    nfft = 1 << int(np.ceil(np.log2(2 * R)))
    f = np.fft.rfft(xc, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[:R] / R
    ess = np.full(flat.shape[1], float(R))
    ok = var > 0
    if np.any(ok):
        rho = acov[:, ok] / var[ok]
        K = R // 2
        pairs = rho[0:2 * K:2] + rho[1:2 * K:2]  # Gamma_k
        nonpos = pairs <= 0
        first = np.where(nonpos.any(axis=0), nonpos.argmax(axis=0), K)
        keep = np.arange(K)[:, None] < first[None, :]
        tau = -1.0 + 2.0 * np.sum(np.where(keep, pairs, 0.0), axis=0)
        ess[ok] = R / np.maximum(tau, 1.0 / np.log10(max(R, 10)))
    return ess.reshape(x.shape[1:])


def chain_summary(chain: ChainOutput) -> ChainSummary:
    """Mean, sd, t statistic and ESS of the retained beta draws per (voxel, covariate)."""
    if chain.R < 10:
        raise ValueError("need at least 10 retained draws")
    mean = chain.beta.mean(axis=0)
    sd = chain.beta.std(axis=0)
    tstat = np.full(mean.shape, np.nan)
    ok = sd > 0
    tstat[ok] = mean[ok] / sd[ok]
    return ChainSummary(mean=mean, sd=sd, tstat=tstat, ess=effective_sample_size(chain.beta),
                        extra={"gamma_mean": chain.gamma_mean})
