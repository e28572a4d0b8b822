"""BB-BLESS: Bayesian-bootstrap approximate posterior sampling.

Replicate b re-weights the likelihood with ``w ~ N * Dirichlet(alpha)`` and
centres the spike-and-slab prior on shifts drawn from ``N(0, nu0)``, then
re-fits every variational factor from the DPE solution and keeps the
posterior mean of beta.  Replicate streams are keyed by ``(base_seed, b)``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lattice import NeighborGraph
from .model import Dataset, GroupedData, Hyperparams
from .rng import stream
from .vi import NumericalError, VariationalState, _Problem, _run

log = logging.getLogger(__name__)


@dataclass
class BootstrapConfig:
    B: int = 1000
    alpha: float = 1.0
    base_seed: int = 0
    nu0_target: Optional[float] = None  # None -> smallest spike variance of the DPE grid
    epsilon: Optional[float] = None  # None -> same threshold as plain VI
    shift_mode: str = "both"
    workers: int = 1
    max_fail_frac: float = 0.1

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.nu0_target is not None and self.nu0_target <= 0:
            raise ValueError("nu0_target must be positive")


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray  # (B, M, P)
    failed: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.samples.std(axis=0)

    @property
    def tstat(self) -> np.ndarray:
        mean, sd = self.mean, self.sd
        out = np.full(mean.shape, np.nan)
        ok = sd > 0
        out[ok] = mean[ok] / sd[ok]
        return out


def draw_weights(seed: int, b: int, N: int, alpha: float) -> np.ndarray:
    """N * Dirichlet(alpha, ..., alpha), normalised so the sum is N."""
    if N < 1:
        raise ValueError("N must be >= 1")
    g = stream(seed, "bb-weights", b).standard_gamma(alpha, size=N)
    if not np.any(g > 0):  # alpha tiny: every gamma underflowed
        g = np.zeros(N)
        g[stream(seed, "bb-weights-fallback", b).integers(N)] = 1.0
    return N * g / g.sum()


def draw_shifts(seed: int, b: int, M: int, P: int, nu0: float) -> np.ndarray:
    if nu0 <= 0:
        raise ValueError("nu0 must be positive")
    return np.sqrt(nu0) * stream(seed, "bb-shifts", b).standard_normal((M, P))


def fit_replicate(b: int, data: Dataset, hp: Hyperparams, graph: NeighborGraph,
                  cfg: BootstrapConfig, warm_init: VariationalState,
                  weights=None, shifts=None) -> np.ndarray:
    """Posterior mean of beta (M, P) for replicate ``b``.

    ``weights``/``shifts`` override the replicate's own draws (for tests).
    """
    nu0 = hp.nu0 if cfg.nu0_target is None else cfg.nu0_target
    w = draw_weights(cfg.base_seed, b, data.N, cfg.alpha) if weights is None else weights
    mu = draw_shifts(cfg.base_seed, b, graph.M, data.P, nu0) if shifts is None else shifts
    # weights may be ~0 for some subjects; positivity is all the bound needs
    prob = _Problem(GroupedData(data, w), hp, graph, shifts=mu, nu0=nu0, shift_mode=cfg.shift_mode)
    try:
        vs = _run(prob, warm_init, epsilon=cfg.epsilon)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as e:
        raise NumericalError(f"bootstrap replicate {b}: {e}") from e
    if not np.all(np.isfinite(vs.m_beta)):
        raise NumericalError(f"bootstrap replicate {b}: non-finite coefficients")
    return vs.m_beta


def _replicate_job(args):
    b, data, hp, graph, cfg, warm = args
    try:
        return b, fit_replicate(b, data, hp, graph, cfg, warm), None
    except NumericalError as e:
        return b, None, str(e)


def run_bootstrap(data: Dataset, hp: Hyperparams, graph: NeighborGraph, cfg: BootstrapConfig,
                  warm_init: VariationalState, replicates=None) -> PosteriorEnsemble:
    """Fit replicates ``0..B-1`` (or the given ids); failed ones are excluded and logged."""
    ids = list(range(cfg.B)) if replicates is None else list(replicates)
    jobs = [(b, data, hp, graph, cfg, warm_init) for b in ids]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(_replicate_job, jobs, chunksize=max(1, len(jobs) // (4 * cfg.workers))))
    else:
        results = [_replicate_job(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    failed = [(b, msg) for b, s, msg in results if s is None]
    if failed:
        log.warning("%d of %d bootstrap replicates failed", len(failed), len(ids))
    if len(failed) > cfg.max_fail_frac * len(ids):
        raise NumericalError(f"{len(failed)}/{len(ids)} bootstrap replicates failed; first: {failed[0][1]}")
    samples = np.stack([s for _, s, _ in results if s is not None])
    return PosteriorEnsemble(samples=samples, failed=failed)
