"""Cluster-size inference and cluster-size mapping from bootstrap ensembles.

Replicates are standardised by the ensemble sd, thresholded at the
cluster-defining threshold (CDT) and labelled into face-connected clusters.
For each cluster of the observed map, a replicate contributes the total size
of its clusters that intersect it (0 if none).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .bootstrap import PosteriorEnsemble
from .lattice import NeighborGraph, connected_components

DEFAULT_CDT = 2.3


def threshold_statmap(tstat, cdt: float = DEFAULT_CDT, two_sided: bool = False) -> np.ndarray:
    """Strict threshold ``t > cdt`` (``|t| > cdt`` if two-sided); NaN is inactive."""
    t = np.asarray(tstat, dtype=float)
    with np.errstate(invalid="ignore"):
        act = np.abs(t) > cdt if two_sided else t > cdt
    return act & np.isfinite(t)


def _standardized(ensemble: PosteriorEnsemble, p: int):
    sd = ensemble.sd[:, p]
    mean = ensemble.mean[:, p]
    ok = sd > 0
    obs = np.full(sd.shape, np.nan)
    obs[ok] = mean[ok] / sd[ok]
    reps = np.full(ensemble.samples.shape[:2], np.nan)
    reps[:, ok] = ensemble.samples[:, ok, p] / sd[ok]
    return obs, reps


@dataclass
class ClusterReport:
    labels: np.ndarray  # (M,) observed cluster id, -1 outside clusters
    sizes: np.ndarray  # (C,) observed sizes
    distributions: np.ndarray  # (C, B) bootstrap sizes
    ci: np.ndarray  # (C, 2)
    level: float
    extra: dict = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return int(self.sizes.size)

    @property
    def mean(self) -> np.ndarray:
        return self.distributions.mean(axis=1) if self.n_clusters else np.zeros(0)

    @property
    def sd(self) -> np.ndarray:
        return self.distributions.std(axis=1) if self.n_clusters else np.zeros(0)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "cluster": np.arange(self.n_clusters),
            "size": self.sizes,
            "boot_mean": self.mean,
            "boot_sd": self.sd,
            "ci_lower": self.ci[:, 0] if self.n_clusters else [],
            "ci_upper": self.ci[:, 1] if self.n_clusters else [],
        })


def intersecting_sizes(obs_labels: np.ndarray, n_obs: int, rep_labels: np.ndarray,
                       rep_sizes: np.ndarray) -> np.ndarray:
    """For each observed cluster, total size of replicate clusters touching it."""
    out = np.zeros(n_obs, dtype=np.int64)
    both = (obs_labels >= 0) & (rep_labels >= 0)
    if not both.any():
        return out
    pairs = np.unique(np.column_stack([obs_labels[both], rep_labels[both]]), axis=0)
    np.add.at(out, pairs[:, 0], rep_sizes[pairs[:, 1]])
    return out


def cluster_size_inference(ensemble: PosteriorEnsemble, graph: NeighborGraph, covariate: int = 0,
                           cdt: float = DEFAULT_CDT, level: float = 0.95, two_sided: bool = False,
                           mask=None) -> ClusterReport:
    """Bootstrap size distribution and equal-tailed interval per observed cluster."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    obs, reps = _standardized(ensemble, covariate)
    obs_act = threshold_statmap(obs, cdt, two_sided)
    labels, sizes = connected_components(mask, graph, obs_act)
    C, B = sizes.size, reps.shape[0]
    dist = np.zeros((C, B), dtype=np.int64)
    if C:
        for b in range(B):
            rl, rs = connected_components(mask, graph, threshold_statmap(reps[b], cdt, two_sided))
            dist[:, b] = intersecting_sizes(labels, C, rl, rs)
        tail = 0.5 * (1 - level)
        ci = np.quantile(dist, [tail, 1 - tail], axis=1).T
    else:
        ci = np.zeros((0, 2))
    return ClusterReport(labels=labels, sizes=sizes, distributions=dist, ci=ci, level=level,
                         extra={"cdt": cdt, "covariate": covariate, "two_sided": two_sided})


@dataclass
class SizeMap:
    prevalence: np.ndarray  # (M,) in [0, 1]
    size_mean: np.ndarray  # (M,), NaN where prevalence <= cut
    size_sd: np.ndarray
    cut: float


def cluster_size_mapping(ensemble: PosteriorEnsemble, graph: NeighborGraph, covariate: int = 0,
                         cdt: float = DEFAULT_CDT, prevalence_cut: float = 0.5,
                         two_sided: bool = False, mask=None) -> SizeMap:
    """Prevalence of supra-threshold standardised effects and reliable cluster sizes.

    The size at voxel j in a replicate is the size of the cluster containing
    j (0 when j is below threshold).
    """
    _, reps = _standardized(ensemble, covariate)
    B, M = reps.shape
    count = np.zeros(M)
    s1 = np.zeros(M)
    s2 = np.zeros(M)
    for b in range(B):
        act = threshold_statmap(reps[b], cdt, two_sided)
        lab, sz = connected_components(mask, graph, act)
        size_here = np.where(lab >= 0, sz[np.maximum(lab, 0)], 0).astype(float) if sz.size else np.zeros(M)
        count += act
        s1 += size_here
        s2 += size_here ** 2
    prev = count / B
    mean = s1 / B
    sd = np.sqrt(np.maximum(s2 / B - mean ** 2, 0.0))
    keep = prev > prevalence_cut
    return SizeMap(prevalence=prev, size_mean=np.where(keep, mean, np.nan),
                   size_sd=np.where(keep, sd, np.nan), cut=prevalence_cut)
