"""End-to-end fits of one dataset, shared by the experiment scripts and tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bootstrap import BootstrapConfig, PosteriorEnsemble, run_bootstrap
from .dpe import DpePath, run_dpe
from .firth import FirthFit, bh_fdr_adjust, fit_all_voxels
from .gibbs import ChainOutput, GibbsConfig, run_gibbs
from .lattice import NeighborGraph
from .model import Dataset, Hyperparams
from .vi import default_init


@dataclass
class Fits:
    firth: FirthFit
    path: DpePath
    ensemble: Optional[PosteriorEnsemble] = None
    chain: Optional[ChainOutput] = None
    seconds: dict = field(default_factory=dict)

    @property
    def vi(self):
        return self.path.final.state


def firth_rejections(ff: FirthFit, level: float = 0.05) -> np.ndarray:
    """BH rejections per covariate map (intercept excluded); degenerate voxels never reject."""
    pv = np.where(ff.degenerate[:, None], 1.0, ff.pvalues[:, 1:])
    return np.column_stack([bh_fdr_adjust(pv[:, p], level)[1] for p in range(pv.shape[1])])


def fit_dataset(data: Dataset, graph: NeighborGraph, hp: Hyperparams,
                bootstrap: Optional[BootstrapConfig] = None, gibbs: Optional[GibbsConfig] = None,
                workers: int = 1) -> Fits:
    """Firth, then DPE from the Firth start, then BB and Gibbs warm-started from DPE."""
    sec = {}
    t = time.perf_counter()
    ff = fit_all_voxels(data, workers=workers)
    sec["firth"] = time.perf_counter() - t
    t = time.perf_counter()
    path = run_dpe(data, hp, graph, default_init(data, hp, ff, graph))
    sec["vi"] = time.perf_counter() - t
    fits = Fits(firth=ff, path=path, seconds=sec)
    if bootstrap is not None:
        t = time.perf_counter()
        fits.ensemble = run_bootstrap(data, hp, graph, bootstrap, path.final.state)
        sec["bb"] = time.perf_counter() - t
    if gibbs is not None:
        t = time.perf_counter()
        fits.chain = run_gibbs(data, hp, graph, gibbs, path.final.state)
        sec["gibbs"] = time.perf_counter() - t
    return fits
