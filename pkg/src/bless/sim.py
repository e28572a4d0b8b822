"""Synthetic 2-D lesion masks with known ground truth.

Each subject gets Poisson lesion counts per image quadrant.  Female subjects
(sex = 1) have four times the rate on the right half, group-2 subjects
(group = 1) four times the rate in the lower-left quadrant.  A lesion is a
3x3 block around a uniformly placed centre, clipped to its quadrant, so every
voxel's lesion probability depends on exactly the covariates whose region
contains it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .lattice import LatticeMask
from .model import Dataset
from .rng import stream

COVARIATES = ("sex", "group")


@dataclass
class SimConfig:
    N: int = 1000
    lam: float = 3.0
    dims: tuple = (50, 50)
    seed: int = 0
    effect: float = 4.0
    block: int = 3
    p_sex: float = 0.5
    p_group: float = 0.5

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if len(self.dims) != 2 or any(d < 2 or d % 2 for d in self.dims):
            raise ValueError("dims must be two positive even integers")
        if self.N < 1:
            raise ValueError("N must be positive")


@dataclass
class SimTruth:
    active: np.ndarray  # (M, P) bool
    beta: np.ndarray  # (M, P) probit-scale effect
    beta0: np.ndarray  # (M,)
    prob: dict = field(default_factory=dict)  # (sex, group) -> (M,) lesion probability
    multipliers: dict = field(default_factory=dict)


def _quadrants(dims):
    """(row slice, col slice, is_right, is_lower_left) for the four quadrants."""
    h, w = dims[0] // 2, dims[1] // 2
    out = []
    for r0, r1 in ((0, h), (h, dims[0])):
        for c0, c1 in ((0, w), (w, dims[1])):
            out.append((r0, r1, c0, c1, c0 >= w, r0 >= h and c0 < w))
    return out


def _rates(cfg: SimConfig, sex: int, group: int):
    rates = []
    for *_, right, lowleft in _quadrants(cfg.dims):
        lam = cfg.lam * (cfg.effect ** (sex * right)) * (cfg.effect ** (group * lowleft))
        rates.append(lam)
    return rates


def lesion_probability(cfg: SimConfig, sex: int, group: int) -> np.ndarray:
    """Exact per-voxel probability of a lesion, as a (rows, cols) image."""
    half = cfg.block // 2
    out = np.zeros(cfg.dims)
    for (r0, r1, c0, c1, *_), lam in zip(_quadrants(cfg.dims), _rates(cfg, sex, group)):
        rr = np.arange(r0, r1)
        cc = np.arange(c0, c1)
        nr = np.minimum(rr + half, r1 - 1) - np.maximum(rr - half, r0) + 1
        nc = np.minimum(cc + half, c1 - 1) - np.maximum(cc - half, c0) + 1
        area = (r1 - r0) * (c1 - c0)
        out[r0:r1, c0:c1] = 1.0 - np.exp(-lam * np.outer(nr, nc) / area)
    return out


def _subject_mask(cfg: SimConfig, rng: np.random.Generator, sex: int, group: int) -> np.ndarray:
    img = np.zeros(cfg.dims, dtype=np.uint8)
    half = cfg.block // 2
    for (r0, r1, c0, c1, *_), lam in zip(_quadrants(cfg.dims), _rates(cfg, sex, group)):
        k = rng.poisson(lam)
        if k == 0:
            continue
        rows = rng.integers(r0, r1, size=k)
        cols = rng.integers(c0, c1, size=k)
        for r, c in zip(rows, cols):
            img[max(r - half, r0):min(r + half + 1, r1), max(c - half, c0):min(c + half + 1, c1)] = 1
    return img


def generate_dataset(cfg: SimConfig):
    """Simulate ``(Dataset, SimTruth, LatticeMask)``."""
    mask = LatticeMask.full(cfg.dims)
    cov_rng = stream(cfg.seed, "sim-covariates")
    sex = (cov_rng.random(cfg.N) < cfg.p_sex).astype(int)
    group = (cov_rng.random(cfg.N) < cfg.p_group).astype(int)
    Y = np.empty((cfg.N, mask.M), dtype=np.uint8)
    for i in range(cfg.N):
        img = _subject_mask(cfg, stream(cfg.seed, "sim-subject", i), sex[i], group[i])
        Y[i] = mask.from_volume(img)
    X = np.column_stack([sex, group]).astype(float)
    return Dataset(Y, X, COVARIATES), make_truth(cfg, mask), mask


def make_truth(cfg: SimConfig, mask: LatticeMask) -> SimTruth:
    prob = {(s, g): mask.from_volume(lesion_probability(cfg, s, g)) for s in (0, 1) for g in (0, 1)}
    q00 = ndtri(np.clip(prob[0, 0], 1e-300, None))
    b_sex = ndtri(prob[1, 0]) - q00
    b_grp = ndtri(prob[0, 1]) - q00
    h, w = cfg.dims[0] // 2, cfg.dims[1] // 2
    coords = mask.coords()
    right = coords[:, 1] >= w
    lowleft = (coords[:, 0] >= h) & (coords[:, 1] < w)
    return SimTruth(
        active=np.column_stack([right, lowleft]),
        beta=np.column_stack([b_sex, b_grp]),
        beta0=q00,
        prob=prob,
        multipliers={"sex": cfg.effect, "group": cfg.effect},
    )


def empirical_rates(data: Dataset, subgroup=None) -> np.ndarray:
    """Per-voxel lesion frequency over the subjects selected by ``subgroup``."""
    sel = np.ones(data.N, dtype=bool) if subgroup is None else np.asarray(subgroup, dtype=bool)
    if not sel.any():
        raise ValueError("empty subgroup")
    return data.Y[sel].mean(axis=0)


@dataclass
class BlockConfig:
    """Voxel-independent Bernoulli lesions with one planted square effect block."""

    N: int = 400
    dims: tuple = (30, 30)
    block: int = 8
    effect: float = 1.0  # probit-scale effect of the single covariate inside the block
    base_rate: float = 0.1
    p_x: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 2 or self.block < 1 or self.block > min(self.dims):
            raise ValueError("block must fit inside the 2-D image")
        if not 0 < self.base_rate < 1:
            raise ValueError("base_rate must lie in (0, 1)")


def block_region(cfg: BlockConfig, mask: LatticeMask) -> np.ndarray:
    """(M,) bool: voxels of the centred effect block."""
    lo = [(d - cfg.block) // 2 for d in cfg.dims]
    c = mask.coords()
    return np.all((c >= lo) & (c < np.add(lo, cfg.block)), axis=1)


def generate_block_dataset(cfg: BlockConfig):
    """Simulate ``(Dataset, SimTruth, LatticeMask)`` for the planted-block design."""
    mask = LatticeMask.full(cfg.dims)
    rng = stream(cfg.seed, "sim-block")
    x = (rng.random(cfg.N) < cfg.p_x).astype(float)
    inside = block_region(cfg, mask)
    b0 = np.full(mask.M, ndtri(cfg.base_rate))
    beta = np.where(inside, cfg.effect, 0.0)
    eta = b0[None, :] + x[:, None] * beta[None, :]
    Y = (rng.standard_normal(eta.shape) < eta).astype(np.uint8)
    truth = SimTruth(active=inside[:, None], beta=beta[:, None], beta0=b0)
    return Dataset(Y, x[:, None], ("x",)), truth, mask
