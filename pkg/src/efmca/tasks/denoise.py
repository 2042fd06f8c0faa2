"""Zero-shot patch denoising with the posterior-mean estimator."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..em import normalize_joints
from ..expfam import get_distribution
from ..model import ColumnTables, data_terms, log_joint_batch
from ..parallel import chunk_slices
from ..tvem import EvoConfig, TVEMConfig, run_tvem
from .imaging import POSITIVE_FLOOR, extract_patches, reassemble


@dataclass
class DenoiseConfig:
    H: int = 32
    S: int = 20
    patch_side: int = 8
    stride: int = 4
    iterations: int = 100
    seed: int = 0
    pi_init: float | None = None  # None: 2/H, i.e. two active causes on average
    workers: int | None = None
    chunk_size: int = 256
    evo: EvoConfig | None = None

    def tvem_config(self):
        evo = dataclasses.replace(self.evo or EvoConfig(), S=self.S)
        pi = self.pi_init if self.pi_init is not None else min(0.3, 2.0 / self.H)
        return TVEMConfig(
            H=self.H, iterations=self.iterations, seed=self.seed, pi_init=pi,
            workers=self.workers, chunk_size=self.chunk_size, evo=evo,
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("workers")
        return d


def posterior_mean_estimate(Y, K, params, dist, chunk_size=256):
    """``sum_{s in K} q(s) M[d, h(d, s)]`` for every datapoint and observable."""
    dist = get_distribution(dist)
    tables = ColumnTables(params, dist)
    T, logh = data_terms(Y, dist)
    d_idx = np.arange(params.D)
    out = np.empty(np.shape(Y))
    for c in chunk_slices(len(Y), chunk_size):
        sel = tables.selections(K[c])
        q = normalize_joints(log_joint_batch(K[c], T[c], logh[c], tables, sel))[1]
        out[c] = np.einsum("ns,nsd->nd", q, tables.M[d_idx, sel])
    return out


def prepare_patches(Y, dist):
    """Floor zeros for members supported on the positive half-line."""
    dist = get_distribution(dist)
    if dist.name == "gamma":
        return np.maximum(Y, POSITIVE_FLOOR)
    return Y


def denoise(noisy, dist, cfg):
    """Train on the noisy image's own patches and average the patch estimates.

    Returns ``(estimate, trace, params)``.
    """
    dist = get_distribution(dist)
    grid = extract_patches(noisy, cfg.patch_side, cfg.stride)
    Y = prepare_patches(grid.patches, dist)
    params, trace, K = run_tvem(Y, dist, cfg.tvem_config(), return_state=True)
    est = posterior_mean_estimate(Y, K, params, dist, cfg.chunk_size)
    return reassemble(grid, est, peak=noisy.peak), trace, params
