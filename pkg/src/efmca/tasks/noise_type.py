"""Noise-type selection by comparing free energies of equally sized models."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..em import EMConfig, run_em, transfer_params
from ..expfam import get_distribution
from ..model import ModelParams, sample_dataset
from ..tvem import EvoConfig, TVEMConfig, run_tvem
from .bars import bar_masks


@dataclass
class SelectionConfig:
    H: int = 10
    iterations: int = 50
    restarts: int = 5
    seed: int = 0
    algorithm: str = "exact"  # or "tvem"
    S: int = 60
    cross_warm: bool = True  # also start each candidate from the others' best fits
    workers: int | None = None

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("workers")
        return d


def _train(Y, dist, cfg, seed, init=None):
    if cfg.algorithm == "tvem":
        tcfg = TVEMConfig(H=cfg.H, iterations=cfg.iterations, seed=seed, workers=cfg.workers, evo=EvoConfig(S=cfg.S))
        return run_tvem(Y, dist, tcfg, init=init)
    ecfg = EMConfig(H=cfg.H, iterations=cfg.iterations, seed=seed, workers=cfg.workers, early_stop=False)
    return run_em(Y, dist, ecfg, init=init)


def select_noise_model(Y, candidates, cfg):
    """Best-of-``restarts`` free energy per datapoint for each candidate; the largest wins.

    With ``cross_warm`` every candidate additionally gets one run initialized
    from each other candidate's best parameters (moment matched), which helps
    families prone to poor local optima such as the Gamma model.
    Candidates whose support excludes some observation are skipped with a reason.
    """
    Y = np.asarray(Y, dtype=float)
    fitted, skipped = {}, []
    for name in candidates:
        dist = get_distribution(name)
        ok = dist.in_domain(Y)
        if not np.all(ok):
            r, c = (int(i) for i in np.argwhere(~ok)[0])
            skipped.append({"candidate": dist.name, "reason": f"value {Y[r, c]!r} at row {r}, column {c} outside {dist.domain} support"})
            continue
        runs, best = [], None
        for r in range(cfg.restarts):
            params, trace = _train(Y, dist, cfg, cfg.seed * 1000 + r)
            runs.append(float(trace.lower_bounds[-1]) / len(Y))
            if best is None or runs[-1] > best[0]:
                best = (runs[-1], params)
        fitted[dist.name] = {"dist": dist, "runs": runs, "best": best, "warm_runs": {}}
    if cfg.cross_warm and len(fitted) > 1:
        starts = {k: v["best"][1] for k, v in fitted.items()}
        for name, entry in fitted.items():
            for src, params in starts.items():
                if src == name:
                    continue
                init = transfer_params(params, fitted[src]["dist"], entry["dist"])
                _, trace = _train(Y, entry["dist"], cfg, cfg.seed * 1000 + cfg.restarts, init=init)
                entry["warm_runs"][src] = float(trace.lower_bounds[-1]) / len(Y)
    results = []
    for name, e in fitted.items():
        best = max(e["runs"] + list(e["warm_runs"].values()))
        results.append({"candidate": name, "free_energy_per_datapoint": best, "runs": e["runs"], "warm_runs": e["warm_runs"]})
    winner = max(results, key=lambda r: r["free_energy_per_datapoint"])["candidate"] if results else None
    return {"winner": winner, "results": results, "skipped": skipped, "N": int(len(Y))}


def noisy_bars(kind, rng, N=1000, R=5, pi=0.2, bar=20.0, background=10.0, var_range=(1.0, 4.0), shape_range=(10.0, 40.0)):
    """Bars data with per-(pixel, cause) random noise levels.

    Gaussian noise draws each variance from ``var_range``; Gamma noise draws
    each shape from ``shape_range``.  Returns ``(Y, truth)``.
    """
    dist = get_distribution(kind)
    means = np.where(bar_masks(R), bar, background)
    if dist.name == "gaussian":
        var = rng.uniform(*var_range, size=means.shape)
    elif dist.name == "gamma":
        var = means**2 / rng.uniform(*shape_range, size=means.shape)
    else:
        raise ValueError(f"noisy bars support gaussian or gamma noise, not {kind!r}")
    truth = ModelParams(pi=np.full(2 * R, pi), W=np.moveaxis(dist.from_moments(means, var), -1, 0)).validate(dist)
    _, Y = sample_dataset(truth, dist, N, rng)
    return Y, truth
