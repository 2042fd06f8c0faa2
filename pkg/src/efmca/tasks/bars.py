"""Bars test: horizontal and vertical bar causes on an ``R x R`` grid."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..em import EMConfig, exact_loglik, run_em
from ..errors import ParameterError
from ..expfam import get_distribution
from ..model import ModelParams, compute_M, sample_dataset

# (bar, background) first mean-value parameters per distribution
DEFAULT_VALUES = {
    "exponential": (10.0, 1.0),
    "poisson": (10.0, 1.0),
    "bernoulli": (0.99, 0.01),
    "gaussian": (20.0, 10.0),
    "gamma": (20.0, 10.0),
}


@dataclass
class BarsConfig:
    R: int = 5
    pi_gen: float = 0.2
    N: int = 1000
    bar_value: float | None = None
    background_value: float | None = None
    distribution: str = "exponential"
    variance: float = 1.0  # noise variance for two-parameter members

    @property
    def H(self):
        return 2 * self.R

    @property
    def D(self):
        return self.R * self.R

    def resolved(self):
        """Copy with distribution defaults filled in for unset bar/background values."""
        bar, bg = DEFAULT_VALUES.get(get_distribution(self.distribution).name, (10.0, 1.0))
        return dataclasses.replace(
            self,
            bar_value=bar if self.bar_value is None else self.bar_value,
            background_value=bg if self.background_value is None else self.background_value,
        )

    def validate(self):
        cfg = self.resolved()
        if cfg.R < 1 or cfg.N < 1 or not 0.0 < cfg.pi_gen < 1.0 or cfg.variance <= 0:
            raise ParameterError(f"invalid bars configuration: {cfg}")
        dist = get_distribution(cfg.distribution)
        probe = np.array([cfg.bar_value, cfg.background_value])
        if dist.L == 1:
            w = dist.from_moments(probe, None)
        else:
            w = dist.from_moments(probe, np.full(2, cfg.variance))
        dist.check_mean(w)
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self.resolved())


def bar_masks(R):
    """Boolean bar patterns, shape ``(R*R, 2R)``: horizontal bars first, then vertical."""
    masks = np.zeros((R * R, 2 * R), dtype=bool)
    grid = np.arange(R * R).reshape(R, R)
    for i in range(R):
        masks[grid[i, :], i] = True
        masks[grid[:, i], R + i] = True
    return masks


def truth_params(cfg):
    """Generating parameters for a bars configuration."""
    cfg = cfg.validate()
    dist = get_distribution(cfg.distribution)
    means = np.where(bar_masks(cfg.R), cfg.bar_value, cfg.background_value)
    if dist.L == 1:
        w = dist.from_moments(means, None)
    else:
        w = dist.from_moments(means, np.full(means.shape, cfg.variance))
    return ModelParams(pi=np.full(cfg.H, cfg.pi_gen), W=np.moveaxis(w, -1, 0)).validate(dist)


def gen_bars(cfg, rng, truth=None):
    """Sample a bars dataset; returns ``(Y, truth, S)``."""
    cfg = cfg.validate()
    truth = truth_params(cfg) if truth is None else truth
    S, Y = sample_dataset(truth, cfg.distribution, cfg.N, rng)
    return Y, truth, S


def match_columns(M_trained, M_truth):
    """Greedy one-to-one matching by smallest L2 distance; returns ``match[j]`` = trained index for truth ``j``."""
    d = np.linalg.norm(M_trained[:, :, None] - M_truth[:, None, :], axis=0)  # (H_trained, H_truth)
    match = np.full(M_truth.shape[1], -1)
    d = d.copy()
    for _ in range(min(d.shape)):
        i, j = np.unravel_index(np.argmin(d), d.shape)
        match[j] = i
        d[i, :] = np.inf
        d[:, j] = np.inf
    return match


def column_recovers(column, mask):
    """True when splitting ``column`` at its value midpoint reproduces ``mask``."""
    lo, hi = column.min(), column.max()
    if not hi > lo:
        return False
    return bool(np.array_equal(column > 0.5 * (lo + hi), mask))


def evaluate_bars_run(trained, truth, dist, Y=None):
    """Count recovered bars; with data ``Y`` also report the log-likelihood gap to the truth."""
    dist = get_distribution(dist)
    if trained.W.shape != truth.W.shape:
        raise ParameterError(f"shape mismatch: trained {trained.W.shape} vs truth {truth.W.shape}")
    Mt, Mg = compute_M(trained, dist), compute_M(truth, dist)
    match = match_columns(Mt, Mg)
    # truth columns are bars on a flat background: on-bar pixels exceed the midpoint
    masks = Mg > 0.5 * (Mg.min(axis=0) + Mg.max(axis=0))
    recovered = [column_recovers(Mt[:, match[j]], masks[:, j]) for j in range(Mg.shape[1])]
    report = {"bars_recovered": int(np.sum(recovered)), "H": truth.H, "matching": match.tolist()}
    if Y is not None:
        ll_t, ll_g = exact_loglik(Y, trained, dist), exact_loglik(Y, truth, dist)
        report.update(loglik=ll_t, truth_loglik=ll_g, loglik_gap=ll_t - ll_g)
    return report


def bars_restarts(Y, truth, dist, em_cfg, seeds):
    """Train once per seed on the same data; one report per run."""
    rows = []
    for seed in seeds:
        params, trace = run_em(Y, dist, dataclasses.replace(em_cfg, seed=int(seed)))
        rep = evaluate_bars_run(params, truth, dist, Y)
        rep.update(seed=int(seed), lower_bound=float(trace.lower_bounds[-1]), iterations=len(trace.records) - 1)
        rows.append(rep)
    return rows


def reliability_sweep(pis, runs, bars_cfg, em_cfg, seed=0):
    """Fresh dataset and initialization per run for each sparsity level.

    Returns one row per run and a per-``pi`` summary with the fraction of
    runs whose likelihood exceeds the generating parameters'.
    """
    rows, summary = [], []
    for k, pi in enumerate(pis):
        cfg = dataclasses.replace(bars_cfg, pi_gen=float(pi))
        hits = full = 0
        for r in range(runs):
            rng = np.random.default_rng([seed, k, r])
            Y, truth, _ = gen_bars(cfg, rng)
            params, _ = run_em(Y, cfg.distribution, dataclasses.replace(em_cfg, seed=int(rng.integers(2**31))))
            rep = evaluate_bars_run(params, truth, cfg.distribution, Y)
            hits += rep["loglik_gap"] > 0
            full += rep["bars_recovered"] == truth.H
            rows.append({"pi": float(pi), "run": r, "loglik_gap": rep["loglik_gap"], "bars_recovered": rep["bars_recovered"]})
        summary.append({"pi": float(pi), "runs": runs, "frac_above_truth": hits / runs, "frac_all_bars": full / runs})
    return rows, summary


def bars_em_config(H=10, **overrides):
    """Training defaults for the bars experiments (50 iterations, pi initialized at 0.3)."""
    base = EMConfig(H=H, iterations=50, pi_init=0.3, early_stop=False)
    return dataclasses.replace(base, **overrides)
