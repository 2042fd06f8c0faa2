"""Acceptance suite: one or more tests per criterion, summarized at the end of the run.

Each test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
prints one PASS/FAIL line per criterion plus the measured numbers.  Most of
these train many models and are marked ``slow``; the full-scale denoising
benchmark is marked ``benchmark`` and excluded by default.
"""

import dataclasses
import json
import shutil
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from efmca.cli import main as cli_main
from efmca.em import (
    EMConfig,
    accumulate_expectations,
    enumerate_states,
    exact_loglik,
    exact_posterior,
    gaussian_sigma_update,
    m_step_dictionaries,
    run_em,
    weighted_mean_update,
)
from efmca.expfam import get_distribution
from efmca.model import ModelParams, compute_M, link_eta, sample_dataset, selection_indicator
from efmca.tasks.bars import BarsConfig, bars_em_config, bars_restarts, gen_bars, reliability_sweep
from efmca.tasks.denoise import DenoiseConfig, denoise
from efmca.tasks.imaging import add_noise, load_test_image, rescale_peak
from efmca.tasks.noise_type import SelectionConfig, noisy_bars, select_noise_model
from efmca.tvem import EvoConfig, TVEMConfig, run_tvem, truncated_weights

from conftest import DIST_NAMES, random_columns, random_params
from test_expfam import expected_statistics

criterion = pytest.mark.criterion


def direct_psnr(clean, est, peak):
    """Independent PSNR: plain loops over pixels."""
    a, b = np.ravel(clean), np.ravel(est)
    mse = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)
    return 10.0 * np.log10(peak**2 / mse)


def profile(name):
    return json.loads(resources.files("efmca").joinpath(f"profiles/{name}.json").read_text())


# ---------------------------------------------------------------------------
# 1. phi round trip


@criterion(1, "phi round trip against quadrature/summation, 100 parameters per family")
@pytest.mark.parametrize("name", DIST_NAMES)
def test_c01_phi_round_trip(name, record_property):
    dist = get_distribution(name)
    tol = 1e-2 if name == "gamma" else 1e-6
    W = random_columns(dist, np.random.default_rng([1, DIST_NAMES.index(name)]), (100,))
    err = max(float(np.max(np.abs(expected_statistics(dist, dist.phi(w)) - w))) for w in W)
    record_property("detail", f"max |<T> - w| = {err:.2e} (tol {tol:g})")
    assert err <= tol


# ---------------------------------------------------------------------------
# 2. selected-column identity


@criterion(2, "A_dh(s) g(W_bar_d(s)) == A_dh(s) g(W_dh) exactly, 1000 triples per family")
@pytest.mark.parametrize("name", DIST_NAMES)
def test_c02_selected_column_identity(name, record_property):
    dist = get_distribution(name)
    rng = np.random.default_rng([2, DIST_NAMES.index(name)])
    checks = 0
    for _ in range(1000):
        H, D = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        params = random_params(dist, rng, H, D)
        s = rng.random(H) < rng.uniform(0.1, 0.9)
        s[rng.integers(H)] = True
        a, b, c = rng.normal(size=(3, dist.L))
        kind = int(rng.integers(3))

        def g(w):
            if kind == 0:
                return float(a @ w + (b @ w) ** 2)
            if kind == 1:
                return float(np.sin(a @ w) * np.exp(-abs(c @ w)))
            return float(np.prod(np.abs(w) + 1.0) ** b[0])

        M = compute_M(params, dist)
        cols = params.columns()
        sel = link_eta(s, params, dist).selected_h
        for d in range(D):
            w_bar = cols[d, sel[d]]
            for h in range(H):
                A = selection_indicator(d, h, s, M)
                assert A * g(w_bar) == A * g(cols[d, h])
                checks += 1
    record_property("detail", f"{checks} (d, h) checks over 1000 triples, all exact")


# ---------------------------------------------------------------------------
# 3. stationarity at the fixed point

# Per-observable cause means are a permutation of well separated levels.
# Dense random dictionaries make the trained fixed point sit on selection
# ties or parameter clamps, where the bound is not differentiable.
LEVELS = {
    "bernoulli": [0.1, 0.3, 0.5, 0.7, 0.9],
    "poisson": [1, 4, 16, 64, 256],
    "exponential": [1, 4, 16, 64, 256],
    "gaussian": [0, 5, 10, 15, 20],
    "gamma": [2, 6, 12, 20, 30],
}


def separated_instance(dist, rng, H=5, D=8):
    levels = np.array(LEVELS[dist.name], dtype=float)
    perm = np.stack([rng.permutation(levels) for _ in range(D)])
    if dist.name == "gaussian":
        w = dist.from_moments(perm + rng.uniform(-0.3, 0.3, (D, H)), rng.uniform(0.5, 2.0, (D, H)))
    else:
        mean = perm * rng.uniform(0.97, 1.03, (D, H))
        w = dist.from_moments(mean, None) if dist.L == 1 else dist.from_moments(mean, mean**2 / rng.uniform(10, 30, (D, H)))
    return ModelParams(pi=rng.uniform(0.2, 0.4, H), W=np.moveaxis(w, -1, 0)).validate(dist)


def fd_gradient(Y, params, dist):
    """Fourth-order central differences of the log-likelihood (= bound at exact q)."""
    g = np.zeros_like(params.W)
    for idx in np.ndindex(params.W.shape):
        step = 1e-5 * (abs(params.W[idx]) + 1.0)

        def f(k):
            W = params.W.copy()
            W[idx] += k * step
            return exact_loglik(Y, params.replace(W=W), dist)

        g[idx] = (-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * step)
    return g


@criterion(3, "free-energy gradients vanish at the converged fixed point (H=5, D=8, N=200)")
@pytest.mark.slow
@pytest.mark.parametrize("name", DIST_NAMES)
def test_c03_stationarity(name, record_property):
    dist = get_distribution(name)
    rng = np.random.default_rng([99, 0])
    truth = separated_instance(dist, rng)
    _, Y = sample_dataset(truth, dist, 200, rng)
    params, trace = run_em(Y, dist, EMConfig(H=5, iterations=5000, tol=1e-14, patience=10), init=truth)
    F = exact_loglik(Y, params, dist)
    tol = 1e-3 * abs(F) / (params.D * params.H)
    g = np.abs(fd_gradient(Y, params, dist))
    cols = params.columns()
    at_clamp = np.zeros(cols.shape[:2], dtype=bool)
    for f in (1 - 1e-9, 1 + 1e-9):
        at_clamp |= np.any(dist.clamp(cols * f) != cols * f, axis=-1)
    # an entry within the stencil width of another cause's entry sits on a kink of the max link
    W0 = params.W[0]
    gaps = np.abs(W0[:, :, None] - W0[:, None, :]) + np.diag(np.full(params.H, np.inf))
    near_tie = gaps.min(axis=2) <= 4e-5 * (np.abs(W0) + 1.0)
    smooth = ~(at_clamp | near_tie)
    interior = g[:, smooth].max() if smooth.any() else 0.0
    record_property(
        "detail",
        f"{len(trace.records) - 1} iterations, max|g|/tol = {g.max() / tol:.3g}; "
        f"{int(at_clamp.sum())} of {at_clamp.size} entries at the parameter clamp, {int((near_tie & ~at_clamp).sum())} more on selection near-ties; "
        f"max|g|/tol over the rest = {interior / tol:.3g}",
    )
    assert g.max() <= tol


# ---------------------------------------------------------------------------
# 4. monotonicity and the EM identity


@criterion(4, "exact EM on bars: bound never decreases and equals log-likelihood (20 seeds, rel 1e-8)")
@pytest.mark.slow
@pytest.mark.parametrize("name", DIST_NAMES)
def test_c04_monotone_and_identity(name, record_property):
    worst_dec = worst_gap = 0.0
    for seed in range(20):
        Y, _, _ = gen_bars(BarsConfig(distribution=name), np.random.default_rng([4, seed]))
        _, trace = run_em(Y, name, bars_em_config(seed=seed, track_loglik=True))
        lb = trace.lower_bounds
        ll = np.array([r["exact_loglik"] for r in trace.records])
        worst_dec = max(worst_dec, float(np.max((lb[:-1] - lb[1:]) / np.abs(lb[1:]))))
        worst_gap = max(worst_gap, float(np.max(np.abs(lb - ll) / np.abs(ll))))
    record_property("detail", f"max relative decrease {worst_dec:.2e}, max relative bound/log-likelihood gap {worst_gap:.2e}")
    assert worst_dec <= 1e-8
    assert worst_gap <= 1e-8


# ---------------------------------------------------------------------------
# 5. bars recovery


@criterion(5, "bars, 100 restarts: best run reaches ground-truth likelihood with all bars; some runs stall")
@pytest.mark.slow
@pytest.mark.parametrize("name", ["exponential", "bernoulli"])
def test_c05_bars_recovery(name, record_property):
    Y, truth, _ = gen_bars(BarsConfig(distribution=name), np.random.default_rng([5, 0]))
    rows = bars_restarts(Y, truth, name, bars_em_config(), seeds=range(100))
    best = max(rows, key=lambda r: r["loglik"])
    all_bars = sum(r["bars_recovered"] == 10 for r in rows)
    above = sum(r["loglik_gap"] >= 0 for r in rows)
    stalled = sum(r["bars_recovered"] < 10 or r["loglik_gap"] < 0 for r in rows)
    record_property(
        "detail",
        f"best gap {best['loglik_gap']:+.3f} with {best['bars_recovered']} bars; all bars in {all_bars}/100, "
        f"at or above truth in {above}/100, local optima in {stalled}/100",
    )
    assert best["loglik_gap"] >= 0 and best["bars_recovered"] == 10
    assert stalled > 0


# ---------------------------------------------------------------------------
# 6. reliability trend


@criterion(6, "binary-model reliability is non-increasing in pi (one inversion allowed), 50 runs per level")
@pytest.mark.slow
def test_c06_reliability_trend(record_property):
    pis = [0.2, 0.3, 0.4, 0.5]
    _, summary = reliability_sweep(pis, 50, BarsConfig(distribution="bernoulli"), bars_em_config(), seed=6)
    frac = [s["frac_above_truth"] for s in summary]
    inversions = sum(b > a for a, b in zip(frac, frac[1:]))
    record_property("detail", "fraction above truth " + ", ".join(f"pi={p}: {f:.2f}" for p, f in zip(pis, frac)) + f"; inversions {inversions}")
    assert inversions <= 1


# ---------------------------------------------------------------------------
# 7. truncated vs exact


@criterion(7, "truncated EM with the full state space equals exact EM to 1e-12 (H <= 8)")
@pytest.mark.parametrize("name", DIST_NAMES)
def test_c07_truncated_equals_exact(name, record_property):
    dist = get_distribution(name)
    worst = 0.0
    for H in (2, 5, 8):
        rng = np.random.default_rng([7, H])
        _, Y = sample_dataset(random_params(dist, rng, H, 6), dist, 150, rng)
        e_p, e_t = run_em(Y, dist, EMConfig(H=H, iterations=10, early_stop=False, chunk_size=64, seed=H))
        t_p, t_t, K = run_tvem(Y, dist, TVEMConfig(H=H, iterations=10, chunk_size=64, seed=H, evo=EvoConfig(S=2**H - 1)), return_state=True)
        assert np.array_equal(K, np.broadcast_to(enumerate_states(H), K.shape))
        q_t = np.array([truncated_weights(y, enumerate_states(H), t_p, dist).log_weights for y in Y[:20]])
        q_e = np.array([exact_posterior(y, e_p, dist).log_weights for y in Y[:20]])
        diffs = [
            np.max(np.abs(t_p.W - e_p.W) / np.maximum(np.abs(e_p.W), 1.0)),
            np.max(np.abs(t_p.pi - e_p.pi)),
            np.max(np.abs(t_t.lower_bounds - e_t.lower_bounds) / np.abs(e_t.lower_bounds)),
            np.max(np.abs(np.exp(q_t) - np.exp(q_e))),
        ]
        worst = max(worst, *map(float, diffs))
    record_property("detail", f"largest relative difference over W, pi, bound trace, posteriors: {worst:.1e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------------------
# 8. Gaussian variance path


@criterion(8, "Gaussian variance update equals V - W^2 of the generic update to 1e-10")
def test_c08_gaussian_variance_identity(record_property):
    dist = get_distribution("gaussian")
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(500):
        N, D, H = int(rng.integers(2, 60)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        Y = rng.normal(rng.uniform(-20, 20), rng.uniform(0.1, 5), (N, D))
        exp_A = rng.dirichlet(np.full(H, rng.uniform(0.2, 3)), size=(N, D))
        acc = accumulate_expectations(exp_A, rng.random((N, H)), dist.sufficient_statistics(Y))
        old = ModelParams(pi=np.full(H, 0.3), W=np.stack([np.zeros((D, H)), np.ones((D, H))]))
        W = m_step_dictionaries(acc, old, dist)
        composed = np.maximum(W[1] - W[0] ** 2, 1e-6)
        direct = gaussian_sigma_update(exp_A, Y, W[0])
        worst = max(worst, float(np.max(np.abs(composed - direct) / np.maximum(direct, 1.0))))
    record_property("detail", f"max relative difference {worst:.1e} over 500 random accumulators")
    assert worst <= 1e-10


# ---------------------------------------------------------------------------
# 9. weighted-mean form for T_1(y) = y


@criterion(9, "generic l=1 update equals the weighted data mean bit for bit when T_1(y) = y")
@pytest.mark.parametrize("name", ["poisson", "exponential", "bernoulli"])
def test_c09_weighted_mean_form(name, record_property):
    dist = get_distribution(name)
    rng = np.random.default_rng([9, DIST_NAMES.index(name)])
    for _ in range(200):
        N, D, H = int(rng.integers(1, 80)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        params = random_params(dist, rng, H, D)
        _, Y = sample_dataset(params, dist, N, rng)
        exp_A = rng.dirichlet(np.ones(H), size=(N, D))
        acc = accumulate_expectations(exp_A, rng.random((N, H)), dist.sufficient_statistics(Y))
        ref = weighted_mean_update(exp_A, Y)
        W = m_step_dictionaries(acc, params, dist)[0]
        # the clamp only acts on degenerate data (e.g. all-zero counts)
        inside = dist.clamp(ref[..., None])[..., 0] == ref
        assert np.array_equal(W[inside], ref[inside])
    record_property("detail", "200 random instances identical")


# ---------------------------------------------------------------------------
# 10. noise-type selection


@criterion(10, "noise-type selection picks the generating family in >= 4 of 5 seeds")
@pytest.mark.slow
@pytest.mark.parametrize("kind", ["gaussian", "gamma"])
def test_c10_noise_type_selection(kind, record_property):
    wins, margins = 0, []
    for seed in range(5):
        Y, _ = noisy_bars(kind, np.random.default_rng([7, seed]))
        rep = select_noise_model(Y, ["gaussian", "gamma"], SelectionConfig(restarts=5, seed=seed))
        fe = {r["candidate"]: r["free_energy_per_datapoint"] for r in rep["results"]}
        other = "gamma" if kind == "gaussian" else "gaussian"
        margins.append(fe[kind] - fe[other])
        wins += rep["winner"] == kind
    record_property("detail", f"{wins}/5 correct; free-energy margins per datapoint " + ", ".join(f"{m:+.3f}" for m in margins))
    assert wins >= 4


# ---------------------------------------------------------------------------
# 11. denoising


def _desk_run(noise, peak, cfg_doc, size=None):
    img_cfg = cfg_doc["image"]
    clean = rescale_peak(load_test_image(img_cfg["name"], size or img_cfg["size"]), peak)
    noisy = add_noise(clean, noise, np.random.default_rng(0))
    d = cfg_doc["denoise"]
    dcfg = DenoiseConfig(H=d["H"], S=d["S"], patch_side=d["patch_side"], stride=d["stride"], iterations=d["iterations"], seed=0)
    est, _, _ = denoise(noisy, noise, dcfg)
    return direct_psnr(clean.intensities, noisy.intensities, peak), direct_psnr(clean.intensities, est.intensities, peak)


@criterion(11, "desk-scale denoising (64x64 house crop) gains >= 1 dB PSNR")
@pytest.mark.slow
@pytest.mark.parametrize("noise, peak", [("poisson", 2.0), ("exponential", 255.0)])
def test_c11_desk_denoising(noise, peak, record_property):
    p_noisy, p_est = _desk_run(noise, peak, profile("b6-desk"))
    record_property("detail", f"noisy {p_noisy:.2f} dB -> denoised {p_est:.2f} dB (gain {p_est - p_noisy:+.2f})")
    assert p_est >= p_noisy + 1.0


@criterion(11, "desk-scale denoising (64x64 house crop) gains >= 1 dB PSNR")
@pytest.mark.slow
@pytest.mark.benchmark
def test_c11_full_scale_benchmark(record_property):
    doc = profile("b6-full")
    p_noisy, p_est = _desk_run("poisson", 2.0, doc)
    target = doc["targets_db"]["poisson_peak2_house"]
    record_property("detail", f"full profile: {p_est:.2f} dB vs target {target} +- 0.5")
    assert abs(p_est - target) <= 0.5


# ---------------------------------------------------------------------------
# 12. determinism


def _numeric_files(root):
    return {
        p.relative_to(root): p.read_bytes()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file() and p.suffix in (".csv", ".json", ".ndjson", ".pgm") and p.name != "timing.json"
    }


@criterion(12, "every command is byte-identical across worker counts with the same seed")
@pytest.mark.slow
def test_c12_determinism(tmp_path, record_property):
    # same directory for both runs: provenance records input paths
    root = tmp_path / "run"
    outs = {}
    for workers in ("1", "3"):
        shutil.rmtree(root, ignore_errors=True)
        w = ["--workers", workers, "--seed", "5", "--no-plots"]
        bars = root / "bars"
        assert cli_main(["gen-bars", "--dist", "gaussian", "--N", "600", "--out", str(bars)] + w) == 0
        data = str(bars / "data.csv")
        assert cli_main(["train", data, "--dist", "gaussian", "--exact", "--iterations", "10", "--out", str(root / "exact")] + w) == 0
        assert cli_main(["train", data, "--dist", "gamma", "--tvem", "--S", "20", "--iterations", "10", "--out", str(root / "tvem")] + w) == 0
        assert cli_main(["train", data, "--dist", "gamma", "--iterations", "5", "--warm-start", str(root / "exact" / "params.json"),
                         "--out", str(root / "warm")] + w) == 0
        assert cli_main(["eval-bars", str(root / "exact" / "params.json"), str(bars / "truth.json"), data,
                         "--out", str(root / "eval.json")]) == 0
        assert cli_main(["denoise", "--size", "32", "--H", "8", "--S", "6", "--patch-side", "4", "--stride", "2",
                         "--iterations", "10", "--out", str(root / "denoise")] + w) == 0
        assert cli_main(["select-noise", "--synthetic", "gamma", "--N", "300", "--H", "6", "--iterations", "8",
                         "--restarts", "2", "--out", str(root / "select")] + w) == 0
        assert cli_main(["reliability", "--pis", "0.2,0.4", "--runs", "2", "--N", "200", "--out", str(root / "rel")] + w) == 0
        outs[workers] = _numeric_files(root)
    assert outs["1"].keys() == outs["3"].keys()
    differing = [str(k) for k in outs["1"] if outs["1"][k] != outs["3"][k]]
    record_property("detail", f"{len(outs['1'])} numeric files compared, {len(differing)} differ")
    assert not differing, differing
