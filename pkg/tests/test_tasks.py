import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efmca.em import EMConfig, run_em
from efmca.errors import DomainError, ParameterError
from efmca.expfam import get_distribution
from efmca.model import ModelParams, compute_M, selection_indices
from efmca.tasks.bars import BarsConfig, bar_masks, evaluate_bars_run, gen_bars, reliability_sweep, truth_params
from efmca.tasks.denoise import DenoiseConfig, denoise, posterior_mean_estimate
from efmca.tasks.imaging import (
    ImageTensor,
    add_noise,
    anscombe,
    extract_patches,
    inverse_anscombe,
    load_test_image,
    psnr,
    read_pgm,
    reassemble,
    rescale_peak,
    synthetic_house,
    write_pgm,
)
from efmca.tasks.noise_type import SelectionConfig, noisy_bars, select_noise_model

from conftest import DIST_NAMES


def direct_psnr(a, b, peak):
    mse = sum((x - y) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))) / np.size(a)
    return 10 * math.log10(peak**2 / mse)


# -- bars ----------------------------------------------------------------------


@pytest.mark.parametrize("name, bar, bg", [("exponential", 10.0, 1.0), ("bernoulli", 0.99, 0.01), ("poisson", 10.0, 1.0)])
def test_bars_defaults(name, bar, bg):
    Y, truth, S = gen_bars(BarsConfig(distribution=name, N=50), np.random.default_rng(0))
    M = compute_M(truth, name)
    assert Y.shape == (50, 25) and S.shape == (50, 10) and M.shape == (25, 10)
    assert np.all((M == bar).sum(axis=0) == 5)
    assert np.all((M == bg).sum(axis=0) == 20)
    assert np.all(truth.pi == 0.2)


def test_bar_masks_cover_rows_and_columns():
    m = bar_masks(3).reshape(3, 3, 6)
    assert m[0, :, 0].all() and not m[1:, :, 0].any()
    assert m[:, 2, 5].all() and not m[:, :2, 5].any()


def test_bars_config_rejects_invalid_values():
    with pytest.raises(ParameterError):
        BarsConfig(distribution="bernoulli", bar_value=2.0).validate()
    with pytest.raises(ParameterError):
        BarsConfig(pi_gen=1.5).validate()


def test_evaluate_truth_and_permutation():
    cfg = BarsConfig(distribution="poisson", N=200)
    Y, truth, _ = gen_bars(cfg, np.random.default_rng(1))
    rep = evaluate_bars_run(truth, truth, "poisson", Y)
    assert rep["bars_recovered"] == 10 and rep["loglik_gap"] == 0.0
    perm = np.random.default_rng(2).permutation(10)
    shuffled = ModelParams(pi=truth.pi[perm], W=truth.W[:, :, perm])
    rep = evaluate_bars_run(shuffled, truth, "poisson", Y)
    assert rep["bars_recovered"] == 10
    assert rep["loglik_gap"] == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ParameterError):
        evaluate_bars_run(ModelParams(pi=[0.5], W=[[[1.0]]]), truth, "poisson")


def test_evaluate_counts_a_broken_column():
    truth = truth_params(BarsConfig(distribution="poisson"))
    W = truth.W.copy()
    W[0, :, 3] = 1.0  # flat column: no bar
    rep = evaluate_bars_run(ModelParams(pi=truth.pi, W=W), truth, "poisson")
    assert rep["bars_recovered"] == 9


def relative_drift(W, ref):
    return np.linalg.norm(W - ref) / np.linalg.norm(ref)


def complete_data_estimate(Y, S, truth, name):
    """Per-entry mean of y_d over the datapoints where cause h truly wins d."""
    sel = selection_indices(S, compute_M(truth, name))
    W = np.zeros(truth.W.shape[1:])
    for d in range(W.shape[0]):
        for h in range(W.shape[1]):
            W[d, h] = Y[sel[:, d] == h, d].mean()
    return W


TRUTH_DRIFT_CASES = [
    *DIST_NAMES[:2],
    # exponential noise has sd = mean, so ~200 selections per bar entry leave a
    # sampling error near 1/sqrt(200) = 7% even for the complete-data estimate
    pytest.param("exponential", marks=pytest.mark.xfail(strict=True, reason="sampling error of W exceeds 5% at N=1000")),
    *DIST_NAMES[3:],
]


@pytest.mark.parametrize("name", TRUTH_DRIFT_CASES)
def test_truth_init_stays_near_truth(name):
    Y, truth, _ = gen_bars(BarsConfig(distribution=name), np.random.default_rng([6, 1]))
    params, _ = run_em(Y, name, EMConfig(H=10, iterations=20, early_stop=False), init=truth)
    assert relative_drift(params.W, truth.W) < 0.05


@pytest.mark.parametrize("name", DIST_NAMES)
def test_truth_init_stays_near_complete_data_estimate(name):
    Y, truth, S = gen_bars(BarsConfig(distribution=name), np.random.default_rng([6, 1]))
    params, _ = run_em(Y, name, EMConfig(H=10, iterations=20, early_stop=False), init=truth)
    ref = complete_data_estimate(Y, S, truth, name)
    assert relative_drift(params.W[0], ref) < 0.05


def test_reliability_sweep_shape():
    cfg = BarsConfig(distribution="bernoulli", N=100)
    rows, summary = reliability_sweep([0.2, 0.4], 2, cfg, EMConfig(H=10, iterations=3, early_stop=False))
    assert len(rows) == 4 and [s["pi"] for s in summary] == [0.2, 0.4]
    assert all(0.0 <= s["frac_above_truth"] <= 1.0 for s in summary)


# -- images --------------------------------------------------------------------


@pytest.mark.parametrize("maxval, binary", [(255, True), (255, False), (1023, True), (65535, False)])
def test_pgm_round_trip(tmp_path, maxval, binary):
    img = np.random.default_rng(0).integers(0, maxval + 1, (5, 7)).astype(float)
    write_pgm(tmp_path / "a.pgm", img, maxval=maxval, binary=binary)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm").intensities, img)


def test_pgm_header_comments_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n# made by hand\n2 2\n# max\n9\n1 2\n3 9\n")
    assert read_pgm(tmp_path / "c.pgm").intensities.tolist() == [[1, 2], [3, 9]]
    (tmp_path / "bad.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "short.pgm")


def test_rescale_and_poisson_noise():
    img = rescale_peak(synthetic_house(64), 2.0)
    assert img.intensities.max() == 2.0 and img.peak == 2.0
    flat = ImageTensor(np.full((200, 200), 4.0))
    noisy = add_noise(flat, "poisson", np.random.default_rng(3))
    assert noisy.intensities.mean() == pytest.approx(4.0, abs=0.05)
    assert noisy.intensities.var() == pytest.approx(4.0, abs=0.15)
    again = add_noise(flat, "poisson", np.random.default_rng(3))
    assert np.array_equal(noisy.intensities, again.intensities)


@pytest.mark.parametrize("name", ["exponential", "gamma", "gaussian"])
def test_noise_means(name):
    flat = ImageTensor(np.full((300, 300), 5.0))
    noisy = add_noise(flat, name, np.random.default_rng(4), variance=2.0, shape=8.0)
    assert noisy.intensities.mean() == pytest.approx(5.0, rel=0.02)


def test_noise_domain_checks():
    with pytest.raises(DomainError):
        add_noise(ImageTensor([[1.0, -1.0]]), "poisson", np.random.default_rng(0))
    zero = add_noise(ImageTensor(np.zeros((10, 10))), "exponential", np.random.default_rng(0))
    assert np.all(zero.intensities > 0)


def test_coverage_oracle(oracles):
    o = oracles["coverage_64"]
    grid = extract_patches(np.zeros((o["n"], o["n"])), o["patch"], o["stride"])
    vals, counts = np.unique(grid.coverage, return_counts=True)
    assert vals.tolist() == o["values"] and counts.tolist() == o["counts"]
    assert len(grid.patches) == o["n_patches"]


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 20), st.integers(4, 20), st.integers(1, 4), st.integers(1, 4))
def test_reassemble_of_own_patches_is_identity(h, w, p, stride):
    stride = min(stride, p)
    img = np.random.default_rng(h * 100 + w).random((h, w))
    grid = extract_patches(img, p, stride)
    assert grid.coverage.min() >= 1
    assert np.allclose(reassemble(grid, grid.patches).intensities, img, rtol=0, atol=1e-15)


def test_reassemble_examples():
    img = np.arange(36.0).reshape(6, 6)
    grid = extract_patches(img, 3, 3)
    assert np.array_equal(reassemble(grid, grid.patches).intensities, img)
    grid = extract_patches(img, 2, 1)
    assert np.all(reassemble(grid, np.full(grid.patches.shape, 7.0)).intensities == 7.0)
    with pytest.raises(ParameterError):
        extract_patches(np.zeros((3, 3)), 4, 1)
    with pytest.raises(ParameterError, match="uncovered"):
        extract_patches(np.zeros((8, 8)), 2, 3)


def test_psnr(oracles):
    o = oracles["psnr_reference"]
    clean = ImageTensor(np.full((4, 4), 255.0))
    clean.intensities[0, 0] = 0.0
    noisy = ImageTensor(clean.intensities + o["offset"])
    assert psnr(clean, noisy) == pytest.approx(o["psnr"], abs=1e-12)
    assert psnr(clean, noisy) == pytest.approx(48.1308, abs=1e-4)
    assert psnr(clean, clean) == math.inf
    with pytest.raises(ParameterError):
        psnr(clean, ImageTensor(np.zeros((2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_psnr_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 5)) * 10, rng.random((6, 5)) * 10
    perm = rng.permutation(30)
    p1 = psnr(a, b, peak=10.0)
    assert p1 == pytest.approx(psnr(a.ravel()[perm].reshape(6, 5), b.ravel()[perm].reshape(6, 5), peak=10.0), rel=1e-12)
    assert p1 == pytest.approx(direct_psnr(a, b, 10.0), rel=1e-12)


def test_anscombe(oracles):
    assert anscombe(0.0) == pytest.approx(2 * math.sqrt(0.375))
    z = np.random.default_rng(0).random(100) * 50
    assert np.allclose(inverse_anscombe(anscombe(z)), z, rtol=0, atol=1e-12)
    with pytest.raises(DomainError):
        anscombe([-1.0])
    for lam in ("20", "50"):
        mc = np.var(anscombe(np.random.default_rng(int(lam)).poisson(float(lam), 200_000)))
        assert mc == pytest.approx(oracles["anscombe_mc"][lam], rel=1e-12)
        assert mc == pytest.approx(1.0, rel=0.2)


def test_test_images():
    img = synthetic_house(64)
    assert img.shape == (64, 64) and 0 <= img.intensities.min() and img.intensities.max() <= 255
    assert np.array_equal(load_test_image("house", 32).intensities, synthetic_house(32).intensities)
    with pytest.raises(ParameterError):
        load_test_image("lena")


# -- denoising -------------------------------------------------------------------


def test_posterior_mean_recovers_noiseless_patch():
    dist = get_distribution("gaussian")
    patches = np.array([[1.0, 5.0, 2.0], [7.0, 0.5, 3.0]])
    mean = patches.T
    params = ModelParams(pi=[0.01, 0.01], W=np.stack([mean, mean**2 + 1e-4]))
    K = np.broadcast_to(np.array([[1, 0], [0, 1], [1, 1]], dtype=bool), (2, 3, 2))
    est = posterior_mean_estimate(patches, K, params, dist)
    assert np.allclose(est, patches, atol=1e-6)


def test_small_denoise_runs_and_improves():
    clean = rescale_peak(synthetic_house(24), 20.0)
    noisy = add_noise(clean, "poisson", np.random.default_rng(0))
    est, trace, params = denoise(noisy, "poisson", DenoiseConfig(H=8, S=6, patch_side=4, stride=2, iterations=15))
    assert est.shape == clean.shape
    assert params.H == 8 and len(trace.records) == 16
    assert psnr(clean, est) > psnr(clean, noisy)


# -- noise-type selection ----------------------------------------------------------


def test_single_candidate_wins():
    Y, _ = noisy_bars("gaussian", np.random.default_rng(0), N=60)
    rep = select_noise_model(Y, ["gaussian"], SelectionConfig(iterations=3, restarts=1))
    assert rep["winner"] == "gaussian" and len(rep["results"]) == 1


def test_incompatible_candidate_skipped():
    Y = np.abs(np.random.default_rng(0).normal(5, 1, (40, 4)))
    Y[3, 2] = 0.0
    rep = select_noise_model(Y, ["gamma", "gaussian"], SelectionConfig(H=3, iterations=3, restarts=1))
    assert rep["winner"] == "gaussian"
    assert rep["skipped"][0]["candidate"] == "gamma"
    assert "row 3, column 2" in rep["skipped"][0]["reason"]


def test_noisy_bars():
    Y, truth = noisy_bars("gamma", np.random.default_rng(1), N=30)
    assert Y.shape == (30, 25) and np.all(Y > 0) and truth.L == 2
    with pytest.raises(ValueError):
        noisy_bars("poisson", np.random.default_rng(1))
