"""Command-line front end.

Exit codes: 0 success, 2 usage/configuration error, 3 data or domain error,
4 capacity error (exact enumeration requested for too many latents).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .em import MAX_EXACT_LATENTS, EMConfig, run_em, transfer_params
from .errors import CapacityError, DomainError, EfMcaError, ParameterError
from .expfam import DISTRIBUTIONS, get_distribution
from .model import compute_M, save_params
from .tasks import bars as bars_mod
from .tasks import denoise as denoise_mod
from .tasks import imaging
from .tasks import noise_type
from .tvem import EvoConfig, TVEMConfig, run_tvem

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CAPACITY = 0, 2, 3, 4
AUTO_EXACT_MAX_H = 12


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def load_profile(name):
    try:
        text = resources.files("efmca.profiles").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise UsageError(f"unknown profile {name!r}; available: b1, b6-full, b6-desk") from None
    return json.loads(text)


_DIST = {"type": "string", "enum": sorted(DISTRIBUTIONS)}
_POS = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "integer", "minimum": 0}
_PROB = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}

SCHEMAS = {
    "gen-bars": {
        "R": _POS, "N": _POS, "pi_gen": _PROB, "bar_value": {"type": "number"},
        "background_value": {"type": "number"}, "variance": {"type": "number", "exclusiveMinimum": 0},
        "distribution": _DIST, "seed": _NONNEG,
    },
    "train": {
        "distribution": _DIST, "link_mode": {"enum": ["max", "maxmagnitude"]}, "H": _POS, "S": _POS,
        "iterations": _NONNEG, "seed": _NONNEG, "pi_init": _PROB, "algorithm": {"enum": ["exact", "tvem", "auto"]},
        "fixed_point_passes": _POS, "m_step_guard": {"enum": ["backtrack", "none"]}, "early_stop": {"type": "boolean"},
        "evo": {
            "type": "object", "additionalProperties": False,
            "properties": {"parents_per_gen": _POS, "children_per_parent": _POS, "generations_per_estep": _NONNEG,
                           "bitflip_p": {"type": "number"}, "crossover_rate": {"type": "number"}},
        },
    },
    "denoise": {
        "noise": _DIST, "distribution": _DIST, "peak": {"type": "number", "exclusiveMinimum": 0}, "H": _POS, "S": _POS,
        "patch_side": _POS, "stride": _POS, "iterations": _NONNEG, "seed": _NONNEG, "image": {"enum": ["house", "camera"]},
        "size": _POS, "noise_variance": {"type": "number", "exclusiveMinimum": 0},
        "noise_shape": {"type": "number", "exclusiveMinimum": 0},
    },
    "select-noise": {
        "candidates": {"type": "array", "items": _DIST, "minItems": 1}, "H": _POS, "S": _POS, "iterations": _NONNEG,
        "restarts": _POS, "seed": _NONNEG, "algorithm": {"enum": ["exact", "tvem"]},
        "synthetic": {"enum": ["gaussian", "gamma"]}, "N": _POS,
    },
    "reliability": {"pis": {"type": "array", "items": _PROB, "minItems": 1}, "runs": _POS, "seed": _NONNEG, "N": _POS},
}


def validate_config(command, doc):
    schema = {"type": "object", "additionalProperties": False, "properties": SCHEMAS[command]}
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid {command} configuration at {where}: {exc.message}") from None
    return doc


def resolve_config(command, args, defaults):
    """Merge defaults < profile < --config file < explicit flags, then validate."""
    cfg = dict(defaults)
    profile = getattr(args, "profile", None)
    if profile:
        cfg.update(_profile_settings(command, load_profile(profile), args))
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for key in SCHEMAS[command]:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return validate_config(command, cfg)


def _profile_settings(command, prof, args):
    out = {}
    if command == "gen-bars" and "bars" in prof:
        out.update(prof["bars"])
        dist = getattr(args, "distribution", None) or "exponential"
        if dist in prof.get("values", {}):
            out["bar_value"], out["background_value"] = prof["values"][dist]
    elif command == "train" and "train" in prof:
        out.update(prof["train"])
    elif command == "denoise" and "denoise" in prof:
        out.update(prof["denoise"])
        out["image"], out["size"] = prof["image"]["name"], prof["image"]["size"]
    elif command == "reliability" and "reliability" in prof:
        out.update(prof["reliability"])
    return out


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def provenance(cfg, seed):
    return {"tool": "efmca", "version": __version__, "seed": seed, "config_hash": config_hash(cfg), "config": cfg}


# ---------------------------------------------------------------------------
# file helpers


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.generic):
        return _json_safe(x.item())
    return x


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(_json_safe(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_matrix_csv(path, X, prefix="d", meta=None, fmt="%.17g"):
    """One row per datapoint under a ``d0,...`` header; ``meta`` goes in a leading ``#`` comment."""
    X = np.atleast_2d(np.asarray(X))
    with open(path, "w") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(",".join(f"{prefix}{i}" for i in range(X.shape[1])) + "\n")
        np.savetxt(fh, X, delimiter=",", fmt=fmt)


def read_matrix_csv(path):
    try:
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise DomainError(f"cannot read dataset {path}: {exc.strerror}") from None
    if len(lines) < 2:
        raise DomainError(f"{path}: no data rows")
    try:
        Y = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DomainError(f"{path}: malformed CSV ({exc})") from None
    return Y


def write_series_csv(path, records, columns, meta=None):
    with open(path, "w") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(",".join(columns) + "\n")
        for r in records:
            fh.write(",".join(_fmt(r.get(c, "")) for c in columns) + "\n")


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trace(out, trace, meta):
    """NDJSON trace plus a CSV series; wall-clock times go to a separate file."""
    records = trace.without_timing()
    with open(out / "trace.ndjson", "w") as fh:
        fh.write(json.dumps({"kind": "header", "seed": trace.seed, "config": trace.config, **meta}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps({"kind": "iteration", **r}, sort_keys=True) + "\n")
    keys = set().union(*records)
    cols = [c for c in ("iter", "lower_bound", "exact_loglik", "pi_sum", "step", "decreased") if c in keys]
    write_series_csv(out / "lower_bound.csv", records, cols, meta)
    write_json(out / "timing.json", {"wall_time": [r["wall_time"] for r in trace.records]})


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _plots(args):
    if getattr(args, "no_plots", False):
        return None
    from . import plotting

    return plotting


# ---------------------------------------------------------------------------
# commands


def cmd_gen_bars(args):
    cfg = resolve_config("gen-bars", args, {"R": 5, "N": 1000, "pi_gen": 0.2, "distribution": "exponential", "seed": 0, "variance": 1.0})
    seed = cfg.pop("seed")
    bcfg = bars_mod.BarsConfig(**cfg).validate()
    full = {**bcfg.to_dict(), "seed": seed}
    Y, truth, S = bars_mod.gen_bars(bcfg, np.random.default_rng(seed))
    out = _out_dir(args.out)
    meta = provenance(full, seed)
    write_matrix_csv(out / "data.csv", Y, "d", meta)
    write_matrix_csv(out / "latents.csv", S.astype(int), "h", meta, fmt="%d")
    doc = truth.to_dict(bcfg.distribution)
    doc["provenance"] = meta
    write_json(out / "truth.json", doc)
    plots = _plots(args)
    if plots:
        plots.plot_fields(compute_M(truth, bcfg.distribution), out / "truth_fields.png", title="generating fields")
    print(f"wrote {len(Y)} datapoints to {out}")
    return EXIT_OK


def _load_params_file(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DomainError(f"cannot read parameters {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: invalid JSON ({exc})") from None
    doc.pop("provenance", None)
    from .model import ModelParams

    return ModelParams.from_dict(doc)


def cmd_train(args):
    defaults = {"distribution": "exponential", "H": 10, "iterations": 50, "seed": 0, "pi_init": 0.3, "algorithm": "auto",
                "link_mode": "max", "fixed_point_passes": 1, "m_step_guard": "backtrack", "early_stop": False}
    if args.exact:
        args.algorithm = "exact"
    elif args.tvem:
        args.algorithm = "tvem"
    cfg = resolve_config("train", args, defaults)
    dist = get_distribution(cfg["distribution"])
    Y = read_matrix_csv(args.data)
    dist.check_domain(Y)
    algo = cfg["algorithm"]
    if algo == "auto":
        algo = "exact" if cfg["H"] <= AUTO_EXACT_MAX_H else "tvem"
    init = None
    if args.warm_start:
        src, src_dist = _load_params_file(args.warm_start)
        init = transfer_params(src, src_dist, dist, cfg["link_mode"] if dist.domain == "real" else "max")
        if init.H != cfg["H"]:
            raise UsageError(f"warm-start parameters have H={init.H} but H={cfg['H']} was requested")
    common = dict(H=cfg["H"], iterations=cfg["iterations"], seed=cfg["seed"], pi_init=cfg["pi_init"],
                  link_mode=cfg["link_mode"], fixed_point_passes=cfg["fixed_point_passes"],
                  m_step_guard=cfg["m_step_guard"], early_stop=cfg["early_stop"], workers=args.workers)
    if algo == "exact":
        if cfg["H"] > MAX_EXACT_LATENTS:
            raise CapacityError(f"exact enumeration of H={cfg['H']} latents exceeds the guard of {MAX_EXACT_LATENTS}; use --tvem")
        params, trace = run_em(Y, dist, EMConfig(track_loglik=True, **common), init=init)
    else:
        evo = EvoConfig(S=cfg.get("S", 60), **cfg.get("evo", {}))
        params, trace = run_tvem(Y, dist, TVEMConfig(evo=evo, **common), init=init)
    cfg["algorithm"] = algo
    out = _out_dir(args.out)
    meta = provenance(cfg, cfg["seed"])
    save_params(out / "params.json", params, dist)
    doc = json.loads((out / "params.json").read_text())
    doc["provenance"] = meta
    write_json(out / "params.json", doc)
    write_trace(out, trace, meta)
    plots = _plots(args)
    if plots:
        plots.plot_lower_bounds([trace.lower_bounds], out / "lower_bound.png", title=f"{dist.name}, {algo}")
        plots.plot_fields(compute_M(params, dist), out / "fields.png", title="learned fields")
    print(f"{algo} EM: {len(trace.records) - 1} iterations, final lower bound {trace.lower_bounds[-1]:.6f}")
    return EXIT_OK


def cmd_denoise(args):
    defaults = {"noise": "poisson", "peak": 2.0, "seed": 0, "image": "house", "size": 64, "H": 32, "S": 20,
                "patch_side": 8, "stride": 4, "iterations": 100, "noise_variance": 1.0, "noise_shape": 10.0}
    cfg = resolve_config("denoise", args, defaults)
    cfg.setdefault("distribution", cfg["noise"])
    if args.input:
        try:
            clean = imaging.read_pgm(args.input)
        except OSError as exc:
            raise DomainError(f"cannot read image {args.input}: {exc.strerror}") from None
        except ValueError as exc:
            raise DomainError(str(exc)) from None
        source = str(args.input)
        cfg.pop("image")
        cfg.pop("size")
    else:
        clean = imaging.load_test_image(cfg["image"], cfg["size"])
        source = f"{cfg['image']}:{cfg['size']}"
    original_peak = clean.peak
    rng = np.random.default_rng(cfg["seed"])
    clean_p = imaging.rescale_peak(clean, cfg["peak"])
    noisy = imaging.add_noise(clean_p, cfg["noise"], rng, variance=cfg["noise_variance"], shape=cfg["noise_shape"])
    dcfg = denoise_mod.DenoiseConfig(H=cfg["H"], S=cfg["S"], patch_side=cfg["patch_side"], stride=cfg["stride"],
                                     iterations=cfg["iterations"], seed=cfg["seed"], workers=args.workers)
    est, trace, params = denoise_mod.denoise(noisy, cfg["distribution"], dcfg)
    p_noisy, p_est = imaging.psnr(clean_p, noisy), imaging.psnr(clean_p, est)
    out = _out_dir(args.out)
    meta = provenance(cfg, cfg["seed"])
    scale = original_peak / cfg["peak"]
    imaging.write_pgm(out / "noisy.pgm", noisy.intensities * scale)
    imaging.write_pgm(out / "denoised.pgm", est.intensities * scale)
    report = {
        "source": source, "noise": cfg["noise"], "model": get_distribution(cfg["distribution"]).name,
        "peak": cfg["peak"], "psnr_peak_definition": "maximum of the clean image after peak rescaling",
        "psnr_noisy": p_noisy, "psnr_denoised": p_est, "psnr_gain": p_est - p_noisy,
        "final_lower_bound": float(trace.lower_bounds[-1]), "provenance": meta,
    }
    write_json(out / "report.json", report)
    write_trace(out, trace, meta)
    plots = _plots(args)
    if plots:
        panels = [("clean", clean_p.intensities, cfg["peak"]), (f"noisy {p_noisy:.2f} dB", noisy.intensities, cfg["peak"]),
                  (f"denoised {p_est:.2f} dB", est.intensities, cfg["peak"])]
        plots.plot_denoising(panels, out / "denoising.png")
        plots.plot_lower_bounds([trace.lower_bounds], out / "lower_bound.png", ylabel="truncated lower bound")
    print(f"PSNR noisy {p_noisy:.2f} dB -> denoised {p_est:.2f} dB")
    return EXIT_OK


def cmd_select_noise(args):
    defaults = {"candidates": ["gaussian", "gamma"], "H": 10, "iterations": 50, "restarts": 5, "seed": 0,
                "algorithm": "exact", "S": 60, "N": 1000}
    if args.candidates is not None:
        args.candidates = [c.strip() for c in args.candidates.split(",") if c.strip()]
    cfg = resolve_config("select-noise", args, defaults)
    if args.data:
        Y = read_matrix_csv(args.data)
        cfg.pop("synthetic", None)
    elif cfg.get("synthetic"):
        Y, _ = noise_type.noisy_bars(cfg["synthetic"], np.random.default_rng([cfg["seed"], 1]), N=cfg["N"])
    else:
        raise UsageError("select-noise needs a DATA file or --synthetic gaussian|gamma")
    scfg = noise_type.SelectionConfig(H=cfg["H"], iterations=cfg["iterations"], restarts=cfg["restarts"], seed=cfg["seed"],
                                      algorithm=cfg["algorithm"], S=cfg["S"], workers=args.workers)
    report = noise_type.select_noise_model(Y, cfg["candidates"], scfg)
    out = _out_dir(args.out)
    meta = provenance(cfg, cfg["seed"])
    write_json(out / "selection.json", {**report, "provenance": meta})
    rows = [{"candidate": r["candidate"], "free_energy_per_datapoint": r["free_energy_per_datapoint"]} for r in report["results"]]
    write_series_csv(out / "selection.csv", rows, ["candidate", "free_energy_per_datapoint"], meta)
    plots = _plots(args)
    if plots and report["results"]:
        plots.plot_selection(report, out / "selection.png")
    for r in report["results"]:
        print(f"{r['candidate']:>12s}  {r['free_energy_per_datapoint']:.4f}")
    for s in report["skipped"]:
        print(f"{s['candidate']:>12s}  skipped: {s['reason']}")
    print(f"winner: {report['winner']}")
    return EXIT_OK


def cmd_eval_bars(args):
    trained, dist = _load_params_file(args.trained)
    truth, dist_t = _load_params_file(args.truth)
    if dist.name != dist_t.name:
        raise UsageError(f"trained model uses {dist.name} but the truth uses {dist_t.name}")
    Y = read_matrix_csv(args.data) if args.data else None
    if Y is not None:
        dist.check_domain(Y)
    report = bars_mod.evaluate_bars_run(trained, truth, dist, Y)
    cfg = {"trained": str(args.trained), "truth": str(args.truth), "data": str(args.data) if args.data else None}
    report["provenance"] = provenance(cfg, None)
    if args.out:
        write_json(Path(args.out), report)
    print(f"bars recovered: {report['bars_recovered']}/{report['H']}")
    if "loglik_gap" in report:
        print(f"log-likelihood gap (trained - truth): {report['loglik_gap']:.6f}")
    return EXIT_OK


def cmd_reliability(args):
    defaults = {"pis": [0.2, 0.3, 0.4, 0.5], "runs": 50, "seed": 0, "N": 1000}
    if args.pis is not None:
        args.pis = [float(p) for p in args.pis.split(",")]
    cfg = resolve_config("reliability", args, defaults)
    bcfg = bars_mod.BarsConfig(distribution="bernoulli", N=cfg["N"])
    rows, summary = bars_mod.reliability_sweep(cfg["pis"], cfg["runs"], bcfg, bars_mod.bars_em_config(workers=args.workers), cfg["seed"])
    out = _out_dir(args.out)
    meta = provenance(cfg, cfg["seed"])
    write_series_csv(out / "runs.csv", rows, ["pi", "run", "loglik_gap", "bars_recovered"], meta)
    write_json(out / "summary.json", {"summary": summary, "provenance": meta})
    plots = _plots(args)
    if plots:
        plots.plot_reliability(rows, out / "reliability.png")
    for s in summary:
        print(f"pi={s['pi']:.2f}  above truth {100 * s['frac_above_truth']:.0f}%  all bars {100 * s['frac_all_bars']:.0f}%")
    return EXIT_OK


def cmd_test_image(args):
    img = imaging.load_test_image(args.image, args.size)
    imaging.write_pgm(args.out, img, binary=not args.ascii)
    print(f"wrote {args.image} ({args.size}x{args.size}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    dists = sorted(DISTRIBUTIONS)
    p = argparse.ArgumentParser(prog="efmca", description="Maximal causes analysis with exponential-family observables.")
    p.add_argument("--version", action="version", version=f"efmca {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON file with command settings (unknown keys are rejected)")
        sp.add_argument("--workers", type=int, default=None, help="data-parallel threads (default: $EFMCA_WORKERS or 1)")
        sp.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-bars", help="generate a bars-test dataset")
    g.add_argument("--dist", dest="distribution", choices=dists, default=None)
    g.add_argument("--profile", default=None)
    g.add_argument("--R", type=int, default=None)
    g.add_argument("--N", type=int, default=None)
    g.add_argument("--pi", dest="pi_gen", type=float, default=None)
    g.add_argument("--bar", dest="bar_value", type=float, default=None)
    g.add_argument("--background", dest="background_value", type=float, default=None)
    g.add_argument("--variance", type=float, default=None)
    g.add_argument("--out", required=True)
    common(g)
    g.set_defaults(func=cmd_gen_bars)

    t = sub.add_parser("train", help="fit a model with exact or truncated EM")
    t.add_argument("data")
    t.add_argument("--dist", dest="distribution", choices=dists, default=None)
    t.add_argument("--profile", default=None)
    t.add_argument("--H", type=int, default=None)
    t.add_argument("--S", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--pi-init", dest="pi_init", type=float, default=None)
    t.add_argument("--link-mode", dest="link_mode", choices=["max", "maxmagnitude"], default=None)
    t.add_argument("--fixed-point-passes", dest="fixed_point_passes", type=int, default=None)
    t.add_argument("--m-step-guard", dest="m_step_guard", choices=["backtrack", "none"], default=None)
    algo = t.add_mutually_exclusive_group()
    algo.add_argument("--exact", action="store_true", help="enumerate all latent states")
    algo.add_argument("--tvem", action="store_true", help="truncated variational E-step")
    t.add_argument("--warm-start", dest="warm_start", default=None, help="params JSON of a trained model (any family)")
    t.add_argument("--out", required=True)
    common(t)
    t.set_defaults(func=cmd_train, algorithm=None)

    d = sub.add_parser("denoise", help="zero-shot denoising of a grayscale image")
    d.add_argument("input", nargs="?", default=None, help="clean PGM image (default: built-in test image)")
    d.add_argument("--noise", choices=["poisson", "exponential", "gaussian", "gamma"], default=None)
    d.add_argument("--dist", dest="distribution", choices=dists, default=None, help="model family (default: the noise family)")
    d.add_argument("--peak", type=float, default=None)
    d.add_argument("--profile", default=None)
    d.add_argument("--image", choices=["house", "camera"], default=None)
    d.add_argument("--size", type=int, default=None)
    d.add_argument("--H", type=int, default=None)
    d.add_argument("--S", type=int, default=None)
    d.add_argument("--patch-side", dest="patch_side", type=int, default=None)
    d.add_argument("--stride", type=int, default=None)
    d.add_argument("--iterations", type=int, default=None)
    d.add_argument("--noise-variance", dest="noise_variance", type=float, default=None)
    d.add_argument("--noise-shape", dest="noise_shape", type=float, default=None)
    d.add_argument("--out", required=True)
    common(d)
    d.set_defaults(func=cmd_denoise)

    s = sub.add_parser("select-noise", help="compare free energies of candidate noise models")
    s.add_argument("data", nargs="?", default=None)
    s.add_argument("--candidates", default=None, help="comma-separated families, e.g. gaussian,gamma")
    s.add_argument("--synthetic", choices=["gaussian", "gamma"], default=None, help="generate noisy bars instead of reading DATA")
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--H", type=int, default=None)
    s.add_argument("--S", type=int, default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--restarts", type=int, default=None)
    s.add_argument("--algorithm", choices=["exact", "tvem"], default=None)
    s.add_argument("--out", required=True)
    common(s)
    s.set_defaults(func=cmd_select_noise)

    e = sub.add_parser("eval-bars", help="score a trained bars model against the generating parameters")
    e.add_argument("trained")
    e.add_argument("truth")
    e.add_argument("data", nargs="?", default=None)
    e.add_argument("--out", default=None, help="report JSON path")
    e.set_defaults(func=cmd_eval_bars)

    r = sub.add_parser("reliability", help="bars recovery rate of the binary model across sparsity levels")
    r.add_argument("--pis", default=None, help="comma-separated prior values")
    r.add_argument("--runs", type=int, default=None)
    r.add_argument("--N", type=int, default=None)
    r.add_argument("--profile", default=None)
    r.add_argument("--out", required=True)
    common(r)
    r.set_defaults(func=cmd_reliability)

    ti = sub.add_parser("test-image", help="write a built-in test image as PGM")
    ti.add_argument("--image", choices=["house", "camera"], default="house")
    ti.add_argument("--size", type=int, default=256)
    ti.add_argument("--ascii", action="store_true", help="write P2 instead of P5")
    ti.add_argument("--out", required=True)
    ti.set_defaults(func=cmd_test_image)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"efmca: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as exc:
        print(f"efmca: capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (DomainError, ParameterError) as exc:
        print(f"efmca: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EfMcaError as exc:
        print(f"efmca: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"efmca: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
