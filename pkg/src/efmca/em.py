"""Exact EM over the full (nonzero) latent space.

The E-step enumerates all ``2**H - 1`` nonzero states; the M-step applies
the fixed-point updates

    W[l, d, h] = sum_n <A_dh> T_l(y_d) / sum_n <A_dh>,    pi_h = mean_n <s_h>

where ``A_dh(s)`` indicates that cause ``h`` wins observable ``d``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, ParameterError
from .expfam import get_distribution
from .model import PI_FLOOR, ColumnTables, ModelParams, data_terms, log_joint_shared
from .parallel import chunk_slices, map_ordered, resolve_workers

MAX_EXACT_LATENTS = 20
DENOM_EPS = 1e-12
GAUSS_SIGMA_FLOOR = 1e-6
GAMMA_SIGMA_FLOOR = 1e-8


def enumerate_states(H):
    """All nonzero binary states of length ``H`` as an ``(2**H - 1, H)`` bool array.

    Row ``i`` is the binary expansion of ``i + 1`` with bit ``h`` in column ``h``.
    """
    idx = np.arange(1, 2**H, dtype=np.int64)
    return ((idx[:, None] >> np.arange(H)) & 1).astype(bool)


def _check_capacity(H, max_latents):
    if H > max_latents:
        raise CapacityError(
            f"exact enumeration of H={H} latents exceeds the guard of {max_latents}; "
            "use the truncated E-step (efmca.tvem) instead"
        )


def _normalize(lj):
    return lj - logsumexp(lj, axis=-1, keepdims=True)


@dataclass(frozen=True)
class ExactPosterior:
    states: np.ndarray  # (S, H) bool
    log_weights: np.ndarray  # (S,)

    @property
    def weights(self):
        return np.exp(self.log_weights)


def exact_posterior(y, params, dist, max_latents=MAX_EXACT_LATENTS):
    """Posterior over every nonzero state for one datapoint ``y``."""
    dist = get_distribution(dist)
    _check_capacity(params.H, max_latents)
    states = enumerate_states(params.H)
    T, logh = data_terms(np.asarray(y, dtype=float)[None], dist)
    lj = log_joint_shared(states, T, logh, ColumnTables(params, dist))[0]
    return ExactPosterior(states, _normalize(lj))


def _scatter(sel, weights, H):
    """Sum ``weights`` into a ``(D, H)`` table at ``[d, sel[..., d]]``."""
    D = sel.shape[-1]
    idx = (np.arange(D) * H + sel).ravel()
    w = np.broadcast_to(weights, sel.shape).ravel()
    return np.bincount(idx, weights=w, minlength=D * H).reshape(D, H)


def posterior_expectations(q, params, dist):
    """``(<s_h>, <A_dh>)`` under a posterior given as states plus log weights."""
    tables = ColumnTables(params, get_distribution(dist))
    states = np.asarray(q.states, dtype=bool)
    w = np.exp(q.log_weights)
    sel = tables.selections(states)  # (S, D)
    return w @ states, _scatter(sel, w[:, None], params.H)


# ---------------------------------------------------------------------------
# accumulation


@dataclass
class MStepAccumulator:
    numerators: np.ndarray  # (L, D, H)
    denominators: np.ndarray  # (D, H)
    pi_sums: np.ndarray  # (H,)
    n: int = 0

    @classmethod
    def zeros(cls, L, D, H):
        return cls(np.zeros((L, D, H)), np.zeros((D, H)), np.zeros(H), 0)

    def __add__(self, other):
        return MStepAccumulator(
            self.numerators + other.numerators,
            self.denominators + other.denominators,
            self.pi_sums + other.pi_sums,
            self.n + other.n,
        )


def merge_accumulators(parts):
    """Left fold in the given order (fixed order gives reproducible rounding)."""
    return reduce(lambda a, b: a + b, parts)


def accumulate_shared(states, sel, q, T, H):
    """Accumulator for posteriors ``q`` (N, S) over one shared state list."""
    q_tot = q.sum(axis=0)
    n, D, L = T.shape
    qT = (q.T @ T.reshape(n, D * L)).reshape(-1, D, L)
    num = np.stack([_scatter(sel, qT[:, :, l], H) for l in range(L)])
    return MStepAccumulator(num, _scatter(sel, q_tot[:, None], H), q_tot @ states, T.shape[0])


def accumulate_batch(K, sel, q, T, H):
    """Accumulator for per-datapoint state sets ``K`` (N, S, H)."""
    L = T.shape[2]
    num = np.stack([_scatter(sel, q[:, :, None] * T[:, None, :, l], H) for l in range(L)])
    return MStepAccumulator(num, _scatter(sel, q[:, :, None], H), np.einsum("ns,nsh->h", q, K), T.shape[0])


def accumulate_expectations(exp_A, exp_s, T):
    """Accumulator from per-datapoint expectations ``exp_A`` (N, D, H), ``exp_s`` (N, H)."""
    num = np.stack([np.einsum("ndh,nd->dh", exp_A, np.ascontiguousarray(T[:, :, l])) for l in range(T.shape[2])])
    return MStepAccumulator(num, exp_A.sum(axis=0), exp_s.sum(axis=0), exp_A.shape[0])


def weighted_mean_update(exp_A, Y):
    """``sum_n <A_dh> y_d / sum_n <A_dh>`` for one-statistic members (no guard)."""
    return np.einsum("ndh,nd->dh", exp_A, np.ascontiguousarray(Y, dtype=float)) / exp_A.sum(axis=0)


# ---------------------------------------------------------------------------
# M-step


def m_step_dictionaries(acc, params_old, dist, eps=DENOM_EPS):
    """New ``W`` (L, D, H); entries whose denominator is below ``eps`` are kept."""
    dist = get_distribution(dist)
    den = acc.denominators
    ok = den >= eps
    ratio = acc.numerators / np.where(ok, den, 1.0)
    W = np.where(ok[None], ratio, params_old.W)
    return np.moveaxis(dist.clamp(np.moveaxis(W, 0, -1)), -1, 0)


def m_step_pi(acc):
    return np.clip(acc.pi_sums / acc.n, PI_FLOOR, 1.0 - PI_FLOOR)


def gaussian_sigma_update(exp_A, Y, W_new, floor=GAUSS_SIGMA_FLOOR):
    """Weighted squared deviation from the updated means, shape (D, H)."""
    Y = np.asarray(Y, dtype=float)
    den = exp_A.sum(axis=0)
    dev = (Y[:, :, None] - W_new[None]) ** 2
    num = np.einsum("ndh,ndh->dh", exp_A, dev)
    return np.maximum(np.where(den >= DENOM_EPS, num / np.where(den >= DENOM_EPS, den, 1.0), floor), floor)


def gamma_sigma_update(exp_A, Y, W_new, floor=GAMMA_SIGMA_FLOOR):
    """``2 W^2 (log W - <log y>)`` with the selection-weighted average, shape (D, H)."""
    dist = get_distribution("gamma")
    Y = dist.check_domain(Y)
    den = exp_A.sum(axis=0)
    gap = np.log(W_new)[None] - np.log(Y)[:, :, None]
    num = 2.0 * W_new**2 * np.einsum("ndh,ndh->dh", exp_A, gap)
    return np.maximum(np.where(den >= DENOM_EPS, num / np.where(den >= DENOM_EPS, den, 1.0), floor), floor)


# ---------------------------------------------------------------------------
# objective


def free_energy(lj, log_q):
    """``sum q (lj - log q)`` over the last axis, treating ``0 log 0`` as 0."""
    q = np.exp(log_q)
    if np.all(np.isfinite(log_q)):
        return np.einsum("...s,...s->...", q, lj - log_q)
    terms = np.where(q > 0, q * (lj - np.where(q > 0, log_q, 0.0)), 0.0)
    return terms.sum(axis=-1)


def lower_bound(Y, posteriors, params, dist):
    """Free energy for per-datapoint posteriors (objects with ``states``/``K`` and ``log_weights``)."""
    dist = get_distribution(dist)
    tables = ColumnTables(params, dist)
    T, logh = data_terms(Y, dist)
    total = 0.0
    for n, q in enumerate(posteriors):
        states = getattr(q, "states", None)
        if states is None:
            states = q.K
        lj = log_joint_shared(np.asarray(states, dtype=bool), T[n : n + 1], logh[n : n + 1], tables)[0]
        total += float(free_energy(lj, np.asarray(q.log_weights)))
    return total


def exact_loglik(Y, params, dist, max_latents=MAX_EXACT_LATENTS, chunk_size=512):
    """``sum_n log sum_{s != 0} p(s, y_n)``."""
    dist = get_distribution(dist)
    _check_capacity(params.H, max_latents)
    T, logh = data_terms(Y, dist)
    tables = ColumnTables(params, dist)
    states = enumerate_states(params.H)
    sel = tables.selections(states)
    parts = [logsumexp(log_joint_shared(states, T[c], logh[c], tables, sel), axis=1).sum() for c in chunk_slices(T.shape[0], chunk_size)]
    return float(np.sum(parts))


# ---------------------------------------------------------------------------
# initialization


def init_params(Y, dist, H, rng, pi_init=0.3, jitter=(0.95, 1.05), link_mode="max"):
    """Columns from ``H`` random datapoints times multiplicative jitter.

    Two-statistic members get their second parameter from the per-observable
    data variance.
    """
    dist = get_distribution(dist)
    Y = np.asarray(Y, dtype=float)
    N = Y.shape[0]
    idx = rng.choice(N, size=H, replace=N < H)
    means = Y[idx].T * rng.uniform(jitter[0], jitter[1], size=(Y.shape[1], H))
    if dist.L == 1:
        w = dist.from_moments(means, None)
    else:
        var = np.broadcast_to(Y.var(axis=0)[:, None], means.shape)
        var = np.maximum(var, 1e-6 * (1.0 + means**2))
        if dist.domain == "positive-real":
            means = np.maximum(means, 1e-4)
        w = dist.from_moments(means, var)
    w = dist.clamp(w)
    pi = np.full(H, float(pi_init))
    return ModelParams(pi=pi, W=np.moveaxis(w, -1, 0), link_mode=link_mode).validate(dist)


def transfer_params(params, source, target, link_mode=None):
    """Re-express ``params`` of ``source`` in the family ``target`` by matching mean and variance."""
    source, target = get_distribution(source), get_distribution(target)
    mean, var = source.moments(params.columns())
    if target.domain == "positive-real":
        mean = np.maximum(mean, 1e-4)
    var = np.maximum(var, 1e-6 * (1.0 + mean**2))
    w = target.clamp(target.from_moments(mean, var))
    mode = link_mode or ("max" if target.domain != "real" else params.link_mode)
    return ModelParams(pi=params.pi, W=np.moveaxis(w, -1, 0), link_mode=mode).validate(target)


# ---------------------------------------------------------------------------
# trace


def params_hash(params):
    h = hashlib.sha1(np.ascontiguousarray(params.pi).tobytes())
    return h.hexdigest()[:12]


@dataclass
class RunTrace:
    seed: int
    config: dict
    records: list = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    @property
    def lower_bounds(self):
        return np.array([r["lower_bound"] for r in self.records])

    def without_timing(self):
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def to_ndjson(self, path, header=None):
        with open(path, "w") as fh:
            head = {"kind": "header", "seed": self.seed, "config": self.config}
            if header:
                head.update(header)
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps({"kind": "iteration", **r}, sort_keys=True) + "\n")

    @classmethod
    def from_ndjson(cls, path):
        head, records = {}, []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                doc = json.loads(line)
                kind = doc.pop("kind", "iteration")
                if kind == "header":
                    head = doc
                else:
                    records.append(doc)
        return cls(seed=head.get("seed", 0), config=head.get("config", {}), records=records)


def _converged(values, tol, patience):
    if len(values) <= patience:
        return False
    recent = np.asarray(values[-(patience + 1) :])
    rel = np.abs(np.diff(recent)) / np.maximum(np.abs(recent[1:]), 1e-300)
    return bool(np.all(rel < tol))


# ---------------------------------------------------------------------------
# driver

GUARD_MODES = ("backtrack", "none")


@dataclass
class EMConfig:
    H: int
    iterations: int = 50
    seed: int = 0
    pi_init: float = 0.3
    jitter: tuple = (0.95, 1.05)
    fixed_point_passes: int = 1
    link_mode: str = "max"
    m_step_guard: str = "backtrack"
    max_halvings: int = 12
    early_stop: bool = True
    tol: float = 1e-8
    patience: int = 5
    max_latents: int = MAX_EXACT_LATENTS
    workers: int | None = None
    chunk_size: int = 1024
    track_loglik: bool = False

    def validate(self):
        if self.H < 1 or self.iterations < 0 or self.fixed_point_passes < 1 or self.chunk_size < 1:
            raise ParameterError(f"invalid EM configuration: {self}")
        if not 0.0 < self.pi_init < 1.0:
            raise ParameterError("pi_init must lie in (0, 1)")
        if self.m_step_guard not in GUARD_MODES:
            raise ParameterError(f"m_step_guard must be one of {GUARD_MODES}")
        return self

    def echo(self):
        d = dataclasses.asdict(self)
        d["jitter"] = list(self.jitter)
        d.pop("workers")
        return d


def m_step(acc, params, dist, passes=1, reaccumulate=None):
    """Apply the fixed-point update ``passes`` times.

    Between passes the posterior weights stay fixed; ``reaccumulate(params)``
    re-evaluates which cause wins under the updated dictionaries.
    """
    pi = m_step_pi(acc)
    W = m_step_dictionaries(acc, params, dist)
    new = params.replace(pi=pi, W=W)
    for _ in range(passes - 1):
        acc = reaccumulate(new)
        new = new.replace(W=m_step_dictionaries(acc, new, dist))
    return new


def interpolate_params(old, new, step, dist):
    """Move ``step`` of the way from ``old`` to ``new`` dictionaries (mean-value space is convex)."""
    W = old.W + step * (new.W - old.W)
    return new.replace(W=np.moveaxis(dist.clamp(np.moveaxis(W, 0, -1)), -1, 0))


@dataclass
class ChunkEval:
    """Selections and log joints for one chunk of datapoints under one parameter set."""

    sel: np.ndarray
    lj: np.ndarray  # (n, S)
    K: np.ndarray | None = None  # (n, S, H) for per-datapoint state sets


class ExactBackend:
    """E-step over the full enumerated state list, shared by all datapoints."""

    algorithm = "exact"

    def __init__(self, dist, T, logh, chunks, H, workers=1):
        self.dist, self.T, self.logh, self.chunks, self.H, self.workers = dist, T, logh, chunks, H, workers
        self.states = enumerate_states(H)

    def evaluate(self, params, evals=None):
        tables = ColumnTables(params, self.dist)
        sel = tables.selections(self.states)
        return map_ordered(lambda c: ChunkEval(sel, log_joint_shared(self.states, self.T[c], self.logh[c], tables, sel)), self.chunks, self.workers)

    def refine(self, evals, params, iteration):
        return evals

    def row_context(self, evals, qs):
        """Posterior-weighted statistics ``sum_n q_ns T(y_nd)`` (S, D, L) and ``sum_n q_ns`` (S,)."""
        qT = sum((q.T @ self.T[c].reshape(len(q), -1)) for q, c in zip(qs, self.chunks))
        return qT.reshape(len(self.states), self.T.shape[1], self.T.shape[2]), sum(q.sum(axis=0) for q in qs)

    def row_scores(self, ctx, params):
        qT, q_tot = ctx
        tables = ColumnTables(params, self.dist)
        sel = tables.selections(self.states)
        d_idx = np.arange(sel.shape[1])
        return np.einsum("sdl,sdl->d", qT, tables.eta[d_idx, sel]) - q_tot @ tables.A[d_idx, sel]

    def accumulate(self, evals, qs):
        parts = map_ordered(
            lambda i: accumulate_shared(self.states, evals[i].sel, qs[i], self.T[self.chunks[i]], self.H), range(len(evals)), self.workers
        )
        return merge_accumulators(parts)


def normalize_joints(lj):
    """Return ``(log_q, q, log_z)`` for log joints ``lj`` (n, S), stabilized by the row max."""
    m = lj.max(axis=1, keepdims=True)
    e = np.exp(lj - m)
    z = e.sum(axis=1, keepdims=True)
    log_z = m + np.log(z)
    return lj - log_z, e / z, log_z[:, 0]


def _estep_stats(evals):
    log_qs, qs, F, loglik = [], [], 0.0, 0.0
    for ev in evals:
        log_q, q, log_z = normalize_joints(ev.lj)
        log_qs.append(log_q)
        qs.append(q)
        F += float(np.einsum("ns,ns->", q, ev.lj - log_q))
        loglik += float(log_z.sum())
    return log_qs, qs, F, loglik


def _expected_joint(evals, qs):
    """``sum_n <log p(s, y_n | theta)>_q``; differs from the bound only by the entropy of ``q``."""
    return float(sum(np.einsum("ns,ns->", q, ev.lj) for ev, q in zip(evals, qs)))


def _guarded_rows(backend, evals, qs, params, proposal, dist, max_halvings):
    """Per-observable step control for a proposed M-step.

    With ``q`` fixed the bound is a prior term plus one term per observable
    ``d``, and row ``d`` of the dictionaries only affects its own term (the
    winning cause of ``d`` depends on that row alone).  Each row is moved by
    the largest step in ``1, 1/2, ...`` that does not lower its term, or
    kept.  Returns the accepted parameters and the mean step over rows.
    """
    ctx = backend.row_context(evals, qs)
    base = backend.row_scores(ctx, params)
    W_old = params.W
    W_acc = W_old.copy()
    steps = np.zeros(W_old.shape[1])
    todo = np.ones(W_old.shape[1], dtype=bool)
    tau = 1.0
    for _ in range(max_halvings + 1):
        W_try = W_acc.copy()
        W_try[:, todo] = interpolate_params(params, proposal, tau, dist).W[:, todo]
        ok = todo & (backend.row_scores(ctx, proposal.replace(W=W_try)) >= base)
        W_acc[:, ok] = W_try[:, ok]
        steps[ok] = tau
        todo &= ~ok
        if not todo.any():
            break
        tau *= 0.5
    return proposal.replace(W=W_acc), float(steps.mean())


def fit(backend, params, dist, cfg, trace, extra_record=None):
    """Alternate E-steps from ``backend`` with (guarded) fixed-point M-steps.

    With ``m_step_guard="backtrack"`` no part of a proposed update may lower
    ``F(q_old, theta)`` (see :func:`_guarded_rows`).  Together with an exact
    E-step this makes the bound monotone.
    """
    t0 = time.perf_counter()
    evals = backend.evaluate(params)
    step = None
    for it in range(cfg.iterations + 1):
        evals = backend.refine(evals, params, it)
        log_qs, qs, F, loglik = _estep_stats(evals)
        rec = {"iter": it, "lower_bound": F, "pi_hash": params_hash(params), "pi_sum": float(params.pi.sum())}
        if cfg.track_loglik:
            rec["exact_loglik"] = loglik
        if step is not None:
            rec["step"] = step
        if extra_record is not None:
            rec.update(extra_record(it, evals, trace))
        rec["wall_time"] = time.perf_counter() - t0
        trace.append(**rec)
        if it == cfg.iterations or (cfg.early_stop and _converged(trace.lower_bounds, cfg.tol, cfg.patience)):
            break

        acc = backend.accumulate(evals, qs)

        def reaccumulate(p):
            return backend.accumulate(backend.evaluate(p, evals), qs)

        proposal = m_step(acc, params, dist, cfg.fixed_point_passes, reaccumulate)
        step = 1.0
        if cfg.m_step_guard == "backtrack":
            proposal, step = _guarded_rows(backend, evals, qs, params, proposal, dist, cfg.max_halvings)
        new_evals = backend.evaluate(proposal, evals)
        if cfg.m_step_guard == "backtrack" and _expected_joint(new_evals, qs) < _expected_joint(evals, qs):
            # only reachable through rounding; fall back to the prior update
            proposal = params.replace(pi=proposal.pi)
            new_evals = backend.evaluate(proposal, evals)
            step = 0.0
        params, evals = proposal, new_evals
    return params, evals


def run_em(Y, dist, config, init=None):
    """Exact EM; returns ``(params, trace)``.

    ``init`` may be a :class:`ModelParams` (warm start); otherwise columns
    are initialized from the data with ``config.seed``.
    """
    dist = get_distribution(dist)
    cfg = config.validate()
    Y = _check_data(Y, dist)
    _check_capacity(cfg.H, cfg.max_latents)
    params = _initial(Y, dist, cfg, init)
    T, logh = data_terms(Y, dist)
    backend = ExactBackend(dist, T, logh, chunk_slices(Y.shape[0], cfg.chunk_size), cfg.H, resolve_workers(cfg.workers))
    trace = RunTrace(seed=cfg.seed, config={"algorithm": "exact", "distribution": dist.name, **cfg.echo()})
    params, _ = fit(backend, params, dist, cfg, trace)
    return params, trace


def _check_data(Y, dist):
    Y = dist.check_domain(Y)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise ParameterError("Y must be a nonempty (N, D) array")
    return Y


def _initial(Y, dist, cfg, init):
    if init is None:
        rng = np.random.default_rng(cfg.seed)
        init = init_params(Y, dist, cfg.H, rng, cfg.pi_init, cfg.jitter, cfg.link_mode)
    init.validate(dist)
    if init.H != cfg.H or init.D != Y.shape[1]:
        raise ParameterError(f"initial parameters have H={init.H}, D={init.D}; expected H={cfg.H}, D={Y.shape[1]}")
    return init
