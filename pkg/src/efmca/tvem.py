"""Truncated variational EM.

Each datapoint keeps a set ``K`` of ``S`` distinct nonzero latent states.
The variational posterior is the exact joint renormalized over ``K``, and
``K`` is improved between M-steps by a small evolutionary search whose
fitness is the log joint.  New sets keep the ``S`` best states among the old
set and the offspring, so the retained joint mass never shrinks.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .em import (
    ChunkEval,
    EMConfig,
    ExactBackend,
    RunTrace,
    _check_data,
    _initial,
    accumulate_batch,
    enumerate_states,
    fit,
    merge_accumulators,
    normalize_joints,
)
from .errors import ParameterError
from .expfam import get_distribution
from .model import ColumnTables, data_terms, log_joint_batch, log_joint_shared
from .parallel import chunk_slices, map_ordered, resolve_workers


@dataclass
class EvoConfig:
    S: int = 60
    parents_per_gen: int = 5
    children_per_parent: int = 4
    generations_per_estep: int = 2
    bitflip_p: float = 0.5  # flips per child ~ Geometric(p) on {1, 2, ...}
    crossover_rate: float = 0.5

    def validate(self):
        ints = (self.S, self.parents_per_gen, self.children_per_parent)
        if min(ints) < 1 or self.generations_per_estep < 0:
            raise ParameterError(f"invalid evolution settings: {self}")
        if not 0.0 < self.bitflip_p <= 1.0 or not 0.0 <= self.crossover_rate <= 1.0:
            raise ParameterError("bitflip_p must be in (0, 1] and crossover_rate in [0, 1]")
        return self


@dataclass
class TVEMConfig(EMConfig):
    iterations: int = 100
    early_stop: bool = False
    chunk_size: int = 256
    evo: EvoConfig = field(default_factory=EvoConfig)

    def validate(self):
        super().validate()
        self.evo.validate()
        return self

    def echo(self):
        d = super().echo()
        d.pop("max_latents")
        d.pop("track_loglik")
        return d


@dataclass(frozen=True)
class TruncatedPosterior:
    K: np.ndarray  # (S, H) bool
    log_weights: np.ndarray  # (S,)

    @property
    def weights(self):
        return np.exp(self.log_weights)


def n_states(H):
    return 2**H - 1 if H < 63 else np.iinfo(np.int64).max


def truncated_weights(y, K, params, dist):
    """Exact joint over ``K`` renormalized to sum to one."""
    dist = get_distribution(dist)
    K = np.asarray(K, dtype=bool)
    if K.ndim != 2 or K.shape[0] == 0:
        raise ValueError("K must be a nonempty (S, H) array of states")
    T, logh = data_terms(np.asarray(y, dtype=float)[None], dist)
    lj = log_joint_shared(K, T, logh, ColumnTables(params, dist))
    return TruncatedPosterior(K, normalize_joints(lj)[0][0])


# ---------------------------------------------------------------------------
# state-set bookkeeping


def state_keys(K):
    """Pack states ``(..., H)`` into uint64 words ``(..., W)`` for comparisons."""
    packed = np.packbits(K, axis=-1)
    pad = (-packed.shape[-1]) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(packed.shape[:-1] + (pad,), np.uint8)], axis=-1)
    return np.ascontiguousarray(packed).view(np.uint64)


def first_occurrence(K):
    """Mask ``(n, m)`` that is False for states repeating an earlier one in the same row."""
    keys = state_keys(K)
    n, m, nw = keys.shape
    order = np.lexsort([keys[..., w] for w in reversed(range(nw))], axis=-1)
    sk = np.take_along_axis(keys, order[..., None], axis=1)
    dup = np.zeros((n, m), dtype=bool)
    dup[:, 1:] = np.all(sk[:, 1:] == sk[:, :-1], axis=2)
    mask = np.empty((n, m), dtype=bool)
    np.put_along_axis(mask, order, ~dup, axis=1)
    return mask


def _top(K, lj, S):
    order = np.argsort(-lj, axis=1, kind="stable")[:, :S]
    return np.take_along_axis(K, order[..., None], axis=1), np.take_along_axis(lj, order, axis=1)


def _random_sparse(rng, shape, H, p):
    """Random states with at least two active units."""
    X = rng.random(shape + (H,)) < p
    few = X.sum(axis=-1) < 2
    if few.any():
        u = rng.random((int(few.sum()), H))
        pick = np.argsort(u, axis=1)[:, :2]
        Y = np.zeros((pick.shape[0], H), dtype=bool)
        np.put_along_axis(Y, pick, True, axis=1)
        X[few] = Y
    return X


def init_K(T, logh, tables, S, rng):
    """Singletons ranked by joint, padded with random sparse states up to ``S``."""
    n = T.shape[0]
    H = tables.params.H
    if S >= n_states(H):
        return np.broadcast_to(enumerate_states(H), (n, n_states(H), H)).copy()
    singles = np.eye(H, dtype=bool)
    lj = log_joint_shared(singles, T, logh, tables)
    if S <= H:
        order = np.argsort(-lj, axis=1, kind="stable")[:, :S]
        return singles[order]
    K = np.empty((n, S, H), dtype=bool)
    K[:, :H] = singles
    p = float(np.clip(tables.params.pi.mean(), 2.0 / H, 0.5))
    need = S - H
    for i in range(n):
        found = np.zeros((0, H), dtype=bool)
        while found.shape[0] < need:
            cand = np.concatenate([found, _random_sparse(rng, (2 * need + 4,), H, p)])
            found = cand[first_occurrence(cand[None])[0]][:need]
        K[i, H:] = found
    return K


def _select_parents(lj, P, rng):
    """``P`` distinct parents per row, drawn without replacement with weight ``S - rank``."""
    n, S = lj.shape
    rank = np.empty((n, S))
    np.put_along_axis(rank, np.argsort(-lj, axis=1, kind="stable"), np.arange(S, dtype=float)[None], axis=1)
    keys = np.log(S - rank) + rng.gumbel(size=(n, S))
    return np.argsort(-keys, axis=1, kind="stable")[:, :P]


def _offspring(parents, cfg, rng):
    n, P, H = parents.shape
    C = cfg.children_per_parent
    kids = np.repeat(parents, C, axis=1)
    m = P * C
    if P > 1 and cfg.crossover_rate > 0:
        own = np.repeat(np.arange(P), C)[None]
        mate = rng.integers(0, P - 1, size=(n, m))
        mate += mate >= own
        mates = np.take_along_axis(parents, mate[..., None], axis=1)
        cross = (rng.random((n, m)) < cfg.crossover_rate)[..., None] & (rng.random((n, m, H)) < 0.5)
        kids = np.where(cross, mates, kids)
    flips = np.minimum(rng.geometric(cfg.bitflip_p, size=(n, m)), H)
    rank = np.argsort(np.argsort(rng.random((n, m, H)), axis=2), axis=2)
    return kids ^ (rank < flips[..., None])


def evolve_chunk(K, lj, T, logh, tables, cfg, rng):
    """Run ``cfg.generations_per_estep`` generations on a chunk; returns ``(K, lj)``."""
    S = K.shape[1]
    for _ in range(cfg.generations_per_estep):
        P = min(cfg.parents_per_gen, S)
        parents = np.take_along_axis(K, _select_parents(lj, P, rng)[..., None], axis=1)
        kids = _offspring(parents, cfg, rng)
        valid = kids.any(axis=2)
        safe = np.where(valid[..., None], kids, K[:, :1])
        kid_lj = np.where(valid, log_joint_batch(safe, T, logh, tables), -np.inf)
        cand = np.concatenate([K, kids], axis=1)
        cand_lj = np.concatenate([lj, kid_lj], axis=1)
        cand_lj = np.where(first_occurrence(cand), cand_lj, -np.inf)
        K, lj = _top(cand, cand_lj, S)
    return K, lj


def evolve_K(y, K, params, dist, cfg, rng):
    """One round of evolutionary search for a single datapoint's state set."""
    dist = get_distribution(dist)
    K = np.asarray(K, dtype=bool)
    T, logh = data_terms(np.asarray(y, dtype=float)[None], dist)
    tables = ColumnTables(params, dist)
    lj = log_joint_batch(K[None], T, logh, tables)
    return evolve_chunk(K[None], lj, T, logh, tables, cfg, rng)[0][0]


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"EFMK"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def save_K(path, K):
    """Write state sets ``(N, S, H)`` as packed bits behind a small header."""
    K = np.asarray(K, dtype=bool)
    N, S, H = K.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, H, S, N))
        fh.write(np.packbits(K, axis=-1).tobytes())


def load_K(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated state-set checkpoint")
    magic, version, H, S, N = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a version-{_VERSION} state-set checkpoint")
    nbytes = (H + 7) // 8
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size)
    if body.size != N * S * nbytes:
        raise ValueError(f"{path}: expected {N * S * nbytes} payload bytes, found {body.size}")
    return np.unpackbits(body.reshape(N, S, nbytes), axis=-1, count=H).astype(bool)


# ---------------------------------------------------------------------------
# driver


class TruncatedBackend:
    """E-step over per-datapoint state sets, evolved once per iteration."""

    algorithm = "tvem"

    def __init__(self, dist, T, logh, chunks, H, cfg, workers=1, K=None):
        self.dist, self.T, self.logh, self.chunks, self.H = dist, T, logh, chunks, H
        self.cfg, self.workers = cfg, workers
        self.S = min(cfg.evo.S, n_states(H))
        self.full = self.S >= n_states(H)
        self.K0 = K
        # a full state set is the same list for every row: run the exact arithmetic on it
        self.exact = ExactBackend(dist, T, logh, chunks, H, workers) if self.full else None

    def _rng(self, iteration, c):
        return np.random.default_rng([self.cfg.seed, iteration, c])

    def evaluate(self, params, evals=None):
        if self.full:
            states = self.exact.states
            return [
                ChunkEval(ev.sel, ev.lj, np.broadcast_to(states, (len(ev.lj),) + states.shape))
                for ev in self.exact.evaluate(params)
            ]
        tables = ColumnTables(params, self.dist)

        def one(i):
            c = self.chunks[i]
            if evals is not None:
                K = evals[i].K
            elif self.K0 is not None:
                K = self.K0[c]
            else:
                # init draws use a stream distinct from every evolution step
                K = init_K(self.T[c], self.logh[c], tables, self.S, np.random.default_rng([self.cfg.seed, 2**32 - 1, i]))
            sel = tables.selections(K)
            return ChunkEval(sel, log_joint_batch(K, self.T[c], self.logh[c], tables, sel), K)

        return map_ordered(one, range(len(self.chunks)), self.workers)

    def refine(self, evals, params, iteration):
        if self.full or self.cfg.evo.generations_per_estep == 0:
            return evals
        tables = ColumnTables(params, self.dist)

        def one(i):
            c = self.chunks[i]
            K, lj = evolve_chunk(evals[i].K, evals[i].lj, self.T[c], self.logh[c], tables, self.cfg.evo, self._rng(iteration, i))
            return ChunkEval(tables.selections(K), lj, K)

        return map_ordered(one, range(len(evals)), self.workers)

    def row_context(self, evals, qs):
        if self.full:
            return self.exact.row_context(evals, qs)
        return [(ev.K, q) for ev, q in zip(evals, qs)]

    def row_scores(self, ctx, params):
        if self.full:
            return self.exact.row_scores(ctx, params)
        tables = ColumnTables(params, self.dist)
        d_idx = np.arange(params.D)

        def one(i):
            K, q = ctx[i]
            T = self.T[self.chunks[i]]
            sel = tables.selections(K)
            return np.einsum("ns,ndl,nsdl->d", q, T, tables.eta[d_idx, sel]) - np.einsum("ns,nsd->d", q, tables.A[d_idx, sel])

        return np.sum(map_ordered(one, range(len(ctx)), self.workers), axis=0)

    def accumulate(self, evals, qs):
        if self.full:
            return self.exact.accumulate(evals, qs)
        parts = map_ordered(
            lambda i: accumulate_batch(evals[i].K, evals[i].sel, qs[i], self.T[self.chunks[i]], self.H), range(len(evals)), self.workers
        )
        return merge_accumulators(parts)


def run_tvem(Y, dist, config, init=None, K=None, return_state=False):
    """Truncated variational EM; returns ``(params, trace)`` or ``(params, trace, K)``.

    ``K`` optionally restarts from saved state sets ``(N, S, H)``.  The trace
    flags every iteration whose truncated bound fell below the previous one.
    """
    dist = get_distribution(dist)
    cfg = config.validate()
    Y = _check_data(Y, dist)
    params = _initial(Y, dist, cfg, init)
    if K is not None:
        K = np.asarray(K, dtype=bool)
        S = min(cfg.evo.S, n_states(cfg.H))
        if K.shape != (Y.shape[0], S, cfg.H):
            raise ParameterError(f"state sets have shape {K.shape}; expected {(Y.shape[0], S, cfg.H)}")
        if not np.all(K.any(axis=2)):
            raise ParameterError("state sets contain the all-zero state")
    T, logh = data_terms(Y, dist)
    chunks = chunk_slices(Y.shape[0], cfg.chunk_size)
    backend = TruncatedBackend(dist, T, logh, chunks, cfg.H, cfg, resolve_workers(cfg.workers), K)
    echo = cfg.echo()
    echo["evo"] = dataclasses.asdict(cfg.evo)
    trace = RunTrace(seed=cfg.seed, config={"algorithm": "tvem", "distribution": dist.name, **echo})

    params, evals = fit(backend, params, dist, cfg, trace)
    lb = trace.lower_bounds
    for i, rec in enumerate(trace.records):
        rec["decreased"] = bool(i > 0 and lb[i] < lb[i - 1])
    if return_state:
        return params, trace, np.concatenate([ev.K for ev in evals], axis=0)
    return params, trace
