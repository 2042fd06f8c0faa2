"""The max-superposition generative model.

Binary latents ``s`` (independent Bernoulli prior) select, for every
observable ``d``, the single cause ``h(d, s)`` with the largest mean
``M[d, h]`` among the active units.  The observable is then drawn from the
exponential-family member whose mean-value parameters are the selected
column ``(W[0, d, h], ..., W[L-1, d, h])``.

The all-zero latent state has no winning cause and is excluded from the
latent space: samplers reject it and posteriors never place mass on it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStateError, ParameterError
from .expfam import get_distribution

LINK_MODES = ("max", "maxmagnitude")
PI_FLOOR = 1e-4


@dataclass(frozen=True)
class ModelParams:
    """Prior probabilities and the ``L`` dictionaries of a model.

    ``W`` has shape ``(L, D, H)``; ``W[l, d, h]`` is the ``l``-th mean-value
    parameter of observable ``d`` when cause ``h`` wins.
    """

    pi: np.ndarray
    W: np.ndarray
    link_mode: str = "max"

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float)
        W = np.array(self.W, dtype=float)
        if W.ndim == 2:
            W = W[None]
        if pi.ndim != 1 or W.ndim != 3 or W.shape[2] != pi.shape[0]:
            raise ParameterError(f"inconsistent shapes: pi {pi.shape}, W {W.shape}")
        mode = str(self.link_mode).lower()
        if mode not in LINK_MODES:
            raise ParameterError(f"unknown link mode {self.link_mode!r}")
        pi.setflags(write=False)
        W.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "link_mode", mode)

    @property
    def H(self):
        return self.pi.shape[0]

    @property
    def D(self):
        return self.W.shape[1]

    @property
    def L(self):
        return self.W.shape[0]

    def columns(self):
        """Mean-value parameter vectors per ``(d, h)``, shape ``(D, H, L)``."""
        return np.moveaxis(self.W, 0, -1)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self, dist):
        dist = get_distribution(dist)
        if self.L != dist.L:
            raise ParameterError(f"{dist.name} needs L={dist.L} dictionaries, got {self.L}")
        if not np.all((self.pi > 0) & (self.pi < 1)):
            raise ParameterError("prior probabilities must lie strictly inside (0, 1)")
        dist.check_mean(self.columns())
        if self.link_mode == "maxmagnitude" and dist.domain != "real":
            raise ParameterError("maxmagnitude link requires observables with full real support")
        return self

    def to_dict(self, dist):
        dist = get_distribution(dist)
        return {
            "distribution": dist.name,
            "link_mode": self.link_mode,
            "H": self.H,
            "D": self.D,
            "L": self.L,
            "pi": self.pi.tolist(),
            "W": self.W.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        """Build and validate parameters from a JSON document; returns ``(params, dist)``."""
        try:
            dist = get_distribution(doc["distribution"])
            params = cls(pi=doc["pi"], W=doc["W"], link_mode=doc.get("link_mode", "max"))
            declared = (int(doc["H"]), int(doc["D"]), int(doc["L"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParameterError(f"malformed parameter document: {exc}") from exc
        if declared != (params.H, params.D, params.L):
            raise ParameterError(f"declared shape {declared} does not match arrays {(params.H, params.D, params.L)}")
        return params.validate(dist), dist


def save_params(path, params, dist):
    with open(path, "w") as fh:
        json.dump(params.to_dict(dist), fh)
        fh.write("\n")


def load_params(path):
    with open(path) as fh:
        return ModelParams.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# link


def compute_M(params, dist):
    """Matrix of per-cause observable means, shape ``(D, H)``."""
    dist = get_distribution(dist)
    return dist.mean_function(params.columns())


def _score(M, link_mode):
    return np.abs(M) if link_mode == "maxmagnitude" else M


def _as_states(s):
    s = np.asarray(s)
    if s.dtype != bool:
        s = s.astype(bool)
    return s


def selection_indices(states, M, link_mode="max"):
    """Winning cause per observable for each state.

    ``states`` has shape ``(..., H)``; the result has shape ``(..., D)``.
    Ties go to the lowest latent index.
    """
    states = _as_states(states)
    if not np.all(states.any(axis=-1)):
        raise DegenerateStateError("the all-zero latent state has no winning cause")
    score = _score(np.asarray(M, dtype=float), link_mode)
    H = states.shape[-1]
    if H > SPARSE_SELECTION_MIN_H:
        counts = states.sum(axis=-1)
        if counts.max() * 4 <= H:
            return _selection_sparse(states, score, int(counts.max()))
    # causes ranked per observable (stable: ties keep the lowest index first);
    # the winner is the first active cause in that ranking
    rank = np.argsort(-score, axis=1, kind="stable")  # (D, H)
    if H <= 52:
        # bit (H-1-r) marks the cause of rank r; sums of distinct powers of two
        # are exact in float64, and the highest set bit is the winner
        r_of = np.empty_like(rank)
        np.put_along_axis(r_of, rank, np.arange(H)[None], axis=1)
        codes = states.reshape(-1, H).astype(float) @ np.ldexp(1.0, H - 1 - r_of).T  # (m, D)
        r = H - np.frexp(codes)[1]
        sel = rank[np.arange(rank.shape[0]), r]
        return sel.reshape(states.shape[:-1] + (rank.shape[0],))
    first = states[..., rank].argmax(axis=-1)  # (..., D)
    return np.take_along_axis(np.broadcast_to(rank, first.shape + (H,)), first[..., None], axis=-1)[..., 0]


SPARSE_SELECTION_MIN_H = 64


def _selection_sparse(states, score, max_active):
    # Compare only the active causes of each state; inactive slots point at a -inf column.
    lead, H = states.shape[:-1], states.shape[-1]
    flat = states.reshape(-1, H)
    idx = np.argsort(~flat, axis=1, kind="stable")[:, :max_active]  # active units, ascending
    idx = np.where(np.arange(max_active) < flat.sum(axis=1)[:, None], idx, H)
    ext = np.concatenate([score, np.full((score.shape[0], 1), -np.inf)], axis=1)
    best = ext[:, idx].argmax(axis=2)  # (D, m)
    sel = np.take_along_axis(idx, best.T, axis=1)
    return sel.reshape(lead + (score.shape[0],))


def select_latent(d, s, M, link_mode="max"):
    """Index of the cause that wins observable ``d`` under state ``s``."""
    row = np.asarray(M, dtype=float)[d : d + 1]
    return int(selection_indices(np.asarray(s)[None], row, link_mode)[0, 0])


def selection_indicator(d, h, s, M, link_mode="max"):
    """1 if cause ``h`` wins observable ``d`` under state ``s``, else 0."""
    return int(select_latent(d, s, M, link_mode) == h)


@dataclass(frozen=True)
class LinkResult:
    selected_h: np.ndarray  # (D,)
    eta: np.ndarray  # (D, L)


def link_eta(s, params, dist):
    """Natural parameters of every observable under latent state ``s``."""
    dist = get_distribution(dist)
    M = compute_M(params, dist)
    sel = selection_indices(np.asarray(s)[None], M, params.link_mode)[0]
    cols = params.columns()[np.arange(params.D), sel]
    return LinkResult(selected_h=sel, eta=dist.phi(cols))


# ---------------------------------------------------------------------------
# densities


def log_prior(states, pi):
    """Unnormalized Bernoulli log prior of ``states`` (shape ``(..., H)``)."""
    states = _as_states(states)
    pi = np.asarray(pi, dtype=float)
    return np.where(states, np.log(pi), np.log1p(-pi)).sum(axis=-1)


class ColumnTables:
    """Per-column natural parameters and log partitions for one parameter set.

    Cached once per EM iteration and reused for every state evaluation.
    """

    def __init__(self, params, dist):
        self.params = params
        self.dist = get_distribution(dist)
        self.M = compute_M(params, self.dist)
        self.eta = self.dist.phi(params.columns())  # (D, H, L)
        self.A = self.dist.log_partition(self.eta)  # (D, H)
        self.log_pi = np.log(params.pi)
        self.log_1m_pi = np.log1p(-params.pi)

    def selections(self, states):
        return selection_indices(states, self.M, self.params.link_mode)

    def log_prior(self, states):
        states = _as_states(states)
        return states @ (self.log_pi - self.log_1m_pi) + self.log_1m_pi.sum()


def data_terms(Y, dist):
    """Sufficient statistics ``(N, D, L)`` and summed log base measure ``(N,)``."""
    dist = get_distribution(dist)
    Y = dist.check_domain(Y)
    return dist.sufficient_statistics(Y), dist.log_base_measure(Y).sum(axis=-1)


def log_joint_shared(states, T, logh, tables, sel=None):
    """Log joints for a state list shared by all datapoints.

    ``states`` is ``(S, H)``, ``T`` is ``(N, D, L)``; returns ``(N, S)``.
    """
    if sel is None:
        sel = tables.selections(states)  # (S, D)
    n, D, L = T.shape
    d_idx = np.arange(D)
    eta = tables.eta[d_idx, sel]  # (S, D, L)
    per_state = tables.log_prior(states) - tables.A[d_idx, sel].sum(axis=1)
    # one matmul: [T, logh, 1] @ [eta, 1, per_state]^T
    X = np.empty((n, D * L + 2))
    X[:, : D * L] = T.reshape(n, D * L)
    X[:, -2] = logh
    X[:, -1] = 1.0
    Z = np.empty((sel.shape[0], D * L + 2))
    Z[:, : D * L] = eta.reshape(sel.shape[0], D * L)
    Z[:, -2] = 1.0
    Z[:, -1] = per_state
    return X @ Z.T


def log_joint_batch(K, T, logh, tables, sel=None):
    """Log joints for per-datapoint state sets ``K`` of shape ``(N, S, H)``."""
    if sel is None:
        sel = tables.selections(K)  # (N, S, D)
    d_idx = np.arange(sel.shape[2])
    eta = tables.eta[d_idx, sel]  # (N, S, D, L)
    out = np.einsum("ndl,nsdl->ns", T, eta)
    out -= tables.A[d_idx, sel].sum(axis=2)
    out += logh[:, None]
    out += tables.log_prior(K)
    return out


def log_joint(s, y, params, dist):
    """``log p(s | pi) + sum_d log p(y_d; eta_d(s))`` for one state and datapoint."""
    dist = get_distribution(dist)
    link = link_eta(s, params, dist)
    return float(log_prior(np.asarray(s)[None], params.pi)[0] + dist.log_pdf(np.asarray(y, dtype=float), link.eta).sum())


# ---------------------------------------------------------------------------
# sampling


def sample_latents(pi, n, rng):
    """Draw ``n`` nonzero latent states (zero draws are redrawn)."""
    pi = np.asarray(pi, dtype=float)
    out = rng.random((n, pi.shape[0])) < pi
    empty = ~out.any(axis=1)
    while empty.any():
        out[empty] = rng.random((int(empty.sum()), pi.shape[0])) < pi
        empty = ~out.any(axis=1)
    return out


def sample_dataset(params, dist, n, rng):
    """Ancestral sampling of ``n`` datapoints; returns ``(S, Y)``."""
    dist = get_distribution(dist)
    S = sample_latents(params.pi, n, rng)
    tables = ColumnTables(params, dist)
    sel = tables.selections(S)
    eta = tables.eta[np.arange(params.D), sel]
    return S, dist.sample(eta, rng)


def sample_datapoint(params, dist, rng):
    S, Y = sample_dataset(params, dist, 1, rng)
    return S[0], Y[0]
