"""Exponential-family observables in mean-value parameterization.

Every distribution is written as ``h(y) exp(eta . T(y) - A(eta))``.  The
model couples latents to observables through the mean-value parameters
``w = <T(y)>`` and converts them to natural parameters with :meth:`phi`.

Arrays follow one convention throughout: observables have arbitrary shape
``(...)`` and parameter vectors carry a trailing axis of length ``L``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .errors import DomainError, ParameterError

__all__ = [
    "ExpFamily",
    "Bernoulli",
    "Poisson",
    "Exponential",
    "Gaussian",
    "Gamma",
    "DISTRIBUTIONS",
    "get_distribution",
    "register_distribution",
]

# Floors on mean-value parameters, applied by ``clamp``.
PROB_FLOOR = 1e-4
MEAN_FLOOR = 1e-4
GAUSS_VAR_FLOOR = 1e-6
GAMMA_GAP_FLOOR = 1e-6  # floor on log(w1) - w2, i.e. shape below ~5e5


class ExpFamily:
    """Abstract exponential-family member with ``L`` sufficient statistics.

    Subclasses provide the closed forms.  ``identity_first_statistic`` is
    True when ``T_1(y) = y``; only then may :meth:`mean_function` shortcut to
    the first mean-value parameter.
    """

    name: str = ""
    L: int = 1
    domain: str = "real"
    identity_first_statistic: bool = True
    # Natural parameter at which registration probes the mean map Jacobian.
    probe_natural: tuple[float, ...] = ()

    # -- closed forms supplied by subclasses -------------------------------

    def sufficient_statistics(self, y):
        raise NotImplementedError

    def log_base_measure(self, y):
        raise NotImplementedError

    def log_partition(self, eta):
        raise NotImplementedError

    def mean_map(self, eta):
        """Gradient of the log-partition: natural -> mean-value parameters."""
        raise NotImplementedError

    def phi(self, w):
        """Inverse mean map: mean-value -> natural parameters."""
        raise NotImplementedError

    def natural_mean(self, eta):
        """Mean of ``y`` under natural parameters ``eta``."""
        raise NotImplementedError

    def moments(self, w):
        """Return ``(mean, variance)`` of ``y`` for mean-value parameters ``w``."""
        raise NotImplementedError

    def from_moments(self, mean, var):
        """Mean-value parameters of the member with the given mean/variance.

        One-parameter members ignore ``var``.
        """
        raise NotImplementedError

    def clamp(self, w):
        raise NotImplementedError

    def valid_mean(self, w):
        raise NotImplementedError

    def valid_natural(self, eta):
        raise NotImplementedError

    def in_domain(self, y):
        raise NotImplementedError

    def _draw(self, eta, rng):
        raise NotImplementedError

    # -- generic machinery -------------------------------------------------

    def check_mean(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape[-1:] != (self.L,):
            raise ParameterError(f"{self.name}: mean parameters need trailing axis {self.L}, got {w.shape}")
        if not np.all(self.valid_mean(w)):
            raise ParameterError(f"{self.name}: mean-value parameters outside the valid region")
        return w

    def check_natural(self, eta):
        eta = np.asarray(eta, dtype=float)
        if eta.shape[-1:] != (self.L,):
            raise ParameterError(f"{self.name}: natural parameters need trailing axis {self.L}, got {eta.shape}")
        if not np.all(self.valid_natural(eta)):
            raise ParameterError(f"{self.name}: natural parameters outside the valid region")
        return eta

    def check_domain(self, y):
        y = np.asarray(y, dtype=float)
        ok = self.in_domain(y)
        if not np.all(ok):
            bad = np.argwhere(~np.asarray(ok))
            where = tuple(int(i) for i in bad[0]) if bad.size else ()
            raise DomainError(f"{self.name}: observable outside {self.domain} support at index {where}")
        return y

    def log_pdf(self, y, eta):
        """``log h(y) + eta . T(y) - A(eta)``, broadcast over leading axes."""
        y = self.check_domain(y)
        eta = self.check_natural(eta)
        T = self.sufficient_statistics(y)
        return self.log_base_measure(y) + np.sum(eta * T, axis=-1) - self.log_partition(eta)

    def mean_function(self, w):
        """Mean of ``y`` under ``p(y; phi(w))``."""
        w = np.asarray(w, dtype=float)
        if self.identity_first_statistic:
            return w[..., 0].copy()
        return self.natural_mean(self.phi(w))

    def sample(self, eta, rng, size=None):
        """Draw observables; ``size`` prepends sample axes to ``eta``'s batch shape."""
        eta = self.check_natural(eta)
        if size is not None:
            size = (size,) if np.isscalar(size) else tuple(size)
            eta = np.broadcast_to(eta, size + eta.shape)
        return self._draw(eta, rng)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Bernoulli(ExpFamily):
    name = "bernoulli"
    L = 1
    domain = "binary"
    probe_natural = (0.3,)

    def sufficient_statistics(self, y):
        return np.asarray(y, dtype=float)[..., None]

    def log_base_measure(self, y):
        return np.zeros(np.shape(y))

    def log_partition(self, eta):
        return np.logaddexp(0.0, eta[..., 0])

    def mean_map(self, eta):
        return special.expit(eta)

    def phi(self, w):
        return special.logit(w)

    def natural_mean(self, eta):
        return special.expit(eta[..., 0])

    def moments(self, w):
        p = np.asarray(w, dtype=float)[..., 0]
        return p, p * (1.0 - p)

    def from_moments(self, mean, var=None):
        return np.asarray(mean, dtype=float)[..., None]

    def clamp(self, w):
        return np.clip(w, PROB_FLOOR, 1.0 - PROB_FLOOR)

    def valid_mean(self, w):
        return (w[..., 0] > 0) & (w[..., 0] < 1)

    def valid_natural(self, eta):
        return np.isfinite(eta[..., 0])

    def in_domain(self, y):
        return (y == 0) | (y == 1)

    def _draw(self, eta, rng):
        p = special.expit(eta[..., 0])
        return (rng.random(p.shape) < p).astype(float)


class Poisson(ExpFamily):
    name = "poisson"
    L = 1
    domain = "nonneg-integer"
    probe_natural = (0.7,)

    def sufficient_statistics(self, y):
        return np.asarray(y, dtype=float)[..., None]

    def log_base_measure(self, y):
        return -special.gammaln(np.asarray(y, dtype=float) + 1.0)

    def log_partition(self, eta):
        return np.exp(eta[..., 0])

    def mean_map(self, eta):
        return np.exp(eta)

    def phi(self, w):
        return np.log(w)

    def natural_mean(self, eta):
        return np.exp(eta[..., 0])

    def moments(self, w):
        lam = np.asarray(w, dtype=float)[..., 0]
        return lam, lam.copy()

    def from_moments(self, mean, var=None):
        return np.asarray(mean, dtype=float)[..., None]

    def clamp(self, w):
        return np.maximum(w, MEAN_FLOOR)

    def valid_mean(self, w):
        return w[..., 0] > 0

    def valid_natural(self, eta):
        return np.isfinite(eta[..., 0])

    def in_domain(self, y):
        return np.isfinite(y) & (y >= 0) & (y == np.floor(y))

    def _draw(self, eta, rng):
        return rng.poisson(np.exp(eta[..., 0])).astype(float)


class Exponential(ExpFamily):
    name = "exponential"
    L = 1
    domain = "positive-real"
    probe_natural = (-0.5,)

    def sufficient_statistics(self, y):
        return np.asarray(y, dtype=float)[..., None]

    def log_base_measure(self, y):
        return np.zeros(np.shape(y))

    def log_partition(self, eta):
        return -np.log(-eta[..., 0])

    def mean_map(self, eta):
        return -1.0 / eta

    def phi(self, w):
        return -1.0 / w

    def natural_mean(self, eta):
        return -1.0 / eta[..., 0]

    def moments(self, w):
        mu = np.asarray(w, dtype=float)[..., 0]
        return mu, mu**2

    def from_moments(self, mean, var=None):
        return np.asarray(mean, dtype=float)[..., None]

    def clamp(self, w):
        return np.maximum(w, MEAN_FLOOR)

    def valid_mean(self, w):
        return w[..., 0] > 0

    def valid_natural(self, eta):
        return eta[..., 0] < 0

    def in_domain(self, y):
        # density is defined at 0, so accept the closed half-line
        return np.isfinite(y) & (y >= 0)

    def _draw(self, eta, rng):
        return rng.exponential(-1.0 / eta[..., 0])


class Gaussian(ExpFamily):
    """Normal observable with ``T(y) = (y, y^2)``.

    ``w = (mu, mu^2 + sigma^2)`` and ``eta = (mu / sigma^2, -1 / (2 sigma^2))``.
    """

    name = "gaussian"
    L = 2
    domain = "real"
    probe_natural = (0.4, -0.8)

    def sufficient_statistics(self, y):
        y = np.asarray(y, dtype=float)
        return np.stack([y, y * y], axis=-1)

    def log_base_measure(self, y):
        return np.full(np.shape(y), -0.5 * math.log(2.0 * math.pi))

    def log_partition(self, eta):
        e1, e2 = eta[..., 0], eta[..., 1]
        return -(e1 * e1) / (4.0 * e2) - 0.5 * np.log(-2.0 * e2)

    def mean_map(self, eta):
        e1, e2 = eta[..., 0], eta[..., 1]
        mu = -e1 / (2.0 * e2)
        var = -1.0 / (2.0 * e2)
        return np.stack([mu, mu * mu + var], axis=-1)

    def phi(self, w):
        w1, w2 = w[..., 0], w[..., 1]
        var = w2 - w1 * w1
        return np.stack([w1 / var, -0.5 / var], axis=-1)

    def natural_mean(self, eta):
        return -eta[..., 0] / (2.0 * eta[..., 1])

    def moments(self, w):
        w = np.asarray(w, dtype=float)
        return w[..., 0].copy(), w[..., 1] - w[..., 0] ** 2

    def from_moments(self, mean, var):
        mean = np.asarray(mean, dtype=float)
        return np.stack(np.broadcast_arrays(mean, mean * mean + var), axis=-1)

    def clamp(self, w):
        w = np.array(w, dtype=float)
        w[..., 1] = np.maximum(w[..., 1], w[..., 0] ** 2 + GAUSS_VAR_FLOOR)
        return w

    def valid_mean(self, w):
        return np.isfinite(w[..., 0]) & (w[..., 1] > w[..., 0] ** 2)

    def valid_natural(self, eta):
        return np.isfinite(eta[..., 0]) & (eta[..., 1] < 0)

    def in_domain(self, y):
        return np.isfinite(y)

    def _draw(self, eta, rng):
        mu = self.natural_mean(eta)
        sd = np.sqrt(-0.5 / eta[..., 1])
        return rng.normal(mu, sd)


def _series_shape(gap):
    # log(x) - psi(x) ~= 1/(2x) + 1/(12x^2): positive root of 12 c x^2 - 6 x - 1 = 0
    return (3.0 + np.sqrt(9.0 + 12.0 * gap)) / (12.0 * gap)


def _newton_shape(gap, start=None, iters=60):
    """Solve ``log(a) - digamma(a) = gap`` for the shape ``a`` (Newton in log a)."""
    gap = np.asarray(gap, dtype=float)
    a = _series_shape(gap) if start is None else np.array(start, dtype=float)
    x = np.log(a)
    for _ in range(iters):
        a = np.exp(x)
        g = np.log(a) - special.digamma(a) - gap
        dg = 1.0 - a * special.polygamma(1, a)  # d/dx of g, always negative
        step = g / dg
        x = x - step
        if np.all(np.abs(step) < 1e-14):
            break
    return np.exp(x)


class Gamma(ExpFamily):
    """Gamma observable with ``T(y) = (y, log y)``.

    Natural parameters are ordered to pair with the statistics:
    ``eta = (-beta, alpha - 1)`` for shape ``alpha`` and rate ``beta``.
    ``phi`` inverts the mean map with a three-term digamma expansion by
    default (``phi_method="series"``); ``phi_method="newton"`` solves the
    exact mean map instead.
    """

    name = "gamma"
    L = 2
    domain = "positive-real"
    identity_first_statistic = True
    probe_natural = (-1.5, 1.0)

    def __init__(self, phi_method="series"):
        if phi_method not in ("series", "newton"):
            raise ValueError(f"unknown phi_method {phi_method!r}")
        self.phi_method = phi_method

    def sufficient_statistics(self, y):
        y = np.asarray(y, dtype=float)
        return np.stack([y, np.log(y)], axis=-1)

    def log_base_measure(self, y):
        return np.zeros(np.shape(y))

    def log_partition(self, eta):
        rate, shape = -eta[..., 0], eta[..., 1] + 1.0
        return special.gammaln(shape) - shape * np.log(rate)

    def mean_map(self, eta):
        rate, shape = -eta[..., 0], eta[..., 1] + 1.0
        return np.stack([shape / rate, special.digamma(shape) - np.log(rate)], axis=-1)

    def shape_rate(self, w):
        """Shape and rate implied by mean-value parameters ``w``."""
        w1, w2 = w[..., 0], w[..., 1]
        gap = np.log(w1) - w2
        if self.phi_method == "newton":
            shape = _newton_shape(gap)
        else:
            shape = _series_shape(gap)
            bad = ~(shape > 0) | ~np.isfinite(shape)
            if np.any(bad):
                shape = np.where(bad, _newton_shape(np.where(bad, gap, 1.0)), shape)
        return shape, shape / w1

    def phi(self, w):
        shape, rate = self.shape_rate(np.asarray(w, dtype=float))
        return np.stack([-rate, shape - 1.0], axis=-1)

    def natural_mean(self, eta):
        return (eta[..., 1] + 1.0) / -eta[..., 0]

    def moments(self, w):
        w = np.asarray(w, dtype=float)
        shape, rate = self.shape_rate(w)
        return w[..., 0].copy(), shape / rate**2

    def from_moments(self, mean, var):
        mean, var = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(var, dtype=float))
        shape = mean**2 / var
        rate = mean / var
        return np.stack([mean, special.digamma(shape) - np.log(rate)], axis=-1)

    def clamp(self, w):
        w = np.array(w, dtype=float)
        w[..., 0] = np.maximum(w[..., 0], MEAN_FLOOR)
        w[..., 1] = np.minimum(w[..., 1], np.log(w[..., 0]) - GAMMA_GAP_FLOOR)
        return w

    def valid_mean(self, w):
        return (w[..., 0] > 0) & (w[..., 1] < np.log(np.where(w[..., 0] > 0, w[..., 0], 1.0)))

    def valid_natural(self, eta):
        return (eta[..., 0] < 0) & (eta[..., 1] > -1)

    def in_domain(self, y):
        return np.isfinite(y) & (y > 0)

    def _draw(self, eta, rng):
        shape, rate = eta[..., 1] + 1.0, -eta[..., 0]
        return rng.gamma(shape, 1.0 / rate)

    def __repr__(self):
        return f"Gamma(phi_method={self.phi_method!r})"


DISTRIBUTIONS: dict[str, ExpFamily] = {}


def register_distribution(dist, *, name=None, min_singular=1e-8):
    """Add ``dist`` to the registry after checking its mean map is invertible.

    The Jacobian of the mean map (the Hessian of ``A``) is estimated by
    central differences at ``dist.probe_natural``; members whose sufficient
    statistics are interdependent have a singular Jacobian and are rejected.
    """
    key = (name or dist.name).lower()
    if not key:
        raise ValueError("distribution needs a name")
    eta0 = np.asarray(dist.probe_natural, dtype=float)
    if eta0.shape != (dist.L,):
        raise ValueError(f"{key}: probe_natural must have length L={dist.L}")
    step = 1e-5
    jac = np.empty((dist.L, dist.L))
    for j in range(dist.L):
        e = np.zeros(dist.L)
        e[j] = step
        jac[:, j] = (dist.mean_map(eta0 + e) - dist.mean_map(eta0 - e)) / (2 * step)
    smallest = np.linalg.svd(jac, compute_uv=False).min()
    if not smallest > min_singular:
        raise ParameterError(f"{key}: mean map is not invertible at the probe point (sufficient statistics dependent)")
    DISTRIBUTIONS[key] = dist
    return dist


for _d in (Bernoulli(), Poisson(), Exponential(), Gaussian(), Gamma()):
    register_distribution(_d)


def get_distribution(name):
    """Look up a registered distribution by (case-insensitive) name."""
    if isinstance(name, ExpFamily):
        return name
    try:
        return DISTRIBUTIONS[str(name).lower()]
    except KeyError:
        known = ", ".join(sorted(DISTRIBUTIONS))
        raise ValueError(f"unknown distribution {name!r}; expected one of: {known}") from None
