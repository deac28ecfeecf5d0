"""Digamma, trigamma and log-gamma for positive real arguments.

All three use the same scheme: shift the argument upward with the
recurrence until it reaches ``ASYMPTOTIC_CUTOFF`` and then sum the first
seven Bernoulli terms of the asymptotic expansion.  Inputs may be Python
floats or numpy arrays; the return type follows the input.
"""

import numpy as np

from .errors import DomainError

ASYMPTOTIC_CUTOFF = 6.0

# B_2, B_4, ..., B_14
_BERNOULLI = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)

# psi(x) ~ ln x - 1/(2x) - sum_k B_2k / (2k x^2k)
_PSI_COEF = tuple(b / (2 * k) for k, b in enumerate(_BERNOULLI, start=1))
# ln Gamma(x) ~ (x - 1/2) ln x - x + ln(2 pi)/2 + sum_k B_2k / (2k (2k-1) x^(2k-1))
_LGAMMA_COEF = tuple(b / (2 * k * (2 * k - 1)) for k, b in enumerate(_BERNOULLI, start=1))
# psi'(x) ~ 1/x + 1/(2x^2) + sum_k B_2k / x^(2k+1)
_TRIGAMMA_COEF = _BERNOULLI

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _horner(t, coef):
    acc = np.zeros_like(t)
    for c in reversed(coef):
        acc = acc * t + c
    return acc


def _prepare(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not (np.all(arr > 0) and np.all(np.isfinite(arr))):
        raise DomainError(f"{name} requires finite x > 0")
    return arr


def _finish(x, out):
    if np.ndim(x) == 0:
        return float(out)
    return out


def _shift_up(z, term, start):
    """Apply the recurrence until every entry of z is >= the cutoff.

    Returns the shifted arguments and the accumulated correction, built from
    ``term(z)`` at each step where the entry was still below the cutoff.
    """
    acc = np.full_like(z, start)
    low = z < ASYMPTOTIC_CUTOFF
    while low.any():
        acc = np.where(low, term(acc, z), acc)
        z = np.where(low, z + 1.0, z)
        low = z < ASYMPTOTIC_CUTOFF
    return z, acc


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    z = _prepare(x, "digamma")
    z, shift = _shift_up(z, lambda acc, z: acc - 1.0 / z, 0.0)
    t = 1.0 / (z * z)
    out = shift + np.log(z) - 0.5 / z - t * _horner(t, _PSI_COEF)
    return _finish(x, out)


def trigamma(x):
    """psi'(x) for x > 0; the derivative used by reverse-mode digamma."""
    z = _prepare(x, "trigamma")
    z, shift = _shift_up(z, lambda acc, z: acc + 1.0 / (z * z), 0.0)
    inv = 1.0 / z
    t = inv * inv
    out = shift + inv + 0.5 * t + inv * t * _horner(t, _TRIGAMMA_COEF)
    return _finish(x, out)


def log_gamma(x):
    """ln Gamma(x) for x > 0."""
    z = _prepare(x, "log_gamma")
    z, prod = _shift_up(z, lambda acc, z: acc * z, 1.0)
    inv = 1.0 / z
    t = inv * inv
    series = inv * _horner(t, _LGAMMA_COEF)
    out = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series - np.log(prod)
    # series truncation leaves ~1e-13 at the two zeros; pin them exactly
    out = np.where((np.asarray(x) == 1.0) | (np.asarray(x) == 2.0), 0.0, out)
    return _finish(x, out)
