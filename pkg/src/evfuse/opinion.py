"""Evidence, Dirichlet parameters and subjective-logic opinions.

Every conversion works on a single C-vector or on a whole grid: the class
axis is always axis 0, so an evidence map of shape ``[C, H, W]`` goes
through exactly the same code as a vector of shape ``[C]``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateOpinionError

SUM_TOL = 1e-12


def _float_array(x):
    return np.asarray(x, dtype=np.float64)


def _scalarize(x):
    return float(x) if np.ndim(x) == 0 else x


@dataclass(frozen=True)
class Evidence:
    e: np.ndarray

    def __post_init__(self):
        e = _float_array(self.e)
        if e.ndim < 1 or e.shape[0] < 2:
            raise ContractViolation("evidence needs a class axis with C >= 2")
        if not np.all(np.isfinite(e)):
            raise ContractViolation("evidence must be finite")
        if np.any(e < 0):
            raise ContractViolation("evidence must be nonnegative")
        object.__setattr__(self, "e", e)

    @property
    def C(self):
        return self.e.shape[0]


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        a = _float_array(self.alpha)
        if a.ndim < 1 or a.shape[0] < 2:
            raise ContractViolation("alpha needs a class axis with C >= 2")
        if not np.all(np.isfinite(a)) or np.any(a < 1.0):
            raise ContractViolation("every alpha must be finite and >= 1")
        object.__setattr__(self, "alpha", a)

    @property
    def C(self):
        return self.alpha.shape[0]

    @property
    def S(self):
        return _scalarize(self.alpha.sum(axis=0))


@dataclass(frozen=True)
class Opinion:
    """Belief masses ``b`` (class axis first) and uncertainty mass ``u``."""

    b: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        b = _float_array(self.b)
        u = _float_array(self.u)
        if b.ndim < 1 or b.shape[0] < 2:
            raise ContractViolation("beliefs need a class axis with C >= 2")
        if u.shape != b.shape[1:]:
            raise ContractViolation(f"u shape {u.shape} does not match beliefs {b.shape}")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ContractViolation("belief masses must be finite and nonnegative")
        if np.any(u <= 0) or np.any(u > 1):
            raise ContractViolation("uncertainty mass must lie in (0, 1]")
        err = np.abs(b.sum(axis=0) + u - 1.0)
        if np.any(err > SUM_TOL):
            raise ContractViolation(f"beliefs + uncertainty deviate from 1 by {err.max():.3g}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "u", _scalarize(u) if u.ndim == 0 else u)

    @classmethod
    def unchecked(cls, b, u):
        """Build an opinion without validating it (diagnostic use only)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "b", _float_array(b))
        u = _float_array(u)
        object.__setattr__(obj, "u", _scalarize(u) if u.ndim == 0 else u)
        return obj

    @classmethod
    def vacuous(cls, C, shape=()):
        return cls(np.zeros((C,) + tuple(shape)), np.ones(tuple(shape)))

    @property
    def C(self):
        return self.b.shape[0]

    def residual(self):
        """``sum(b) + u - 1``, pixelwise for maps."""
        return self.b.sum(axis=0) + self.u - 1.0


def evidence_to_alpha(e):
    if not isinstance(e, Evidence):
        e = Evidence(e)
    return DirichletParams(e.e + 1.0)


def alpha_to_opinion(alpha):
    if not isinstance(alpha, DirichletParams):
        alpha = DirichletParams(alpha)
    a = alpha.alpha
    S = a.sum(axis=0)
    b = (a - 1.0) / S
    u = alpha.C / S
    # the identity sum(b) + u = 1 holds exactly only in exact arithmetic;
    # rounding stays far inside SUM_TOL for any alpha >= 1
    return Opinion(b, u)


def opinion_to_alpha(m):
    u = _float_array(m.u)
    if np.any(u <= 0):
        raise DegenerateOpinionError("uncertainty mass 0 implies infinite Dirichlet strength")
    S = m.C / u
    return DirichletParams(m.b * S + 1.0)


def evidence_to_opinion(e):
    return alpha_to_opinion(evidence_to_alpha(e))


def projected_probability(m):
    """Per-class ``p = b + u``.

    This equals ``1 - sum of the other beliefs``; it is not a distribution,
    since the classes sum to ``1 + (C - 1) u``.
    """
    return m.b + m.u


def dirichlet_mean(alpha):
    if not isinstance(alpha, DirichletParams):
        alpha = DirichletParams(alpha)
    a = alpha.alpha
    return a / a.sum(axis=0)


def map_lift(f, grid):
    """Apply a per-vector operation independently at every pixel of ``grid``.

    ``grid`` has the class axis first.  ``f`` receives a ``[C]`` vector and
    may return an array, a :class:`DirichletParams` or an :class:`Opinion`;
    the per-pixel results are stacked back into planes of the same kind.
    Errors are re-raised with the offending pixel coordinates attached.
    """
    grid = _float_array(grid)
    spatial = grid.shape[1:]
    results = {}
    for idx in np.ndindex(*spatial):
        try:
            results[idx] = f(grid[(slice(None),) + idx])
        except (ContractViolation, DegenerateOpinionError) as exc:
            raise type(exc)(f"pixel {idx}: {exc}") from exc
    first = results[next(iter(np.ndindex(*spatial)))] if results else None

    def stack(get):
        sample = np.asarray(get(first))
        out = np.empty(sample.shape[:1] + spatial if sample.ndim else spatial)
        for idx, r in results.items():
            if sample.ndim:
                out[(slice(None),) + idx] = get(r)
            else:
                out[idx] = get(r)
        return out

    if isinstance(first, Opinion):
        return Opinion(stack(lambda r: r.b), stack(lambda r: r.u))
    if isinstance(first, DirichletParams):
        return DirichletParams(stack(lambda r: r.alpha))
    return stack(lambda r: r)
