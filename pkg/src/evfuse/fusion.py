"""Dempster-Shafer combination of subjective opinions on the singleton+Theta frame.

Two opinions ``(b1, u1)`` and ``(b2, u2)`` over the same C classes combine as

    b^c = (b1^c b2^c + b1^c u2 + b2^c u1) / (1 - K)
    u   = u1 u2 / (1 - K)

with the pairwise conflict ``K = sum_{i != j} b1^i b2^j``.  With this K the
result satisfies ``sum(b) + u = 1`` identically.

A variant conflict coefficient that also adds cross belief/uncertainty terms
and ``u1 u2`` breaks the belief+uncertainty invariant when used as the
normalizer.  :func:`printed_conflict` computes it for diagnostics only.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .errors import ContractViolation, DegenerateOpinionError, TotalConflictError
from .opinion import DirichletParams, Evidence, Opinion
from .tensor import asum

EPS_CONFLICT = 1e-12


def _check_pair(m1, m2):
    if m1.C != m2.C:
        raise ContractViolation(f"class counts differ: {m1.C} vs {m2.C}")
    if np.shape(m1.b) != np.shape(m2.b):
        raise ContractViolation(f"opinion shapes differ: {np.shape(m1.b)} vs {np.shape(m2.b)}")


def pairwise_conflict(b1, b2):
    """``sum_{i != j} b1^i b2^j`` along the class axis (arrays or Vars)."""
    return asum(b1, axis=0) * asum(b2, axis=0) - asum(b1 * b2, axis=0)


def printed_conflict(b1, u1, b2, u2):
    """Variant conflict with cross terms and ``u1 u2``, the bracket summed over i != j.

    Kept only to demonstrate that it does not preserve the invariant.
    """
    C = b1.shape[0]
    return (
        pairwise_conflict(b1, b2)
        + (C - 1) * asum(b1, axis=0) * u2
        + (C - 1) * asum(b2, axis=0) * u1
        + u1 * u2
    )


def combine_masses(b1, u1, b2, u2):
    """Unnormalized joint masses and the normalizer ``1 - K``.

    Works on numpy arrays and on tape :class:`~evfuse.tensor.Var` nodes alike,
    which lets training differentiate through the fusion rule.
    """
    raw_b = b1 * b2 + b1 * u2 + b2 * u1
    raw_u = u1 * u2
    # 1 - K rewritten with sum(b) = 1 - u: every term is nonnegative, so
    # nothing cancels when the conflict approaches 1, and a vacuous operand
    # gives exactly 1 because fl(u + fl(1 - u)) == 1
    norm = u1 + u2 * (1.0 - u1) + asum(b1 * b2, axis=0)
    return raw_b, raw_u, norm


def conflict(m1, m2):
    _check_pair(m1, m2)
    k = pairwise_conflict(m1.b, m2.b)
    return float(k) if np.ndim(k) == 0 else k


def combine(m1, m2, eps_conflict=EPS_CONFLICT, printed_cof=False):
    """``m1 (+) m2``.

    ``printed_cof=True`` swaps in :func:`printed_conflict` and returns an
    unvalidated opinion; it exists so the broken invariant can be measured.
    """
    _check_pair(m1, m2)
    if printed_cof:
        b1, b2 = m1.b, m2.b
        u1, u2 = np.asarray(m1.u), np.asarray(m2.u)
        norm = 1.0 - printed_conflict(b1, u1, b2, u2)
        with np.errstate(divide="ignore", invalid="ignore"):  # this normalizer can vanish
            return Opinion.unchecked((b1 * b2 + b1 * u2 + b2 * u1) / norm, u1 * u2 / norm)

    raw_b, raw_u, norm = combine_masses(m1.b, np.asarray(m1.u), m2.b, np.asarray(m2.u))
    if np.any(norm <= eps_conflict):
        raise TotalConflictError(
            f"total conflict between {m1!r} and {m2!r}: normalizer {np.min(norm):.3g}",
            normalizer=np.min(norm),
        )
    return Opinion(raw_b / norm, raw_u / norm)


def fuse_all(opinions, eps_conflict=EPS_CONFLICT):
    """Left fold of :func:`combine` over one or more opinions."""
    opinions = list(opinions)
    if not opinions:
        raise ContractViolation("fuse_all needs at least one opinion")

    def step(acc, indexed):
        i, m = indexed
        try:
            return combine(acc, m, eps_conflict)
        except TotalConflictError as exc:
            raise TotalConflictError(
                f"fold step {i}: {exc}", normalizer=exc.normalizer, step=i
            ) from exc

    return reduce(step, enumerate(opinions[1:], start=1), opinions[0])


@dataclass(frozen=True)
class FusionResult:
    opinion: Opinion
    alpha: DirichletParams
    evidence: Evidence
    p: np.ndarray
    conflict_trace: tuple = ()

    @property
    def S(self):
        return self.alpha.alpha.sum(axis=0)

    @property
    def u(self):
        return self.opinion.u


def joint_result(m, conflict_trace=()):
    """Joint strength, evidence, Dirichlet parameters and projected probability."""
    u = np.asarray(m.u)
    if np.any(u <= 0):
        raise DegenerateOpinionError("joint opinion has zero uncertainty mass")
    S = m.C / u
    e = m.b * S
    return FusionResult(
        opinion=m,
        alpha=DirichletParams(e + 1.0),
        evidence=Evidence(e),
        p=m.b + m.u,
        conflict_trace=tuple(conflict_trace),
    )


def fuse_sequence(opinions, eps_conflict=EPS_CONFLICT):
    """:func:`fuse_all` followed by :func:`joint_result`, recording each conflict."""
    opinions = list(opinions)
    trace = []
    acc = opinions[0]
    for m in opinions[1:]:
        trace.append(conflict(acc, m))
        acc = combine(acc, m, eps_conflict)
    return joint_result(acc, trace)


@dataclass
class MapFusion:
    opinion: Opinion
    conflicts: list = field(default_factory=list)

    @property
    def u(self):
        return self.opinion.u

    def report_lines(self):
        """Conflict report, one ``x,y,normalizer`` line per degenerate pixel."""
        return [f"{x},{y},{norm:.6e}" for x, y, norm in self.conflicts]


def _fuse_block(bs, us, eps_conflict):
    b, u = bs[0], us[0]
    bad = np.zeros(u.shape, dtype=bool)
    worst = np.full(u.shape, np.inf)
    for b2, u2 in zip(bs[1:], us[1:]):
        raw_b, raw_u, norm = combine_masses(b, u, b2, u2)
        dead = norm <= eps_conflict
        worst = np.where(dead & ~bad, norm, worst)
        bad |= dead
        safe = np.where(dead, 1.0, norm)
        b, u = raw_b / safe, raw_u / safe
    b = np.where(bad, 0.0, b)
    u = np.where(bad, 1.0, u)
    return b, u, bad, worst


def fuse_maps(maps, eps_conflict=EPS_CONFLICT, partitions=1):
    """Pixelwise :func:`fuse_all` over opinion maps of identical ``[C, H, W]`` shape.

    Pixels whose fold hits total conflict are set to the vacuous opinion and
    listed in the returned conflict report.  ``partitions > 1`` splits the
    rows across worker threads; the output does not depend on the split.
    """
    maps = list(maps)
    if not maps:
        raise ContractViolation("fuse_maps needs at least one map")
    shape = np.shape(maps[0].b)
    if len(shape) != 3:
        raise ContractViolation(f"opinion maps must be [C, H, W], got {shape}")
    for m in maps[1:]:
        if np.shape(m.b) != shape:
            raise ContractViolation(f"map shapes differ: {np.shape(m.b)} vs {shape}")
    C, H, W = shape
    bs = [m.b for m in maps]
    us = [np.asarray(m.u) for m in maps]

    bounds = np.linspace(0, H, max(1, min(partitions, H)) + 1).astype(int)
    blocks = list(zip(bounds[:-1], bounds[1:]))

    def run(block):
        lo, hi = block
        return _fuse_block([b[:, lo:hi] for b in bs], [u[lo:hi] for u in us], eps_conflict)

    if len(blocks) == 1:
        parts = [run(blocks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            parts = list(pool.map(run, blocks))

    b = np.concatenate([p[0] for p in parts], axis=1)
    u = np.concatenate([p[1] for p in parts], axis=0)
    bad = np.concatenate([p[2] for p in parts], axis=0)
    worst = np.concatenate([p[3] for p in parts], axis=0)
    ys, xs = np.nonzero(bad)
    conflicts = [(int(x), int(y), float(worst[y, x])) for y, x in zip(ys, xs)]
    return MapFusion(Opinion(b, u), conflicts)
