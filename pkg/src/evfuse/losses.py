"""Evidential segmentation losses.

All losses take Dirichlet parameters / probabilities with the class axis
first (``[C]`` for one sample, ``[C, ...]`` for maps) and a one-hot label
array of the same shape.  Inputs may be numpy arrays or tape ``Var`` nodes;
the return value is a scalar ``Var`` so every loss can be differentiated.

Per-pixel losses (adjusted cross-entropy, KL, uncertainty-perceptual) are
mean-reduced over pixels.  The soft Dice loss sums over pixels inside the
per-class ratio.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Var, as_var, clamp_min, digamma, lgamma, log

DICE_SMOOTH = 1e-5
UP_FLOOR = 1e-12


def _check_labels(y, shape, one_hot=True):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != tuple(shape):
        raise ContractViolation(f"label shape {y.shape} does not match {tuple(shape)}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractViolation("labels must be binary")
    if one_hot and not np.all(y.sum(axis=0) == 1):
        raise ContractViolation("labels must be one-hot along the class axis")
    return y


def one_hot(mask, C=2):
    """``[H, W]`` integer class map -> ``[C, H, W]`` one-hot float array."""
    mask = np.asarray(mask).astype(np.int64)
    return (np.arange(C).reshape((C,) + (1,) * mask.ndim) == mask[None]).astype(np.float64)


def _pixel_mean(per_pixel):
    return per_pixel.mean() if per_pixel.ndim else per_pixel


def l_ace(alpha, y):
    """Adjusted cross-entropy: the expected CE under Dir(alpha), sum_c y^c (psi(S) - psi(alpha^c))."""
    alpha = as_var(alpha)
    y = _check_labels(y, alpha.shape)
    S = alpha.sum(axis=0)
    per_pixel = (y * (digamma(S) - digamma(alpha))).sum(axis=0)
    return _pixel_mean(per_pixel)


def l_kl(alpha, y):
    """KL(Dir(alpha~) || Dir(1, ..., 1)) with the true-class slot of alpha replaced by 1."""
    alpha = as_var(alpha)
    y = _check_labels(y, alpha.shape)
    C = alpha.shape[0]
    at = y + (1.0 - y) * alpha
    St = at.sum(axis=0)
    per_pixel = (
        lgamma(St)
        - lgamma(at).sum(axis=0)
        - math.lgamma(C)
        + ((at - 1.0) * (digamma(at) - digamma(St))).sum(axis=0)
    )
    return _pixel_mean(per_pixel)


def l_dice(p, y, smooth=DICE_SMOOTH):
    """Class-summed soft Dice loss with spatial sums inside each class ratio."""
    p = as_var(p)
    y = _check_labels(y, p.shape, one_hot=p.shape[0] > 1)
    C = p.shape[0]
    pf = p.reshape(C, -1)
    yf = y.reshape(C, -1)
    inter = (pf * yf).sum(axis=1)
    denom = yf.sum(axis=1) + pf.sum(axis=1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).sum()


def l_up(p, u, y, detach_u=False, floor=UP_FLOOR, diagnostics=None):
    """Uncertainty-perceptual loss ``-u sum_c y^c log p^c``, mean over pixels.

    Probabilities under ``floor`` at labelled entries are clamped; the number
    of clamped entries is added to ``diagnostics["up_clamped"]`` when a dict
    is supplied.
    """
    p = as_var(p)
    u = as_var(u)
    y = _check_labels(y, p.shape)
    if u.shape != p.shape[1:]:
        raise ContractViolation(f"u shape {u.shape} does not match p {p.shape}")
    if detach_u:
        u = u.detach()
    if diagnostics is not None:
        clamped = int(np.sum((p.value < floor) & (y == 1)))
        diagnostics["up_clamped"] = diagnostics.get("up_clamped", 0) + clamped
    per_pixel = -u * (y * log(clamp_min(p, floor))).sum(axis=0)
    return _pixel_mean(per_pixel)


@dataclass(frozen=True)
class AnnealSchedule:
    beta0: float = 0.01
    T: int = 100
    t: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta0 < 1.0:
            raise ContractViolation(f"beta0 must lie in (0, 1), got {self.beta0}")
        if self.T < 0 or not 0 <= self.t <= max(self.T, 0):
            raise ContractViolation(f"need 0 <= t <= T, got t={self.t}, T={self.T}")

    def at(self, t):
        return AnnealSchedule(self.beta0, self.T, t)


def anneal_beta(schedule):
    """``beta_t = beta0 * exp(-(ln beta0 / T) t)``; rises from beta0 to 1 over the run."""
    if schedule.T == 0:
        return 1.0
    b0 = schedule.beta0
    return b0 * math.exp(-(math.log(b0) / schedule.T) * schedule.t)


@dataclass
class SegResult:
    """One branch's output: Dirichlet parameters, projected probability, uncertainty."""

    alpha: object
    p: object
    u: object


def seg_result(alpha):
    """Build a :class:`SegResult` from Dirichlet parameters (array or Var).

    ``p`` is the projected probability ``b + u`` and ``u = C / S``.
    """
    alpha = as_var(alpha)
    C = alpha.shape[0]
    S = alpha.sum(axis=0)
    u = C / S
    b = (alpha - 1.0) / S
    return SegResult(alpha, b + u, u)


def l_seg(result, y, beta, smooth=DICE_SMOOTH, detach_u=False, diagnostics=None):
    """``(1 - beta) L_ace + beta L_UP + L_KL + L_Dice`` for one branch.

    ``beta`` is either a number or an :class:`AnnealSchedule`.
    """
    if isinstance(beta, AnnealSchedule):
        beta = anneal_beta(beta)
    ace = l_ace(result.alpha, y)
    up = l_up(result.p, result.u, y, detach_u=detach_u, diagnostics=diagnostics)
    kl = l_kl(result.alpha, y)
    dice = l_dice(result.p, y, smooth)
    return (1.0 - beta) * ace + beta * up + kl + dice


def loss_value(loss):
    return float(loss.value) if isinstance(loss, Var) else float(loss)
