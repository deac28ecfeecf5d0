"""Cross-modal feature learning objectives and the tumour-guided attention block.

Discriminators are not modelled as networks here: the adversarial terms are
evaluated on supplied discriminator scores.  Expectations are arithmetic
means over whatever batch of scores is passed in.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

SCORE_CLAMP = 1e-12
DEFAULT_LAMBDA_L1 = 100.0


def clamp_score(d):
    return np.clip(np.asarray(d, dtype=np.float64), SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def adv_loss(d_real, d_fake):
    """``-E[log D(real)] - E[log(1 - D(fake))]`` over clamped scores."""
    r = clamp_score(d_real)
    f = clamp_score(d_fake)
    return float(-np.mean(np.log(r)) - np.mean(np.log1p(-f)))


def l1_pair(a, a_hat, y, y_hat):
    """Mean absolute error of the modality pair plus that of the mask pair."""
    a, a_hat, y, y_hat = (np.asarray(v, dtype=np.float64) for v in (a, a_hat, y, y_hat))
    if a.shape != a_hat.shape or y.shape != y_hat.shape:
        raise ContractViolation(
            f"pair shapes differ: {a.shape}/{a_hat.shape}, {y.shape}/{y_hat.shape}"
        )
    return float(np.mean(np.abs(a - a_hat)) + np.mean(np.abs(y - y_hat)))


@dataclass(frozen=True)
class BranchTerms:
    advm: float
    advt: float
    l1: float


def cfl_total(ct, pet, lambda_l1=DEFAULT_LAMBDA_L1):
    """Sum over the CT and PET branches of ``advm + advt + lambda_l1 * l1``."""
    return sum(b.advm + b.advt + lambda_l1 * b.l1 for b in (ct, pet))


@dataclass(frozen=True)
class TGAWeights:
    """Two dense layers mapping pooled tumour features to channel gates.

    ``w1``: ``[hidden, Ct]``, ``b1``: ``[hidden]``, ``w2``: ``[Cm, hidden]``,
    ``b2``: ``[Cm]``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        h, ct = np.shape(self.w1)
        cm, h2 = np.shape(self.w2)
        if h2 != h or np.shape(self.b1) != (h,) or np.shape(self.b2) != (cm,):
            raise ContractViolation("inconsistent TGA layer shapes")

    @property
    def in_channels(self):
        return self.w1.shape[1]

    @property
    def out_channels(self):
        return self.w2.shape[0]

    @classmethod
    def random(cls, ct, cm, seed=0, hidden=None):
        """Seeded uniform init; hidden width defaults to ceil(Ct / 2)."""
        hidden = hidden or math.ceil(ct / 2)
        rng = np.random.Generator(np.random.PCG64(seed))
        lim1, lim2 = 1.0 / math.sqrt(ct), 1.0 / math.sqrt(hidden)
        return cls(
            rng.uniform(-lim1, lim1, (hidden, ct)),
            rng.uniform(-lim1, lim1, hidden),
            rng.uniform(-lim2, lim2, (cm, hidden)),
            rng.uniform(-lim2, lim2, cm),
        )


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tga_gates(f_t, w):
    f_t = np.asarray(f_t, dtype=np.float64)
    if f_t.ndim != 3 or f_t.shape[0] != w.in_channels:
        raise ContractViolation(f"tumour features {f_t.shape} do not match {w.in_channels} channels")
    pooled = f_t.mean(axis=(1, 2))
    hidden = np.maximum(w.w1 @ pooled + w.b1, 0.0)
    return _sigmoid(w.w2 @ hidden + w.b2)


def tga_forward(f_t, f_m, w):
    """Gate each modality channel by ``sigmoid(MLP(GAP(f_t)))``."""
    f_m = np.asarray(f_m, dtype=np.float64)
    if f_m.ndim != 3 or f_m.shape[0] != w.out_channels:
        raise ContractViolation(f"modality features {f_m.shape} do not match {w.out_channels} gates")
    gates = tga_gates(f_t, w)
    return gates[:, None, None] * f_m
