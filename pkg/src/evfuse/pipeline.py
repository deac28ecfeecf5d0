"""Toy two-modality evidential segmentation with trustworthy decision fusion.

Each branch is a per-pixel evidence head: a fixed bank of local image
features followed by a trainable radial-basis layer whose output goes
through softplus, so the head emits nonnegative evidence.  Three heads are
trained jointly:

* CT head on CT features,
* PET head on PET features,
* fused head on both feature banks, each scaled by ``1 + u`` of its own
  branch (uncertainty calibration at toy scale).

The three opinions are combined per pixel with the Dempster-Shafer rule and
all four results (three branches plus the fused decision) are deeply
supervised with the evidential segmentation loss.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage, stats
from scipy.cluster import vq

from .errors import ContractViolation, TrainingDiverged
from .fusion import EPS_CONFLICT, combine_masses, fuse_maps
from .losses import AnnealSchedule, SegResult, anneal_beta, l_seg, one_hot, seg_result
from .metrics import dsc
from .opinion import Opinion
from .synth import make_rng, perturb_case
from .tensor import Var, backward, concat, dense

log = logging.getLogger(__name__)

C = 2
BRANCHES = ("ct", "pet", "f")
FEATURE_NAMES = ("raw", "mean3", "mean7", "mean15", "grad", "std5")
MIN_WIDTH = 0.05
MAX_WIDTH = 0.5


def feature_bank(img):
    """Fixed local features of one normalized image, shape ``[6, H*W]``."""
    img = np.asarray(img, dtype=np.float64)
    m3 = ndimage.uniform_filter(img, 3, mode="nearest")
    m7 = ndimage.uniform_filter(img, 7, mode="nearest")
    m15 = ndimage.uniform_filter(img, 15, mode="nearest")
    grad = np.hypot(
        ndimage.sobel(m3, axis=0, mode="nearest"), ndimage.sobel(m3, axis=1, mode="nearest")
    )
    sq = ndimage.uniform_filter(img * img, 5, mode="nearest")
    m5 = ndimage.uniform_filter(img, 5, mode="nearest")
    sd = np.sqrt(np.maximum(sq - m5 * m5, 0.0))
    return np.stack([img, m3, m7, m15, grad, sd]).reshape(len(FEATURE_NAMES), -1)


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats):
        allf = np.concatenate(feats, axis=1)
        sd = allf.std(axis=1)
        return cls(allf.mean(axis=1), np.where(sd > 0, sd, 1.0))

    def __call__(self, f):
        return (f - self.mean[:, None]) / self.std[:, None]


@dataclass
class EvidenceHead:
    """Radial-basis evidence head: ``e = softplus(W phi(x))``.

    ``phi_j(x) = exp(-|x - c_j|^2 / (2 s_j^2))`` with learned centres and
    widths, and the output layer has no bias.  Far from every centre all
    units switch off and each class gets the same evidence ``softplus(0)``,
    so unfamiliar inputs come out uncertain instead of being extrapolated
    with confidence.
    """

    centers: np.ndarray  # [H, n_in]
    log_width: np.ndarray  # [H, 1]
    w2: np.ndarray  # [C, H]

    @classmethod
    def init(cls, x, y, hidden, rng, max_width=MAX_WIDTH):
        """Centres from k-means on pixels of each class, output weights voting for that class."""
        n_fg = max(1, hidden // 4)
        parts, owner = [], []
        for k, n_k in ((1, n_fg), (0, hidden - n_fg)):
            pool = x[:, y == k].T
            if len(pool) == 0:
                pool = x.T
            pick = pool[rng.choice(len(pool), size=min(len(pool), 4000), replace=False)]
            cent, _ = vq.kmeans2(pick, n_k, minit="++", seed=rng)
            parts.append(cent)
            owner += [k] * n_k
        centers = np.concatenate(parts)
        d = np.sqrt(((centers[:, None] - centers[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        width = np.clip(np.min(d, axis=1), MIN_WIDTH, max_width)
        w2 = np.full((C, hidden), -1.0)
        w2[owner, np.arange(hidden)] = 3.0
        return cls(centers, np.log(width)[:, None], w2)

    def params(self):
        return [self.centers, self.log_width, self.w2]

    def clip_widths(self, max_width=MAX_WIDTH):
        """Project widths back into ``[MIN_WIDTH, max_width]`` (in place).

        A bounded length scale keeps the units local; with unbounded widths
        training widens them until every input, however unusual, lands
        inside some unit and gets confident evidence.
        """
        np.clip(self.log_width, math.log(MIN_WIDTH), math.log(max_width), out=self.log_width)

    def forward(self, x, weights=None, fixed_order=True):
        c, log_w, w2 = weights or [Var(p) for p in self.params()]
        mm = dense if fixed_order else (lambda w, v: w @ v)
        d2 = (x * x).sum(axis=0)[None] - 2.0 * mm(c, x) + (c * c).sum(axis=1, keepdims=True)
        phi = (d2.clamp_min(0.0) * (log_w * -2.0).exp() * -0.5).exp()
        return mm(w2, phi).softplus()

    def evidence(self, x):
        return self.forward(x).value


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    beta0: float = 0.01
    batch_size: int = 16
    hidden: int = 16
    max_width: float = MAX_WIDTH
    seed: int = 0
    detach_fusion: bool = False
    detach_up: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ContractViolation("learning rate, epochs, batch size and width must be positive")
        if not MIN_WIDTH < self.max_width:
            raise ContractViolation(f"max_width must exceed {MIN_WIDTH}")
        if not 0 < self.beta0 < 1:
            raise ContractViolation("beta0 must lie in (0, 1)")

    @classmethod
    def toy(cls, **overrides):
        """Settings used for the desk-scale runs (larger step, fewer epochs)."""
        base = dict(lr=1e-2, beta1=0.9, epochs=30)
        base.update(overrides)
        return cls(**base)

    def as_dict(self):
        return asdict(self)


@dataclass
class Model:
    heads: dict
    scalers: dict
    config: TrainConfig
    history: list = field(default_factory=list)


# features -------------------------------------------------------------------


def case_features(case, scalers):
    return scalers["ct"](feature_bank(case.ct)), scalers["pet"](feature_bank(case.pet))


def fused_branch_features(f_ct, f_pet, u_ct, u_pet):
    """Concatenate both feature banks, each scaled by ``1 + u`` of its branch.

    ``u_*`` are flat uncertainty planes matching the pixel axis of the
    features.  Zero uncertainty gives the plain concatenation.
    """
    u_ct, u_pet = np.asarray(u_ct), np.asarray(u_pet)
    return np.concatenate([f_ct * (1.0 + u_ct)[None], f_pet * (1.0 + u_pet)[None]])


# differentiable branch assembly ---------------------------------------------


def _opinion_parts(alpha):
    S = alpha.sum(axis=0)
    return (alpha - 1.0) / S, C / S


def fuse_results(results, detach=False):
    """Dempster-Shafer fold over branch results; returns the fused SegResult."""
    parts = [_opinion_parts(r.alpha.detach() if detach else r.alpha) for r in results]
    b, u = parts[0]
    for b2, u2 in parts[1:]:
        raw_b, raw_u, norm = combine_masses(b, u, b2, u2)
        b, u = raw_b / norm, raw_u / norm
    S = C / u
    alpha = b * S + 1.0
    return SegResult(alpha, b + u, u)


def forward_branches(heads, f_ct, f_pet, weights=None, detach_fusion=False, fixed_order=True):
    weights = weights or {k: [Var(p) for p in heads[k].params()] for k in BRANCHES}
    r_ct = seg_result(heads["ct"].forward(f_ct, weights["ct"], fixed_order) + 1.0)
    r_pet = seg_result(heads["pet"].forward(f_pet, weights["pet"], fixed_order) + 1.0)
    x_f = fused_branch_features(f_ct, f_pet, r_ct.u.value, r_pet.u.value)
    r_f = seg_result(heads["f"].forward(x_f, weights["f"], fixed_order) + 1.0)
    r_l = fuse_results([r_ct, r_pet, r_f], detach=detach_fusion)
    return {"ct": r_ct, "pet": r_pet, "f": r_f, "l": r_l}


def deep_supervision_loss(results, y, beta, detach_up=False):
    """Equal-weight sum of the segmentation loss over every branch and the fusion."""
    total = None
    for key in sorted(results):
        term = l_seg(results[key], y, beta, detach_u=detach_up)
        total = term if total is None else total + term
    return total


# training -------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit_scalers(cases):
    return {
        "ct": FeatureScaler.fit([feature_bank(c.ct) for c in cases]),
        "pet": FeatureScaler.fit([feature_bank(c.pet) for c in cases]),
    }


def init_heads(config, feats, labels):
    """Seed the three heads from the (standardized) training pixels."""
    rng = make_rng(config.seed)
    f_ct = np.concatenate([f[0] for f in feats], axis=1)
    f_pet = np.concatenate([f[1] for f in feats], axis=1)
    y = np.concatenate([lab[1] for lab in labels]).astype(int)
    return {
        "ct": EvidenceHead.init(f_ct, y, config.hidden, rng, config.max_width),
        "pet": EvidenceHead.init(f_pet, y, config.hidden, rng, config.max_width),
        "f": EvidenceHead.init(fused_branch_features(f_ct, f_pet, 0.0, 0.0), y, config.hidden, rng, config.max_width),
    }


def train_toy(config, cases, val_cases=None, progress=None):
    """Train the three heads jointly; returns a :class:`Model`.

    ``history`` holds one dict per epoch with the mean training loss and,
    when ``val_cases`` are given, the fused validation DSC.
    """
    cases = list(cases)
    if not cases:
        raise ContractViolation("training needs at least one case")
    scalers = fit_scalers(cases)
    feats = [case_features(c, scalers) for c in cases]
    labels = [one_hot(c.mask, C).reshape(C, -1) for c in cases]
    heads = init_heads(config, feats, labels)

    params = [p for k in BRANCHES for p in heads[k].params()]
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = make_rng(config.seed + 1)
    sched = AnnealSchedule(config.beta0, config.epochs)
    model = Model(heads, scalers, config)

    for epoch in range(1, config.epochs + 1):
        beta = anneal_beta(sched.at(epoch))
        order = rng.permutation(len(cases))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            f_ct = np.concatenate([feats[i][0] for i in idx], axis=1)
            f_pet = np.concatenate([feats[i][1] for i in idx], axis=1)
            y = np.concatenate([labels[i] for i in idx], axis=1)
            weights = {k: [Var(p) for p in heads[k].params()] for k in BRANCHES}
            results = forward_branches(
                heads, f_ct, f_pet, weights, config.detach_fusion, fixed_order=False
            )
            loss = deep_supervision_loss(results, y, beta, config.detach_up)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start}"
                )
            grads = backward(loss)
            opt.step([grads[w] for k in BRANCHES for w in weights[k]])
            for k in BRANCHES:
                heads[k].clip_widths(config.max_width)
            total += value * len(idx)
            count += len(idx)
        record = {"epoch": epoch, "beta": beta, "loss": total / count}
        if val_cases:
            record["val_dsc"] = float(np.mean([dsc(infer(model, c).mask, c.mask) for c in val_cases]))
        model.history.append(record)
        log.info("epoch %d loss %.5f", epoch, record["loss"])
        if progress:
            progress(record)
    return model


# inference ------------------------------------------------------------------


@dataclass
class BranchOutputs:
    """Per-branch SegResults (numpy) and the fused opinion map."""

    ct: SegResult
    pet: SegResult
    f: SegResult
    fused: object  # MapFusion
    shape: tuple

    @property
    def u_l(self):
        return self.fused.opinion.u

    @property
    def p_l(self):
        return self.fused.opinion.b + self.fused.opinion.u

    @property
    def mask(self):
        return argmax_mask(self.p_l)

    def branch_mask(self, key):
        return argmax_mask(getattr(self, key).p)


def argmax_mask(p):
    return np.argmax(p, axis=0).astype(np.uint8)


def _as_numpy(r, shape):
    return SegResult(
        r.alpha.value.reshape((C,) + shape),
        r.p.value.reshape((C,) + shape),
        r.u.value.reshape(shape),
    )


def branch_opinion(r):
    S = r.alpha.sum(axis=0)
    return Opinion((r.alpha - 1.0) / S, C / S)


def infer(model, case, eps_conflict=EPS_CONFLICT):
    """Per-branch results and the pixelwise Dempster-Shafer fusion for one case."""
    f_ct, f_pet = case_features(case, model.scalers)
    res = forward_branches(model.heads, f_ct, f_pet)
    shape = case.shape
    ct, pet, f = (_as_numpy(res[k], shape) for k in BRANCHES)
    fused = fuse_maps([branch_opinion(r) for r in (ct, pet, f)], eps_conflict)
    return BranchOutputs(ct, pet, f, fused, shape)


def evaluate_split(model, cases):
    """Mean per-case DSC of each branch and of the fused decision, plus mean u_L."""
    scores = {"ct": [], "pet": [], "f": [], "l": []}
    us = []
    for c in cases:
        out = infer(model, c)
        for k in BRANCHES:
            scores[k].append(dsc(out.branch_mask(k), c.mask))
        scores["l"].append(dsc(out.mask, c.mask))
        us.append(float(np.mean(out.u_l)))
    summary = {k: float(np.mean(v)) for k, v in scores.items()}
    summary["mean_u"] = float(np.mean(us))
    return summary


@dataclass
class SweepRow:
    level: float
    mean_dsc: float
    mean_u: float


@dataclass
class SweepReport:
    kind: str
    rows: list
    rank_corr: float
    flags: tuple = ()


def perturb_sweep(model, cases, specs, seed=0, ct=True, pet=True):
    """Mean fused DSC and mean u_L per perturbation level.

    ``rank_corr`` is the Spearman correlation between level index and mean
    u_L; it is ``nan`` (flagged) when fewer than two levels are given.
    """
    specs = list(specs)
    rows = []
    for spec in specs:
        dscs, us = [], []
        for i, c in enumerate(cases):
            pc = perturb_case(c, spec, seed + i, ct=ct, pet=pet)
            out = infer(model, pc)
            dscs.append(dsc(out.mask, c.mask))
            us.append(float(np.mean(out.u_l)))
        rows.append(SweepRow(spec.level, float(np.mean(dscs)), float(np.mean(us))))
    kind = specs[0].kind if specs else ""
    if len(rows) < 2:
        return SweepReport(kind, rows, float("nan"), ("rank_corr_undefined",))
    return SweepReport(kind, rows, rank_correlation([r.mean_u for r in rows]))


def rank_correlation(values):
    """Spearman correlation between position and value.

    Without ties this is the closed form ``1 - 6 sum d^2 / (n (n^2 - 1))``,
    exact in floating point for the extremes; ties fall back to scipy.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    ranks = stats.rankdata(values)
    if len(np.unique(values)) < n:
        return float(stats.spearmanr(np.arange(n), values).statistic)
    d2 = float(np.sum((ranks - np.arange(1, n + 1)) ** 2))
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))
