"""Deterministic bimodal (CT-like / PET-like) 2D cases with complementary information.

Anatomy:

* CT shows the body, a host organ and a dense organ at high contrast.  The
  tumour sits inside the host organ and is almost iso-intense with it (a
  faint, soft-edged lesion).  The host organ also carries look-alike lesions
  of the same contrast, so CT alone cannot tell which lesion is the tumour.
* PET shows mild organ uptake, a hot tumour and a decoy hot-spot outside the
  host organ whose intensity comes from the same distribution as the
  tumour's.  PET alone cannot tell the tumour from the decoy.

Only the combination identifies the tumour: the hot lesion inside the host
organ.

Randomness comes from numpy's PCG64 bit generator (``numpy.random.PCG64``)
seeded with the case seed; nothing reads the wall clock.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ContractViolation

HU_CLIP = 1024.0


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class SynthParams:
    tumor: bool = True
    tumor_radius_min: float = 4.0
    tumor_radius_max: float = 7.0
    decoy: bool = True
    mimics: int = 2
    air_hu: float = -1000.0
    body_hu: float = -100.0
    organ_hu: float = 60.0
    dense_hu: float = 300.0
    lesion_contrast_hu: float = 25.0
    lesion_edge: float = 1.5
    ct_noise_hu: float = 12.0
    pet_body: float = 1.0
    pet_organ: float = 1.4
    pet_hot_min: float = 3.0
    pet_hot_max: float = 5.0
    pet_psf: float = 0.8
    pet_noise: float = 0.15

    def __post_init__(self):
        if self.tumor_radius_min <= 0 or self.tumor_radius_max < self.tumor_radius_min:
            raise ContractViolation("tumour radius range must be positive and ordered")
        if self.mimics < 0 or self.ct_noise_hu < 0 or self.pet_noise < 0 or self.pet_psf < 0:
            raise ContractViolation("counts and noise levels must be nonnegative")


@dataclass
class Case:
    ct: np.ndarray
    pet: np.ndarray
    mask: np.ndarray
    seed: int
    meta: dict
    truth: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return self.ct.shape


def normalize_ct(raw):
    """Clip to [-1024, 1024] HU and scale to [-1, 1]."""
    return np.clip(np.asarray(raw, dtype=np.float64), -HU_CLIP, HU_CLIP) / HU_CLIP


def normalize_pet(raw):
    """Z-score over the whole image (population standard deviation)."""
    x = np.asarray(raw, dtype=np.float64)
    mu = x.mean()
    sd = x.std()
    if not sd > 0:
        raise ContractViolation("PET image has zero variance")
    return (x - mu) / sd


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2


def _soft_disk(dist, r, edge):
    # 1 inside, 0 outside, linear ramp of width `edge` centred on the rim
    return np.clip((r - dist) / edge + 0.5, 0.0, 1.0)


def _sample_inside(rng, region, margin_map, need, tries=2000):
    """Pick a pixel of ``region`` whose ``margin_map`` value is >= need."""
    ok = np.argwhere(region & (margin_map >= need))
    if len(ok) == 0:
        return None
    return tuple(ok[rng.integers(len(ok))])


def generate_case(seed, H=64, W=64, params=None):
    """Build one case deterministically from ``(seed, H, W, params)``."""
    params = params or SynthParams()
    if H < 32 or W < 32:
        raise ContractViolation("cases must be at least 32x32")
    rng = make_rng(seed)
    s = min(H, W) / 64.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    cy, cx = (H - 1) / 2, (W - 1) / 2
    body = _ellipse(yy, xx, cy, cx, 0.46 * H, 0.46 * W) <= 1.0

    oy = cy + rng.uniform(-3, 3) * s
    ox = cx + rng.uniform(-10, -6) * s
    ory, orx = rng.uniform(13, 16) * s, rng.uniform(11, 14) * s
    organ = _ellipse(yy, xx, oy, ox, ory, orx) <= 1.0

    dy = cy + rng.uniform(-12, 12) * s
    dx = cx + rng.uniform(14, 18) * s
    dense = (_ellipse(yy, xx, dy, dx, rng.uniform(4, 6) * s, rng.uniform(3, 5) * s) <= 1.0) & ~organ

    # distance from each pixel to the nearest pixel outside the organ / body
    organ_depth = ndimage.distance_transform_edt(organ)
    body_depth = ndimage.distance_transform_edt(body)
    outside_organ = ndimage.distance_transform_edt(~organ)

    r_t = rng.uniform(params.tumor_radius_min, params.tumor_radius_max) * s
    hot_t = rng.uniform(params.pet_hot_min, params.pet_hot_max)
    r_d = rng.uniform(params.tumor_radius_min, params.tumor_radius_max) * s
    hot_d = rng.uniform(params.pet_hot_min, params.pet_hot_max)

    lesions = []  # (cy, cx, r) of CT-visible lesions in the organ
    tumor_mask = np.zeros((H, W), dtype=bool)
    tumor_soft = np.zeros((H, W))
    meta = {"seed": int(seed), "H": H, "W": W, "tumor": int(params.tumor)}
    if params.tumor:
        c = _sample_inside(rng, organ, organ_depth, r_t + 1.5)
        if c is None:
            raise ContractViolation("tumour does not fit inside the host organ")
        dist = np.hypot(yy - c[0], xx - c[1])
        tumor_mask = dist <= r_t
        tumor_soft = _soft_disk(dist, r_t, params.lesion_edge * s)
        lesions.append((c, r_t))
        meta.update(tumor_cy=int(c[0]), tumor_cx=int(c[1]), tumor_r=round(r_t, 6))

    mimic_soft = np.zeros((H, W))
    mimic_mask = np.zeros((H, W), dtype=bool)
    for _ in range(params.mimics):
        r_m = rng.uniform(params.tumor_radius_min, params.tumor_radius_max) * s * 0.8
        taken = np.zeros((H, W), dtype=bool)
        for (ly, lx), lr in lesions:
            taken |= np.hypot(yy - ly, xx - lx) <= lr + r_m + 2.0
        c = _sample_inside(rng, organ & ~taken, organ_depth, r_m + 1.0)
        if c is None:
            continue
        dist = np.hypot(yy - c[0], xx - c[1])
        mimic_soft = np.maximum(mimic_soft, _soft_disk(dist, r_m, params.lesion_edge * s))
        mimic_mask |= dist <= r_m
        lesions.append((c, r_m))

    decoy_mask = np.zeros((H, W), dtype=bool)
    if params.decoy:
        room = np.minimum(outside_organ - r_d - 3.0, body_depth - r_d - 2.0)
        c = _sample_inside(rng, body & ~organ, room, 0.0)
        if c is None:
            raise ContractViolation("decoy does not fit outside the host organ")
        decoy_mask = np.hypot(yy - c[0], xx - c[1]) <= r_d
        meta.update(decoy_cy=int(c[0]), decoy_cx=int(c[1]), decoy_r=round(r_d, 6))

    ct_raw = np.full((H, W), params.air_hu)
    ct_raw[body] = params.body_hu
    ct_raw[dense] = params.dense_hu
    ct_raw[organ] = params.organ_hu
    ct_raw += params.lesion_contrast_hu * np.maximum(tumor_soft, mimic_soft)
    ct_raw += params.ct_noise_hu * rng.standard_normal((H, W))

    hot = hot_t * tumor_mask + hot_d * decoy_mask
    pet_raw = params.pet_body * body + (params.pet_organ - params.pet_body) * organ + hot
    if params.pet_psf > 0:
        pet_raw = ndimage.gaussian_filter(pet_raw, params.pet_psf * s, mode="constant")
    pet_raw = pet_raw + params.pet_noise * rng.standard_normal((H, W))

    meta.update({k: v for k, v in asdict(params).items()})
    truth = {
        "organ": organ,
        "ct_lesions": tumor_mask | mimic_mask,
        "pet_hot": tumor_mask | decoy_mask,
        "decoy": decoy_mask,
        "mimics": mimic_mask,
    }
    return Case(
        ct=normalize_ct(ct_raw),
        pet=normalize_pet(pet_raw),
        mask=tumor_mask.astype(np.uint8),
        seed=int(seed),
        meta=meta,
        truth=truth,
    )


def case_seeds(seed, n):
    """Independent per-case seeds derived from one master seed."""
    children = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [int(c) for c in children]


def generate_dataset(n, seed, H=64, W=64, params=None, negative_ratio=0.25):
    """``n`` cases; a ``negative_ratio`` share (rounded) is tumour-free.

    Which cases are negative is a seeded permutation, so the split is exact
    rather than binomial.
    """
    params = params or SynthParams()
    seeds = case_seeds(seed, n)
    n_neg = int(round(negative_ratio * n))
    order = make_rng(seed).permutation(n)
    negative = set(order[:n_neg].tolist())
    cases = []
    for i, cs in enumerate(seeds):
        p = replace(params, tumor=False) if i in negative else params
        cases.append(generate_case(cs, H, W, p))
    return cases


# oracle segmenters built from the generator's ground truth -----------------


def ct_oracle(case):
    """Best CT-only call: every organ lesion (tumour and look-alikes)."""
    return case.truth["ct_lesions"].astype(np.uint8)


def pet_oracle(case):
    """Best PET-only call: every hot-spot (tumour and decoy)."""
    return case.truth["pet_hot"].astype(np.uint8)


def joint_oracle(case):
    return (case.truth["ct_lesions"] & case.truth["pet_hot"]).astype(np.uint8)


# perturbations -------------------------------------------------------------


@dataclass(frozen=True)
class PerturbSpec:
    kind: str = "noise"
    variance: float = 0.0
    ratio: float = 0.0
    box: int = 3

    def __post_init__(self):
        if self.kind not in ("noise", "mask"):
            raise ContractViolation(f"unknown perturbation kind {self.kind!r}")
        if self.variance < 0:
            raise ContractViolation("noise variance must be >= 0")
        if not 0.0 <= self.ratio < 1.0:
            raise ContractViolation("mask ratio must lie in [0, 1)")
        if self.box < 1:
            raise ContractViolation("box side must be >= 1")

    @property
    def level(self):
        return self.variance if self.kind == "noise" else self.ratio


def perturb(img, spec, seed):
    """Additive Gaussian noise or random black boxes, deterministic per seed.

    Mask boxes take the image minimum and are dropped at uniform positions
    (overlap allowed) until at least ``ratio`` of the pixels are covered.
    """
    img = np.asarray(img, dtype=np.float64)
    rng = make_rng(seed)
    if spec.kind == "noise":
        if spec.variance == 0:
            return img.copy()
        return img + math.sqrt(spec.variance) * rng.standard_normal(img.shape)

    out = img.copy()
    if spec.ratio == 0:
        return out
    H, W = img.shape
    b = spec.box
    if b > H or b > W:
        raise ContractViolation("mask box larger than the image")
    covered = np.zeros((H, W), dtype=bool)
    target = spec.ratio * H * W
    floor = img.min()
    n = 0
    while n < target:
        y = int(rng.integers(0, H - b + 1))
        x = int(rng.integers(0, W - b + 1))
        covered[y : y + b, x : x + b] = True
        n = int(covered.sum())
    out[covered] = floor
    return out


def perturb_case(case, spec, seed, ct=True, pet=True):
    """Apply ``spec`` to the chosen modalities (independent streams per modality)."""
    s_ct, s_pet = case_seeds(seed, 2)
    return replace(
        case,
        ct=perturb(case.ct, spec, s_ct) if ct else case.ct,
        pet=perturb(case.pet, spec, s_pet) if pet else case.pet,
    )
