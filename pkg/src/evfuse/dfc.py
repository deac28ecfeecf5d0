"""Forward passes of the dual-attention feature calibrating blocks.

``cma_forward`` fuses encoder features with symmetric cross-modality
attention; ``uc_forward`` calibrates decoder features with down-sampled
uncertainty planes.  Both are reference forwards with fixed weights: no
backward pass is provided.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ContractViolation


def conv1x1(x, w, b=None):
    """``x``: [Cin, H, W], ``w``: [Cout, Cin]."""
    out = np.einsum("oc,chw->ohw", w, x)
    if b is not None:
        out = out + np.asarray(b)[:, None, None]
    return out


def conv3x3(x, w, b=None):
    """Zero-padded 'same' 3x3 convolution; ``w``: [Cout, Cin, 3, 3]."""
    cin, H, W = x.shape
    if w.shape[1:] != (cin, 3, 3):
        raise ContractViolation(f"3x3 kernel {w.shape} does not fit {cin} input channels")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], H, W))
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", w[:, :, dy, dx], xp[:, dy : dy + H, dx : dx + W])
    if b is not None:
        out = out + np.asarray(b)[:, None, None]
    return out


@dataclass(frozen=True)
class ConvWeights:
    """Kernels for both blocks.

    CMA: per-modality 1x1 query/key/value projections ``[C, C]`` and a 3x3
    kernel ``[C, 2C, 3, 3]`` restoring C channels after concatenation.
    UC: per-modality 1x1 kernels ``[C, C]`` and its own 3x3 fuse kernel.
    """

    q_ct: np.ndarray
    k_ct: np.ndarray
    v_ct: np.ndarray
    q_pet: np.ndarray
    k_pet: np.ndarray
    v_pet: np.ndarray
    cma_out: np.ndarray
    cma_out_bias: np.ndarray
    uc_ct: np.ndarray
    uc_pet: np.ndarray
    uc_out: np.ndarray
    uc_out_bias: np.ndarray

    def __post_init__(self):
        C = self.channels
        square = ("q_ct", "k_ct", "v_ct", "q_pet", "k_pet", "v_pet", "uc_ct", "uc_pet")
        for name in square:
            if np.shape(getattr(self, name)) != (C, C):
                raise ContractViolation(f"{name} must be [{C}, {C}]")
        for name in ("cma_out", "uc_out"):
            if np.shape(getattr(self, name)) != (C, 2 * C, 3, 3):
                raise ContractViolation(f"{name} must be [{C}, {2 * C}, 3, 3]")
        for name in ("cma_out_bias", "uc_out_bias"):
            if np.shape(getattr(self, name)) != (C,):
                raise ContractViolation(f"{name} must be [{C}]")

    @property
    def channels(self):
        return np.shape(self.q_ct)[0]

    def as_dict(self):
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: np.asarray(d[f.name], dtype=np.float64) for f in fields(cls)})

    @classmethod
    def random(cls, C, seed=0):
        rng = np.random.Generator(np.random.PCG64(seed))
        lim1 = 1.0 / math.sqrt(C)
        lim3 = 1.0 / math.sqrt(2 * C * 9)
        sq = lambda: rng.uniform(-lim1, lim1, (C, C))  # noqa: E731
        return cls(
            q_ct=sq(), k_ct=sq(), v_ct=sq(), q_pet=sq(), k_pet=sq(), v_pet=sq(),
            cma_out=rng.uniform(-lim3, lim3, (C, 2 * C, 3, 3)),
            cma_out_bias=rng.uniform(-lim3, lim3, C),
            uc_ct=sq(), uc_pet=sq(),
            uc_out=rng.uniform(-lim3, lim3, (C, 2 * C, 3, 3)),
            uc_out_bias=rng.uniform(-lim3, lim3, C),
        )

    @classmethod
    def identity(cls, C):
        """Identity projections and a 3x3 kernel that sums the two halves at the centre tap."""
        eye = np.eye(C)
        fuse = np.zeros((C, 2 * C, 3, 3))
        fuse[:, :C, 1, 1] = eye
        fuse[:, C:, 1, 1] = eye
        return cls(eye, eye, eye, eye, eye, eye, fuse, np.zeros(C), eye, eye, fuse.copy(), np.zeros(C))


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _attend(q_feat, kv_feat, wq, wk, wv):
    C, H, W = q_feat.shape
    q = conv1x1(q_feat, wq).reshape(C, H * W)
    k = conv1x1(kv_feat, wk).reshape(C, H * W)
    v = conv1x1(kv_feat, wv).reshape(C, H * W)
    attn = _softmax_rows(q.T @ k / math.sqrt(C))
    return (v @ attn.T).reshape(C, H, W), attn


def _check_features(a, b, w):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or a.shape != b.shape:
        raise ContractViolation(f"feature shapes differ or are not [C, H, W]: {a.shape} vs {b.shape}")
    if a.shape[0] != w.channels:
        raise ContractViolation(f"features have {a.shape[0]} channels, weights expect {w.channels}")
    return a, b


def cma_forward(e_ct, e_pet, w, return_attention=False):
    """Symmetric cross-modality attention.

    CT queries attend over PET keys/values and PET queries over CT
    keys/values (scaled dot product, row softmax over spatial tokens).  The
    two attended maps are concatenated and a 3x3 convolution restores C
    channels.
    """
    e_ct, e_pet = _check_features(e_ct, e_pet, w)
    ct_att, a_ct = _attend(e_ct, e_pet, w.q_ct, w.k_pet, w.v_pet)
    pet_att, a_pet = _attend(e_pet, e_ct, w.q_pet, w.k_ct, w.v_ct)
    out = conv3x3(np.concatenate([ct_att, pet_att]), w.cma_out, w.cma_out_bias)
    if return_attention:
        return out, (a_ct, a_pet)
    return out


def downsample_area(u, shape):
    """Block-mean pooling of a plane to ``shape`` (integer ratios only)."""
    u = np.asarray(u, dtype=np.float64)
    H0, W0 = u.shape
    H, W = shape
    if H < 1 or W < 1 or H0 % H or W0 % W:
        raise ContractViolation(f"cannot area-downsample {u.shape} to {tuple(shape)}")
    fy, fx = H0 // H, W0 // W
    return u.reshape(H, fy, W, fx).mean(axis=(1, 3))


def calibrate(d, u_plane, w1x1):
    """``d + down(u) * conv1x1(d)`` for one modality."""
    return d + downsample_area(u_plane, d.shape[1:])[None] * conv1x1(d, w1x1)


def uc_forward(d_ct, d_pet, u_ct, u_pet, w, return_calibrated=False):
    """Uncertainty calibrator: residual uncertainty-weighted 1x1 terms, concat, 3x3 conv."""
    d_ct, d_pet = _check_features(d_ct, d_pet, w)
    c_ct = calibrate(d_ct, u_ct, w.uc_ct)
    c_pet = calibrate(d_pet, u_pet, w.uc_pet)
    out = conv3x3(np.concatenate([c_ct, c_pet]), w.uc_out, w.uc_out_bias)
    if return_calibrated:
        return out, (c_ct, c_pet)
    return out
