import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evfuse.cfl import (
    BranchTerms,
    TGAWeights,
    adv_loss,
    cfl_total,
    l1_pair,
    tga_forward,
    tga_gates,
)
from evfuse.errors import ContractViolation

scores = st.floats(1e-6, 1 - 1e-6)


def test_adv_loss_examples():
    assert adv_loss(1 - 1e-12, 1e-12) == pytest.approx(0.0, abs=1e-11)
    assert adv_loss(0.5, 0.5) == 2 * math.log(2)
    assert adv_loss(0.9, 0.1) == pytest.approx(-2 * math.log(0.9), abs=1e-15)
    assert adv_loss(0.9, 0.1) == pytest.approx(0.210721, abs=1e-6)


def test_adv_loss_clamps_and_averages():
    assert math.isfinite(adv_loss(0.0, 1.0))
    assert adv_loss([0.5, 0.9], [0.5, 0.1]) == pytest.approx(
        (-math.log(0.5) - math.log(0.9)) / 2 * 2, abs=1e-15
    )


@given(scores, scores)
def test_adv_loss_nonnegative(r, f):
    assert adv_loss(r, f) >= 0


def test_l1_pair_examples():
    z, o = np.zeros((3, 3)), np.ones((3, 3))
    m = np.eye(3)
    assert l1_pair(o, o, m, m) == 0.0
    assert l1_pair(z, o, m, m) == 1.0
    assert l1_pair([0.0, 2.0], [1.0, 0.0], m, m) == 1.5
    with pytest.raises(ContractViolation):
        l1_pair(z, np.zeros(2), m, m)


@given(st.integers(0, 2**32 - 1))
def test_l1_symmetry_and_triangle(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
    y, yh, yc = (rng.integers(0, 2, (4, 4)).astype(float) for _ in range(3))
    assert l1_pair(a, b, y, yh) == l1_pair(b, a, yh, y)
    assert l1_pair(a, c, y, yc) <= l1_pair(a, b, y, yh) + l1_pair(b, c, yh, yc) + 1e-12


def test_cfl_total_examples():
    zero = BranchTerms(0, 0, 0)
    one = BranchTerms(1, 1, 1)
    assert cfl_total(zero, zero) == 0
    assert cfl_total(one, one) == 204
    assert cfl_total(one, one, lambda_l1=1) == 6


def test_tga_extreme_gates(rng):
    f_t, f_m = rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 4, 4))
    w = TGAWeights.random(3, 2, seed=1)
    open_w = TGAWeights(w.w1, w.b1, w.w2, np.full(2, 1e3))
    shut_w = TGAWeights(w.w1, w.b1, w.w2, np.full(2, -1e3))
    np.testing.assert_array_equal(tga_forward(f_t, f_m, open_w), f_m)
    np.testing.assert_array_equal(tga_forward(f_t, f_m, shut_w), np.zeros_like(f_m))


def test_tga_matches_loop_oracle(rng):
    f_t, f_m = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    w = TGAWeights.random(2, 2, seed=3)
    pooled = [sum(f_t[c, i, j] for i in range(2) for j in range(2)) / 4 for c in range(2)]
    hidden = [max(0.0, sum(w.w1[h, c] * pooled[c] for c in range(2)) + w.b1[h]) for h in range(len(w.b1))]
    gates = [1 / (1 + math.exp(-(sum(w.w2[c, h] * hidden[h] for h in range(len(hidden))) + w.b2[c])))
             for c in range(2)]
    out = tga_forward(f_t, f_m, w)
    for c in range(2):
        for i in range(2):
            for j in range(2):
                assert out[c, i, j] == pytest.approx(gates[c] * f_m[c, i, j], rel=1e-14)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_tga_positively_homogeneous_in_modality_features(seed, k):
    rng = np.random.Generator(np.random.PCG64(seed))
    f_t, f_m = rng.normal(size=(4, 3, 3)), rng.normal(size=(3, 3, 3))
    w = TGAWeights.random(4, 3, seed=seed % 1000)
    np.testing.assert_allclose(tga_forward(f_t, k * f_m, w), k * tga_forward(f_t, f_m, w), rtol=1e-14)


def test_tga_shapes_and_errors(rng):
    w = TGAWeights.random(5, 3)
    assert w.w1.shape == (3, 5)
    g = tga_gates(rng.normal(size=(5, 2, 2)), w)
    assert g.shape == (3,) and np.all((g > 0) & (g < 1))
    with pytest.raises(ContractViolation):
        tga_forward(rng.normal(size=(4, 2, 2)), rng.normal(size=(3, 2, 2)), w)
    with pytest.raises(ContractViolation):
        tga_forward(rng.normal(size=(5, 2, 2)), rng.normal(size=(2, 2, 2)), w)
    with pytest.raises(ContractViolation):
        TGAWeights(np.ones((2, 3)), np.ones(3), np.ones((2, 2)), np.ones(2))
