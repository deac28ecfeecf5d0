import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special as sp

from evfuse.errors import ContractViolation
from evfuse.losses import (
    AnnealSchedule,
    anneal_beta,
    l_ace,
    l_dice,
    l_kl,
    l_seg,
    l_up,
    loss_value,
    one_hot,
    seg_result,
)
from evfuse.tensor import Var, backward, grad_check

Y10 = np.array([1.0, 0.0])


def random_point(rng, C=None, shape=(2, 3)):
    C = C or int(rng.integers(2, 5))
    labels = rng.integers(0, C, size=shape)
    y = np.eye(C)[labels].transpose(2, 0, 1)
    # alpha >= 1.1 keeps p = b + u >= 0.01 in the UP term
    alpha = 1.1 + rng.exponential(3.0, size=(C,) + shape)
    return alpha, y


# oracles built on scipy.special -------------------------------------------------


def ace_oracle(alpha, y):
    S = alpha.sum(axis=0)
    return np.mean((y * (sp.digamma(S) - sp.digamma(alpha))).sum(axis=0))


def kl_oracle(alpha, y):
    at = y + (1 - y) * alpha
    St = at.sum(axis=0)
    C = alpha.shape[0]
    per = (
        sp.gammaln(St) - sp.gammaln(at).sum(axis=0) - sp.gammaln(C)
        + ((at - 1) * (sp.digamma(at) - sp.digamma(St))).sum(axis=0)
    )
    return np.mean(per)


def up_oracle(alpha, y):
    S = alpha.sum(axis=0)
    u = alpha.shape[0] / S
    p = (alpha - 1) / S + u
    return np.mean(-u * (y * np.log(p)).sum(axis=0))


def dice_oracle(p, y, smooth=1e-5):
    total = 0.0
    for c in range(p.shape[0]):
        inter = np.sum(p[c] * y[c])
        total += 1 - (2 * inter + smooth) / (np.sum(y[c]) + np.sum(p[c]) + smooth)
    return total


# examples ------------------------------------------------------------------------


def test_ace_examples():
    assert loss_value(l_ace([1.0, 1.0], Y10)) == pytest.approx(1.0, abs=1e-12)
    assert loss_value(l_ace([3.0, 2.0], Y10)) == pytest.approx(1 / 3 + 1 / 4, abs=1e-12)
    assert loss_value(l_ace([1e6, 1.0], Y10)) < 1e-5


def test_kl_examples():
    for a in (1.0, 2.5, 1e4):
        assert loss_value(l_kl([a, 1.0], Y10)) == 0.0
    assert loss_value(l_kl([2.0, 3.0], Y10)) == pytest.approx(math.log(3) - 2 / 3, abs=1e-12)
    assert loss_value(l_kl([1.0, 5.0], [0.0, 1.0])) == 0.0


def test_dice_examples():
    y = np.array([[1.0, 1.0, 0.0, 0.0]])
    assert loss_value(l_dice(y, y)) <= 1e-4
    p = np.array([[1.0, 0.0, 0.0, 0.0]])
    assert loss_value(l_dice(p, y)) == pytest.approx(1 - (2 + 1e-5) / (3 + 1e-5), abs=1e-15)
    yb = one_hot(np.array([[1, 0], [0, 1]]))
    assert loss_value(l_dice(1 - yb, yb)) == pytest.approx(2.0, abs=1e-4)


def test_up_examples():
    y = Y10.reshape(2, 1)
    assert loss_value(l_up(np.array([[0.3], [0.9]]), np.zeros(1), y)) == 0.0
    assert loss_value(l_up(np.array([[0.5], [0.7]]), np.ones(1), y)) == pytest.approx(math.log(2), abs=1e-15)
    assert loss_value(l_up(np.array([[1.0], [0.5]]), np.array([0.5]), y)) == 0.0


def test_up_clamp_counts_diagnostics():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = np.array([[0.0, 0.5], [1.0, 0.5]])
    diag = {}
    val = loss_value(l_up(p, np.ones(2), y, diagnostics=diag))
    assert diag["up_clamped"] == 1
    assert val == pytest.approx((-math.log(1e-12) - math.log(0.5)) / 2, rel=1e-12)


def test_seg_composition_example():
    alpha = np.array([3.0, 2.0])
    r = seg_result(alpha)
    assert r.u.item() == pytest.approx(0.4)
    np.testing.assert_allclose(r.p.value, [0.8, 0.6], atol=1e-15)
    ace = 1 / 3 + 1 / 4
    up = -0.4 * math.log(0.8)
    kl = loss_value(l_kl(alpha, Y10))
    dice = loss_value(l_dice(r.p, Y10))
    expected = 0.5 * ace + 0.5 * up + kl + dice
    assert loss_value(l_seg(r, Y10, 0.5)) == pytest.approx(expected, abs=1e-12)


def test_seg_beta_endpoints(rng):
    alpha, y = random_point(rng, C=2)
    r = seg_result(alpha)
    ace, up = loss_value(l_ace(alpha, y)), loss_value(l_up(r.p, r.u, y))
    kl, dice = loss_value(l_kl(alpha, y)), loss_value(l_dice(r.p, y))
    assert loss_value(l_seg(r, y, 0.0)) == pytest.approx(ace + kl + dice, rel=1e-14)
    assert loss_value(l_seg(r, y, AnnealSchedule(0.01, 10, 10))) == pytest.approx(up + kl + dice, rel=1e-14)


def test_label_validation():
    with pytest.raises(ContractViolation):
        l_ace([2.0, 2.0], [1.0, 1.0])
    with pytest.raises(ContractViolation):
        l_ace([2.0, 2.0], [0.5, 0.5])
    with pytest.raises(ContractViolation):
        l_dice(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ContractViolation):
        l_up(np.ones((2, 3)), np.ones(2), np.eye(2)[[0, 1, 0]].T)


def test_one_hot():
    np.testing.assert_array_equal(one_hot(np.array([[0, 1]])), [[[1, 0]], [[0, 1]]])


# oracles and properties -------------------------------------------------------------


def test_losses_match_scipy_oracles(rng):
    for _ in range(50):
        alpha, y = random_point(rng)
        r = seg_result(alpha)
        assert loss_value(l_ace(alpha, y)) == pytest.approx(ace_oracle(alpha, y), rel=1e-11, abs=1e-12)
        assert loss_value(l_kl(alpha, y)) == pytest.approx(kl_oracle(alpha, y), rel=1e-10, abs=1e-12)
        assert loss_value(l_up(r.p, r.u, y)) == pytest.approx(up_oracle(alpha, y), rel=1e-13)
        p = r.p.value
        assert loss_value(l_dice(p, y)) == pytest.approx(dice_oracle(p, y), rel=1e-13)


@given(st.integers(0, 2**32 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    alpha, y = random_point(rng)
    alpha = 1.0 + rng.exponential(rng.choice([0.01, 1.0, 100.0]), size=alpha.shape)
    r = seg_result(alpha)
    assert loss_value(l_ace(alpha, y)) >= 0
    assert loss_value(l_kl(alpha, y)) >= -1e-12
    assert loss_value(l_up(r.p, r.u, y)) >= 0
    assert loss_value(l_dice(r.p.value.clip(0, 1), y)) >= 0


@given(st.floats(1.0, 1e4), st.floats(0.01, 100.0), st.floats(1.0, 50.0))
def test_ace_decreases_with_true_class_evidence(a, extra, other):
    lo = loss_value(l_ace([a, other], Y10))
    hi = loss_value(l_ace([a + extra, other], Y10))
    assert hi < lo


@given(st.floats(1.0, 1e4), st.floats(1.0, 1e4), st.floats(1.0, 50.0))
def test_kl_ignores_true_class_evidence(a1, a2, other):
    assert loss_value(l_kl([a1, other], Y10)) == loss_value(l_kl([a2, other], Y10))


# gradients ------------------------------------------------------------------------


LOSS_FNS = {
    "ace": lambda y: (lambda a: l_ace(a, y)),
    "kl": lambda y: (lambda a: l_kl(a, y)),
    "dice": lambda y: (lambda a: l_dice(seg_result(a).p, y)),
    "up": lambda y: (lambda a: l_up(seg_result(a).p, seg_result(a).u, y)),
    "seg": lambda y: (lambda a: l_seg(seg_result(a), y, 0.37)),
}


@pytest.mark.parametrize("name", sorted(LOSS_FNS))
def test_grad_check_with_respect_to_evidence(name, rng):
    worst = 0.0
    for _ in range(100):
        alpha, y = random_point(rng)
        e = alpha - 1.0
        f = LOSS_FNS[name](y)
        worst = max(worst, grad_check(lambda v: f(v + 1.0), e))
    assert worst <= 1e-4


def test_detach_u_changes_gradient(rng):
    alpha, y = random_point(rng, C=2)
    grads = []
    for detach in (False, True):
        a = Var(alpha)
        r = seg_result(a)
        grads.append(backward(l_up(r.p, r.u, y, detach_u=detach))[a])
    assert not np.allclose(grads[0], grads[1])
    assert np.all(np.isfinite(grads[1]))


# annealing --------------------------------------------------------------------------


def test_anneal_examples():
    assert anneal_beta(AnnealSchedule(0.01, 100, 0)) == 0.01
    assert anneal_beta(AnnealSchedule(0.01, 100, 100)) == pytest.approx(1.0, abs=1e-12)
    assert anneal_beta(AnnealSchedule(0.01, 100, 50)) == pytest.approx(0.1, abs=1e-12)
    assert anneal_beta(AnnealSchedule(0.3, 0, 0)) == 1.0


@given(st.floats(1e-6, 0.999), st.integers(1, 500))
def test_anneal_endpoints_and_monotone(beta0, T):
    s = AnnealSchedule(beta0, T)
    betas = [anneal_beta(s.at(t)) for t in range(T + 1)]
    assert abs(betas[0] - beta0) <= 1e-12
    assert abs(betas[-1] - 1.0) <= 1e-12
    assert all(b1 > b0 for b0, b1 in zip(betas, betas[1:]))


def test_anneal_validation():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ContractViolation):
            AnnealSchedule(bad, 10)
    with pytest.raises(ContractViolation):
        AnnealSchedule(0.1, 10, 11)
