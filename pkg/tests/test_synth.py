import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from evfuse.errors import ContractViolation
from evfuse.metrics import dsc
from evfuse.synth import (
    PerturbSpec,
    SynthParams,
    case_seeds,
    ct_oracle,
    generate_case,
    generate_dataset,
    joint_oracle,
    normalize_ct,
    normalize_pet,
    perturb,
    perturb_case,
    pet_oracle,
)

seeds = st.integers(0, 2**63 - 1)


def same_case(a, b):
    return (
        np.array_equal(a.ct, b.ct)
        and np.array_equal(a.pet, b.pet)
        and np.array_equal(a.mask, b.mask)
        and a.meta == b.meta
    )


@settings(max_examples=15)
@given(seeds)
def test_generation_is_deterministic(seed):
    assert same_case(generate_case(seed), generate_case(seed))


def test_different_seeds_differ():
    assert not np.array_equal(generate_case(1).ct, generate_case(2).ct)


def test_case_contract():
    c = generate_case(5, 48, 40)
    assert c.ct.shape == c.pet.shape == c.mask.shape == (48, 40)
    assert c.ct.min() >= -1 and c.ct.max() <= 1
    assert abs(c.pet.mean()) <= 1e-12 and abs(c.pet.std() - 1) <= 1e-12
    assert c.mask.any() and set(np.unique(c.mask)) <= {0, 1}
    with pytest.raises(ContractViolation):
        generate_case(0, 31, 64)
    with pytest.raises(ContractViolation):
        SynthParams(tumor_radius_min=0.0)


@settings(max_examples=20)
@given(seeds)
def test_tumour_is_one_four_connected_component(seed):
    c = generate_case(seed)
    _, n = ndimage.label(c.mask)  # default structure is 4-connectivity
    assert n == 1


def test_tumour_sits_in_organ_and_decoy_outside():
    for seed in range(20):
        c = generate_case(seed)
        assert np.all(c.truth["organ"][c.mask.astype(bool)])
        assert not np.any(c.truth["organ"] & c.truth["decoy"])


def test_without_decoy_pet_oracle_is_perfect():
    params = SynthParams(decoy=False, pet_noise=0.0, ct_noise_hu=0.0)
    for seed in range(5):
        c = generate_case(seed, params=params)
        assert dsc(pet_oracle(c), c.mask) == 100.0


def test_joint_oracle_beats_single_modality_oracles():
    cases = generate_dataset(50, 7)
    score = {f.__name__: np.mean([dsc(f(c), c.mask) for c in cases]) for f in (ct_oracle, pet_oracle, joint_oracle)}
    assert score["joint_oracle"] > score["ct_oracle"]
    assert score["joint_oracle"] > score["pet_oracle"]


def test_dataset_negative_share_is_exact():
    cases = generate_dataset(40, 3, negative_ratio=0.25)
    negatives = [c for c in cases if not c.mask.any()]
    assert len(negatives) == 10
    assert all(c.meta["tumor"] == 0 for c in negatives)
    assert len(set(case_seeds(3, 40))) == 40


def test_normalize_ct_examples():
    np.testing.assert_array_equal(normalize_ct([1024.0, -2000.0, 0.0, 512.0]), [1.0, -1.0, 0.0, 0.5])


def test_normalize_pet_examples(rng):
    np.testing.assert_array_equal(normalize_pet([0.0, 2.0]), [-1.0, 1.0])
    with pytest.raises(ContractViolation):
        normalize_pet(np.full((3, 3), 4.0))
    x = rng.normal(size=(8, 8))
    np.testing.assert_allclose(normalize_pet(3.5 * x + 7), normalize_pet(x), atol=1e-13)


def test_perturb_noise_statistics():
    img = np.zeros((256, 256))
    assert np.array_equal(perturb(img, PerturbSpec("noise", 0.0), 1), img)
    out = perturb(img, PerturbSpec("noise", 0.1), 1)
    assert 0.09 <= np.var(out - img) <= 0.11
    np.testing.assert_array_equal(out, perturb(img, PerturbSpec("noise", 0.1), 1))


def test_perturb_mask_coverage():
    img = np.random.default_rng(0).normal(size=(256, 256))
    out = perturb(img, PerturbSpec("mask", ratio=0.04), 2)
    covered = np.mean(out != img)
    assert 0.04 <= covered <= 0.045
    assert np.all(out[out != img] == img.min())
    assert np.array_equal(perturb(img, PerturbSpec("mask", ratio=0.0), 2), img)


def test_perturb_spec_validation():
    with pytest.raises(ContractViolation):
        PerturbSpec("blur")
    with pytest.raises(ContractViolation):
        PerturbSpec("mask", ratio=1.0)
    with pytest.raises(ContractViolation):
        PerturbSpec("noise", variance=-0.1)
    with pytest.raises(ContractViolation):
        PerturbSpec("mask", ratio=0.1, box=0)


@settings(max_examples=10)
@given(seeds)
def test_distortion_grows_with_level(seed):
    c = generate_case(seed % 1000)
    for kind, key, levels in (("noise", "variance", (0, 0.1, 0.2, 0.3)), ("mask", "ratio", (0, 0.04, 0.08))):
        msd = [np.mean((perturb(c.pet, PerturbSpec(kind, **{key: lv}), seed) - c.pet) ** 2) for lv in levels]
        assert all(b > a for a, b in zip(msd, msd[1:]))


def test_perturb_case_switches():
    c = generate_case(3)
    spec = PerturbSpec("noise", 0.2)
    only_ct = perturb_case(c, spec, 9, pet=False)
    assert np.array_equal(only_ct.pet, c.pet) and not np.array_equal(only_ct.ct, c.ct)
    both = perturb_case(c, spec, 9)
    assert not np.array_equal(both.pet, c.pet)
    assert np.array_equal(both.mask, c.mask)
