import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from distill_lab.distill import (TemperatureSchedule, VanillaKdConfig, allocate_epochs,
                                 annealing_target, one_hot, prokd_phase1_loss,
                                 temperature_sequence, vanilla_kd_loss)
from distill_lab.errors import AllocationError, DomainError, ShapeError
from distill_lab.numerics import cross_entropy, finite_difference_check, softmax

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def test_temperature_sequence_counts_down_to_one():
    assert temperature_sequence(4) == [4, 3, 2, 1]
    assert temperature_sequence(1) == [1]
    with pytest.raises(DomainError):
        temperature_sequence(0)
    with pytest.raises(DomainError):
        temperature_sequence(2.5)


@pytest.mark.parametrize("tau_max, total_n, factor, expected", [
    (10, 20, 1, [2] * 10),
    (5, 31, 2, [1, 2, 4, 8, 16]),
    (3, 10, 2, [1, 2, 7]),
    (1, 7, 3, [7]),
    (7, 14, 1, [2] * 7),
])
def test_allocate_epochs_examples(tau_max, total_n, factor, expected):
    assert allocate_epochs(tau_max, total_n, factor) == expected


@pytest.mark.parametrize("tau_max, total_n, factor", [
    (3, 10, 1),   # uneven split
    (5, 4, 1),    # fewer epochs than steps
    (5, 20, 2),   # geometric sum 31 exceeds budget
    (0, 10, 1),
    (3, 9, 0),
])
def test_allocate_epochs_rejects_infeasible(tau_max, total_n, factor):
    with pytest.raises(AllocationError):
        allocate_epochs(tau_max, total_n, factor)


@st.composite
def feasible_allocations(draw):
    tau_max = draw(st.integers(min_value=1, max_value=10))
    factor = draw(st.integers(min_value=1, max_value=3))
    if factor == 1:
        total_n = tau_max * draw(st.integers(min_value=1, max_value=20))
    else:
        unit_sum = (factor ** tau_max - 1) // (factor - 1)
        total_n = unit_sum * draw(st.integers(min_value=1, max_value=3)) + \
            draw(st.integers(min_value=0, max_value=unit_sum - 1 if unit_sum > 1 else 0))
    return tau_max, total_n, factor


@given(feasible_allocations())
@settings(max_examples=1000)
def test_allocate_epochs_invariants(case):
    tau_max, total_n, factor = case
    counts = allocate_epochs(tau_max, total_n, factor)
    assert len(counts) == tau_max
    assert sum(counts) == total_n
    assert all(n >= 1 for n in counts)
    if factor == 1:
        assert len(set(counts)) == 1
    else:
        for k in range(tau_max - 2):
            assert counts[k + 1] == factor * counts[k]
        if tau_max > 1:
            assert counts[-1] >= factor * counts[-2]


def test_schedule_steps_and_checkpoints():
    schedule = TemperatureSchedule.allocate(3, 10, 2)
    assert list(schedule.steps()) == [(1, 3, 1), (2, 2, 2), (3, 1, 7)]
    assert schedule.total_epochs == 10
    assert schedule.checkpoint_epochs() == [1, 2, 3]
    assert schedule.checkpoint_epochs(warmup_epochs=140) == [141, 142, 143]


def test_schedule_validation():
    with pytest.raises(AllocationError):
        TemperatureSchedule(3, (1, 2))
    with pytest.raises(AllocationError):
        TemperatureSchedule(2, (1, 0))


def test_vanilla_kd_alpha_one_is_cross_entropy():
    rng = np.random.default_rng(0)
    z_s, z_t = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    labels = one_hot(rng.integers(0, 3, size=6), 3)
    loss, grad = vanilla_kd_loss(labels, z_s, z_t, VanillaKdConfig(alpha=1.0, temperature=4.0))
    ce, ce_grad = cross_entropy(labels, softmax(z_s))
    assert loss == ce
    np.testing.assert_array_equal(grad, ce_grad)


def test_vanilla_kd_pure_distillation_vanishes_on_teacher_logits():
    z = np.random.default_rng(1).normal(size=(4, 3))
    loss, grad = vanilla_kd_loss(one_hot([0, 1, 2, 0], 3), z, z, VanillaKdConfig(0.0, 3.0))
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_vanilla_kd_shape_mismatch():
    with pytest.raises(ShapeError):
        vanilla_kd_loss(np.eye(2), np.zeros((2, 2)), np.zeros((2, 3)), VanillaKdConfig())


@pytest.mark.parametrize("kwargs", [{"alpha": 1.5}, {"alpha": -0.1}, {"temperature": 0.0}])
def test_vanilla_kd_config_validation(kwargs):
    with pytest.raises(DomainError):
        VanillaKdConfig(**kwargs)


def test_prokd_phase1_targets_scaled_logits():
    z_t = np.array([[4.0, -2.0]])
    loss, grad = prokd_phase1_loss(np.array([[2.0, -1.0]]), z_t, 2)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)
    with pytest.raises(DomainError):
        prokd_phase1_loss(z_t, z_t, 0.5)


def test_annealing_target_ramps_to_raw_logits():
    z = np.array([[3.0, -6.0]])
    np.testing.assert_allclose(annealing_target(z, 1, 3), z / 3)
    np.testing.assert_array_equal(annealing_target(z, 3, 3), z)
    with pytest.raises(DomainError):
        annealing_target(z, 4, 3)
    with pytest.raises(DomainError):
        annealing_target(z, 0, 3)


def test_one_hot():
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])


@given(seeds, st.floats(min_value=0.1, max_value=10.0), st.integers(min_value=1, max_value=10))
def test_prokd_phase1_loss_scales_quadratically(seed, c, temperature):
    rng = np.random.default_rng(seed)
    z_s = rng.normal(size=(4, 3))
    z_t = rng.normal(scale=5.0, size=(4, 3))
    loss, grad = prokd_phase1_loss(z_s, z_t, temperature)
    scaled_loss, scaled_grad = prokd_phase1_loss(c * z_s, c * z_t, temperature)
    assert scaled_loss == pytest.approx(c * c * loss, rel=1e-10, abs=1e-300)
    np.testing.assert_allclose(scaled_grad, c * grad, rtol=1e-10, atol=1e-300)


@given(seeds, st.integers(min_value=1, max_value=20))
def test_annealing_target_norm_never_shrinks(seed, tau_max):
    z_t = np.random.default_rng(seed).normal(size=(3, 4))
    norms = [np.linalg.norm(annealing_target(z_t, i, tau_max)) for i in range(1, tau_max + 1)]
    for smaller, larger in zip(norms, norms[1:]):
        assert smaller <= larger * (1.0 + 1e-12)


def _log_softmax(values, temperature):
    scaled = [v / temperature for v in values]
    top = max(scaled)
    total = sum(math.exp(s - top) for s in scaled)
    return [s - top - math.log(total) for s in scaled]


def test_vanilla_kd_two_class_hand_instance():
    labels = np.array([[1.0, 0.0]])
    z_s = np.array([[1.0, 0.0]])
    z_t = np.array([[2.0, -1.0]])
    cfg = VanillaKdConfig(alpha=0.5, temperature=2.0)

    ce = -_log_softmax([1.0, 0.0], 1.0)[0]
    log_t = _log_softmax([2.0, -1.0], 2.0)
    log_s = _log_softmax([1.0, 0.0], 2.0)
    kl = sum(math.exp(lt) * (lt - ls) for lt, ls in zip(log_t, log_s))
    expected = 0.5 * ce + 0.5 * 4.0 * kl

    loss, grad = vanilla_kd_loss(labels, z_s, z_t, cfg)
    assert loss == pytest.approx(expected, rel=1e-12)
    error = finite_difference_check(
        lambda z: vanilla_kd_loss(labels, z, z_t, cfg)[0], z_s, grad)
    assert error <= 1e-6
