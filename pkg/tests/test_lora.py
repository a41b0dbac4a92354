import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorasi.lora import (
    LoraAdapter,
    ScalingMode,
    delta_theta,
    effective_weight,
    lora_init,
    scale_factor,
    sgd_step,
    virtual_gradient,
)


def _adapter(B, A, alpha=1.0, rank=None, theta0=None):
    B, A = np.array(B, float), np.array(A, float)
    theta0 = np.zeros((B.shape[0], A.shape[1])) if theta0 is None else theta0
    # alpha / r with r = A.shape[0]; callers pick alpha to set the scale
    return LoraAdapter(theta0, B, A, alpha)


def test_init_delta_is_exactly_zero():
    theta0 = np.random.default_rng(0).normal(size=(6, 5))
    a = lora_init(6, 5, 3, 12.0, seed=1, theta0=theta0)
    assert not a.B.any()
    np.testing.assert_array_equal(a.delta(), np.zeros((6, 5)))
    np.testing.assert_array_equal(effective_weight(a), theta0)


def test_init_A_distribution():
    a = lora_init(64, 4000, 16, 32.0, seed=3)
    assert a.A.std() == pytest.approx(1 / math.sqrt(16), rel=0.02)
    assert abs(a.A.mean()) < 5e-3


@pytest.mark.parametrize(
    "r,alpha,mode,expected",
    [(8, 32, "standard", 4.0), (16, 32, "rank_stabilized", 8.0), (4, 8, "standard", 2.0)],
)
def test_scale_factor(r, alpha, mode, expected):
    assert lora_init(32, 32, r, alpha, mode).scale == expected
    assert scale_factor(alpha, r, mode) == expected


def test_init_rejects_oversized_rank():
    with pytest.raises(ValueError):
        lora_init(4, 8, 5, 1.0)
    with pytest.raises(ValueError):
        lora_init(4, 8, 0, 1.0)


def test_effective_weight_hand_expansion():
    a = _adapter([[2.0]], [[3.0]])
    assert a.scale == 1.0
    np.testing.assert_array_equal(effective_weight(a), [[6.0]])


def test_scaling_mode_rescales_delta():
    base = lora_init(6, 6, 4, 8.0, "standard", seed=0)
    B = np.random.default_rng(1).normal(size=base.B.shape)
    std = base.with_factors(B, base.A)
    rs = LoraAdapter(std.theta0, B, std.A, 8.0, ScalingMode.RANK_STABILIZED)
    # (8/2) / (8/4) = 2
    np.testing.assert_allclose(rs.delta(), 2.0 * std.delta(), rtol=1e-15)


def test_sgd_step_zero_gradient_is_noop():
    a = lora_init(4, 4, 2, 2.0, seed=0)
    b = sgd_step(a, np.zeros_like(a.B), np.zeros_like(a.A), 0.1)
    assert b == a


def test_sgd_step_hand_values():
    a = _adapter([[0.0]], [[1.0]])
    b = sgd_step(a, np.array([[2.0]]), np.array([[3.0]]), 0.1)
    np.testing.assert_allclose(b.B, [[-0.2]])
    np.testing.assert_allclose(b.A, [[0.7]])
    assert b.theta0 is a.theta0


def test_sgd_step_shape_mismatch():
    a = lora_init(4, 4, 2, 2.0, seed=0)
    with pytest.raises(ValueError):
        sgd_step(a, np.zeros((4, 3)), np.zeros_like(a.A), 0.1)


def test_two_steps_apply_in_order():
    rng = np.random.default_rng(5)
    a = lora_init(5, 4, 2, 2.0, seed=0).with_factors(rng.normal(size=(5, 2)), rng.normal(size=(2, 4)))
    g1 = rng.normal(size=(5, 2)), rng.normal(size=(2, 4))
    g2 = rng.normal(size=(5, 2)), rng.normal(size=(2, 4))
    two = sgd_step(sgd_step(a, *g1, 0.05), *g2, 0.05)
    np.testing.assert_array_equal(two.B, (a.B - 0.05 * g1[0]) - 0.05 * g2[0])
    np.testing.assert_array_equal(two.A, (a.A - 0.05 * g1[1]) - 0.05 * g2[1])


def test_virtual_gradient_hand_value_and_oracle():
    a = _adapter([[0.0]], [[1.0]])
    gB, gA, eta = np.array([[2.0]]), np.array([[3.0]]), 0.1
    vg = virtual_gradient(a, gB, gA, eta)
    np.testing.assert_allclose(vg, [[1.4]], rtol=1e-15)
    # oracle: the step's actual change divided by -eta
    after = sgd_step(a, gB, gA, eta)
    oracle = (after.B @ after.A - a.B @ a.A) / -eta
    np.testing.assert_allclose(oracle, [[1.4]], rtol=1e-14)


def test_virtual_gradient_stationary():
    a = lora_init(4, 3, 2, 2.0, seed=0)
    assert not virtual_gradient(a, np.zeros_like(a.B), np.zeros_like(a.A), 0.1).any()


def test_virtual_gradient_small_eta_limit():
    rng = np.random.default_rng(2)
    a = lora_init(6, 5, 3, 3.0, seed=0).with_factors(rng.normal(size=(6, 3)), rng.normal(size=(3, 5)))
    gB, gA = rng.normal(size=(6, 3)), rng.normal(size=(3, 5))
    first_order = a.scale * (gB @ a.A + a.B @ gA)
    gaps = [np.linalg.norm(virtual_gradient(a, gB, gA, eta) - first_order) for eta in (1e-1, 1e-2, 1e-3)]
    # the cross term is linear in eta
    assert gaps[0] / gaps[1] == pytest.approx(10, rel=1e-9)
    assert gaps[1] / gaps[2] == pytest.approx(10, rel=1e-9)


def test_virtual_gradient_with_zero_B():
    rng = np.random.default_rng(3)
    a = lora_init(7, 6, 3, 6.0, seed=4)
    gB, gA = rng.normal(size=(7, 3)), rng.normal(size=(3, 6))
    expected = a.scale * (gB @ a.A) - a.scale * 0.01 * (gB @ gA)
    np.testing.assert_allclose(virtual_gradient(a, gB, gA, 0.01), expected, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("s,expected", [(0.1, -0.014), (1.0, -0.14)])
def test_delta_theta_hand_values(s, expected):
    a = LoraAdapter(np.zeros((1, 1)), np.array([[0.0]]), np.array([[1.0]]), s)
    b = sgd_step(a, np.array([[2.0]]), np.array([[3.0]]), 0.1)
    np.testing.assert_allclose(delta_theta(a, b), [[expected]], rtol=1e-12)


def test_delta_theta_identity_and_mismatch():
    a = lora_init(4, 4, 2, 2.0, seed=0, theta0=np.ones((4, 4)))
    assert not delta_theta(a, a).any()
    other = lora_init(4, 4, 2, 2.0, seed=0, theta0=np.zeros((4, 4)))
    with pytest.raises(ValueError):
        delta_theta(a, other)


def _random_instance(rng):
    d_out, d_in = rng.integers(1, 65, size=2)
    r = int(rng.integers(1, min(16, d_out, d_in) + 1))
    alpha = float(rng.uniform(0.5, 64))
    mode = rng.choice(["standard", "rank_stabilized"])
    a = lora_init(int(d_out), int(d_in), r, alpha, mode, seed=rng, theta0=rng.normal(size=(d_out, d_in)))
    a = a.with_factors(rng.normal(size=a.B.shape), a.A)
    gB, gA = rng.normal(size=a.B.shape), rng.normal(size=a.A.shape)
    eta = float(10 ** rng.uniform(-3, 0))
    return a, gB, gA, eta


def test_step_identity_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        a, gB, gA, eta = _random_instance(rng)
        after = sgd_step(a, gB, gA, eta)
        d = delta_theta(a, after)
        err = np.linalg.norm(d + eta * virtual_gradient(a, gB, gA, eta)) / np.linalg.norm(d)
        assert err <= 1e-12
        np.testing.assert_allclose(d, effective_weight(after) - effective_weight(a), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_theta0_never_changes(seed, n_steps):
    rng = np.random.default_rng(seed)
    a, *_ = _random_instance(rng)
    base = a.theta0.copy()
    for _ in range(n_steps):
        a = sgd_step(a, rng.normal(size=a.B.shape), rng.normal(size=a.A.shape), 0.01)
    np.testing.assert_array_equal(a.theta0, base)
    np.testing.assert_allclose(effective_weight(a) - a.delta(), base, atol=1e-12)


def test_theta0_is_read_only():
    a = lora_init(3, 3, 1, 1.0, seed=0, theta0=np.ones((3, 3)))
    with pytest.raises(ValueError):
        a.theta0[0, 0] = 2.0
