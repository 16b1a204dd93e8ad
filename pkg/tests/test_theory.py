import math

import numpy as np
import pytest

from dualflow.cascade import CascadeCheckConfig, verify_cascade
from dualflow.morse import (BoxExitError, MorseProblem, build_morse_field, cutoff_eta, get_problem, integrate_flow,
                            mu_defining, quadratic_bowl, smooth_step, two_bumps, verify_morse_flow)
from dualflow.nn import VelocityConfig, VelocityModel

BOX = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))


def test_mu_on_boundary_is_zero():
    for p in ([1.0, 0.3], [-1.0, 0.0], [0.2, -1.0], [1.0, 1.0]):
        assert mu_defining(np.array(p), *BOX) == 0.0


def test_mu_equals_distance_near_face():
    assert mu_defining(np.array([0.95, 0.0]), *BOX) == pytest.approx(0.05, abs=1e-12)


def test_mu_plateau_at_centre():
    assert mu_defining(np.zeros(2), *BOX) == pytest.approx(1.0)
    h = 1e-5
    for e in np.eye(2):
        g = (mu_defining(e * h, *BOX) - mu_defining(-e * h, *BOX)) / (2 * h)
        assert abs(g) < 1e-8


def test_mu_rejects_outside():
    with pytest.raises(ValueError):
        mu_defining(np.array([1.1, 0.0]), *BOX)


def test_smooth_step_scalar_oracle():
    def oracle(u):
        a = math.exp(-1 / u) if u > 0 else 0.0
        b = math.exp(-1 / (1 - u)) if u < 1 else 0.0
        return a / (a + b)

    for u in (0.0, 0.1, 0.25, 0.5, 0.8, 1.0):
        assert smooth_step(u) == pytest.approx(oracle(u), abs=1e-15)


def test_eta_values():
    p = quadratic_bowl()
    assert cutoff_eta(np.zeros(2), p) == 0.0
    assert cutoff_eta(np.array([0.6, 0.6]), p) == 1.0
    r0, r1 = p.inner_radius[0], p.outer_radius[0]
    quarter = r0 + 0.25 * (r1 - r0)
    want = math.exp(-4) / (math.exp(-4) + math.exp(-4 / 3))
    assert cutoff_eta(np.array([quarter, 0.0]), p) == pytest.approx(want, rel=1e-12)
    assert cutoff_eta(np.array([0.0, (r0 + r1) / 2]), p) == pytest.approx(0.5, rel=1e-12)


def test_eta_rejects_overlapping_supports():
    with pytest.raises(ValueError):
        MorseProblem("x", [-1, -1], [1, 1], j=None, grad_j=None,
                     critical_points=[[0.0, 0.0], [0.3, 0.0]], inner_radius=0.05, outer_radius=0.2)


@pytest.mark.parametrize("make", [quadratic_bowl, two_bumps])
def test_field_vanishes_at_critical_points_and_boundary(make):
    p = make()
    field = build_morse_field(p)
    assert np.abs(field(p.critical_points)).max() <= 1e-12
    edge = np.array([[p.lo[0], 0.0], [p.hi[0], 0.1], [0.2, p.lo[1]], [-0.3, p.hi[1]]])
    assert np.abs(field(edge)).max() <= 1e-12


def test_bowl_field_composition():
    p = quadratic_bowl()
    x = np.array([0.4, -0.55])
    want = cutoff_eta(x, p) * mu_defining(x, p.lo, p.hi) ** p.m * (-2 * x)
    np.testing.assert_allclose(build_morse_field(p)(x), want, rtol=1e-14)


def test_field_scale_bounded():
    p = two_bumps()
    rng = np.random.default_rng(0)
    x = p.lo + (p.hi - p.lo) * rng.random((2000, 2))
    eta, mu = cutoff_eta(x, p), mu_defining(x, p.lo, p.hi)
    assert eta.min() >= 0 and eta.max() <= 1 and mu.min() >= 0
    assert np.all(eta * mu**p.m <= mu**p.m)


def test_decay_exponent_floor():
    with pytest.raises(ValueError):
        MorseProblem("x", [-1, -1], [1, 1], j=None, grad_j=None, critical_points=[[0.0, 0.0]],
                     inner_radius=0.1, outer_radius=0.2, m=2)


def test_two_bumps_critical_structure():
    p = two_bumps()
    assert sorted(p.kinds) == ["max", "max", "saddle"]
    np.testing.assert_allclose(p.grad_j(p.critical_points), 0.0, atol=1e-10)


def test_stationary_start_and_zero_time():
    p = two_bumps()
    ends = integrate_flow(p, p.critical_points, 0.5)
    np.testing.assert_array_equal(ends, p.critical_points)
    starts = np.random.default_rng(1).uniform(-1, 1, size=(10, 2))
    np.testing.assert_array_equal(integrate_flow(p, starts, 0.0), starts)
    rep = verify_morse_flow(p, resolution=5, flow_time=0.0)
    assert rep.min_abs_det == pytest.approx(1.0, abs=1e-9)


def test_box_exit_is_an_error():
    p = quadratic_bowl()
    p.grad_j = lambda x: np.full_like(x, 1e6)
    with pytest.raises(BoxExitError):
        integrate_flow(p, np.array([[0.5, 0.5]]), 1.0, h=0.1)


@pytest.mark.parametrize("name", ["bowl", "two-bumps", "tilted"])
def test_verify_morse_flow(name):
    rep = verify_morse_flow(get_problem(name), resolution=21, flow_time=0.5)
    assert rep.passed()
    assert rep.monotone_fraction == 1.0 and rep.min_mu > 0
    assert rep.strict_fraction > 0.5


def test_unknown_problem():
    with pytest.raises(ValueError):
        get_problem("nope")


def test_cascade_config_validation():
    for bad in (dict(t=0.3), dict(delta=0.3), dict(lr=-1.0), dict(n_samples=0), dict(t=0.2, delta=0.03)):
        with pytest.raises(ValueError):
            CascadeCheckConfig(**bad)


def test_cascade_requires_smooth_classifier(source, splits):
    vm = VelocityModel(VelocityConfig((16, 16), 8, width=16))
    with pytest.raises(ValueError):
        verify_cascade(vm, source, splits[1], CascadeCheckConfig(n_samples=2))


def test_cascade_lr_zero_is_exact(smooth_source, splits):
    vm = VelocityModel(VelocityConfig((16, 16), 8, width=16))
    vm.reset_adapters("random", seed=0, scale=1.0)
    rep = verify_cascade(vm, smooth_source, splits[1], CascadeCheckConfig(n_samples=10, lr=0.0))
    assert rep.improvement_fraction == 1.0
    assert np.all(rep.delta_ce == 0.0)
