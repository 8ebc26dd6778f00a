import numpy as np
import pytest
from scipy.linalg import expm

from lagmorph.flow import (SolverConfig, apply_dR_dv, apply_dR_dv_T, jacobian_determinant,
                           solution_map, solve_backward_flow)
from lagmorph.grid import CellGrid, ScalarField, VelocityField
from lagmorph.phantoms import make_phantom, velocity_preset

from conftest import rel, smooth_field, smooth_velocity

A_ROT = np.array([[0.0, 0.3], [-0.3, 0.0]])
X0 = np.array([0.5, 0.5])


def rotation_field(m=32):
    g = CellGrid(2, m)
    vel = (g.centers() - X0) @ A_ROT.T
    arr = np.broadcast_to(vel.T.reshape(1, 2, -1), (2, 2, g.size))
    return VelocityField(g, np.ascontiguousarray(arr).ravel())


def rotation_points(n=200, radius=0.3, seed=0):
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.random(n))
    t = rng.uniform(0, 2 * np.pi, n)
    return X0 + np.c_[r * np.cos(t), r * np.sin(t)]


def rotation_error(n_steps, scheme="rk4"):
    pts = rotation_points()
    res = solve_backward_flow(rotation_field(), SolverConfig(n_steps, scheme), points=pts,
                              keep_derivative=False)
    exact = X0 + (pts - X0) @ expm(-A_ROT).T
    return np.abs(res.phi0 - exact).max() / np.abs(exact).max()


def test_zero_field_fixes_points():
    g = CellGrid(2, 8)
    res = solve_backward_flow(VelocityField.zeros(g), SolverConfig(5))
    assert np.array_equal(res.phi0, g.centers())
    # the derivative is not zero: a velocity bump moves the points
    dv = np.zeros(g.n_velocity)
    dv[: 2 * g.size] = 1.0
    assert np.abs(res.apply(dv)).max() > 0.1


def test_constant_field_exact():
    g = CellGrid(2, 8)
    b = np.array([0.05, -0.02])
    arr = np.zeros(g.velocity_shape)
    arr[:, 0], arr[:, 1] = b
    for scheme in ("rk4", "euler"):
        res = solve_backward_flow(VelocityField(g, arr.ravel()), SolverConfig(5, scheme))
        assert np.allclose(res.phi0, g.centers() - b, atol=1e-15)


def test_rotation_oracle_accuracy():
    assert rotation_error(5) < 1e-6


def test_rk4_observed_order():
    errs = [rotation_error(n) for n in (5, 10, 20, 40)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert orders.min() >= 3.9, orders


def test_euler_first_order():
    errs = [rotation_error(n, "euler") for n in (10, 20, 40)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 1) < 0.2)


def test_solution_map_identities():
    T = make_phantom("shepp-logan", 32)
    zero_v = VelocityField.zeros(T.grid)
    R, _ = solution_map(T, zero_v, ScalarField(T.grid, np.zeros(T.grid.size)))
    assert np.allclose(R.values, T.values, atol=1e-12)
    z = np.random.default_rng(0).normal(size=T.grid.size)
    R, _ = solution_map(T, zero_v, ScalarField(T.grid, z))
    assert np.allclose(R.values, T.values + z, atol=1e-12)


def test_translated_bump():
    g = CellGrid(2, 64)
    x = g.centers()
    bump = lambda y: np.exp(-((y - 0.5) ** 2).sum(axis=1) / (2 * 0.1**2))
    T = ScalarField(g, bump(x))
    b = np.array([0.05, 0.03])
    v = velocity_preset("translate", g, b=tuple(b))
    R, _ = solution_map(T, v, ScalarField(g, np.zeros(g.size)))
    expected = bump(x - b)
    inner = np.all((x > 0.15) & (x < 0.85), axis=1)
    assert np.abs(R.values - expected)[inner].max() < 1e-3


def _smooth_case(seed=0, m=16, amp=0.01):
    rng = np.random.default_rng(seed)
    g = CellGrid(2, m)
    T = ScalarField(g, smooth_field(rng, g.shape).ravel())
    v = VelocityField(g, smooth_velocity(rng, g, amp))
    return rng, g, T, v


def test_dR_dv_adjoint():
    rng, g, T, v = _smooth_case()
    R, flow = solution_map(T, v, ScalarField(g, np.zeros(g.size)))
    for _ in range(5):
        dv = rng.normal(size=g.n_velocity)
        w = rng.normal(size=g.size)
        lhs = apply_dR_dv(flow, T, dv) @ w
        rhs = dv @ apply_dR_dv_T(flow, T, w)
        assert abs(lhs - rhs) / abs(lhs) < 1e-12


def test_dR_dv_finite_differences():
    rng, g, T, v = _smooth_case(seed=1, amp=0.005)
    zero = ScalarField(g, np.zeros(g.size))
    _, flow = solution_map(T, v, zero)
    dv = smooth_velocity(rng, g, 1.0)
    eps = 1e-5
    Rp, _ = solution_map(T, VelocityField(g, v.values + eps * dv), zero)
    Rm, _ = solution_map(T, VelocityField(g, v.values - eps * dv), zero)
    assert rel(apply_dR_dv(flow, T, dv), (Rp.values - Rm.values) / (2 * eps)) < 1e-5


def test_constant_template_has_zero_derivative():
    g = CellGrid(2, 8)
    T = ScalarField(g, np.full(g.size, 0.4))
    _, flow = solution_map(T, VelocityField(g, np.full(g.n_velocity, 0.01)),
                           ScalarField(g, np.zeros(g.size)))
    assert np.abs(apply_dR_dv(flow, T, np.ones(g.n_velocity))).max() < 1e-12


@pytest.mark.parametrize("preset", ["swirl", "bend", "translate-bump"])
def test_presets_are_diffeomorphic(preset):
    g = CellGrid(2, 64)
    res = solve_backward_flow(velocity_preset(preset, g), SolverConfig(20), keep_derivative=False)
    assert jacobian_determinant(res.phi0, g).min() > 0
