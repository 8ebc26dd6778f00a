import numpy as np
import pytest

from lagmorph.baseline import l2tv_baseline, l2tv_objective
from lagmorph.errors import InvalidInputError
from lagmorph.functionals import Objective, ObjectiveConfig
from lagmorph.grid import CellGrid, ScalarField
from lagmorph.ipalm import (GaussNewtonConfig, IpalmConfig, gauss_newton_direction,
                            gauss_newton_refine_v, inertia, ipalm_solve, step_factor)
from lagmorph.phantoms import experiment_pair, make_phantom
from lagmorph.radon import IdentityOperator, RadonOperator, Sinogram, equispaced_angles, level_geometry


def small_problem(m=16, square=True, **cfg):
    T, U = experiment_pair(m, "swirl", square=square, amplitude=0.3)
    geom = level_geometry(equispaced_angles(10), int(np.log2(m)))
    K = RadonOperator(geom, T.grid)
    g = Sinogram(geom, K.forward(U.values))
    return Objective(T, g, K, ObjectiveConfig(**cfg)), U


def test_schedules():
    g = IpalmConfig(mode="guaranteed", alpha=0.4)
    assert inertia(g, 7) == 0.4
    assert step_factor(g, 0.4) == pytest.approx(1.8 / 1.2)
    assert step_factor(IpalmConfig(alpha=0.0), 0.0) == 0.5
    h = IpalmConfig(mode="heuristic")
    assert inertia(h, 1) == 0.0 and inertia(h, 4) == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        IpalmConfig(mode="guaranteed", alpha=0.6)


def test_monotone_with_zero_inertia():
    obj, _ = small_problem()
    res = ipalm_solve(obj, IpalmConfig(alpha=0.0, max_iter=40))
    J = np.array(obj_history(res))
    assert np.all(np.diff(J) <= 1e-12)
    assert all(d["pcg_residual"] < 1e-8 for d in res.diagnostics)


def obj_history(res):
    return res.state.history


def test_huge_velocity_weight_freezes_v():
    obj_free, _ = small_problem(lam2=1.0)
    free = ipalm_solve(obj_free, IpalmConfig(mode="heuristic", max_iter=30))
    obj, _ = small_problem(lam1=1e8, lam2=1.0)
    res = ipalm_solve(obj, IpalmConfig(mode="heuristic", max_iter=30))
    assert np.linalg.norm(res.v) <= 1e-3 * np.linalg.norm(free.v)


def test_frozen_velocity_reduces_to_l2tv():
    # with a zero template and v pinned at 0 the z-iteration solves L2-TV
    m = 16
    grid = CellGrid(2, m)
    U = make_phantom("shepp-logan", m)
    geom = level_geometry(equispaced_angles(10), 4)
    K = RadonOperator(geom, grid)
    g = Sinogram(geom, K.forward(U.values))
    lam = 0.01
    T0 = ScalarField(grid, np.zeros(grid.size))
    obj = Objective(T0, g, K, ObjectiveConfig(lam1=1e12, lam2=lam, pdhg_tol=1e-10,
                                              pdhg_max_iter=5000))
    res = ipalm_solve(obj, IpalmConfig(mode="heuristic", max_iter=2000, tol=1e-10))
    ref = l2tv_baseline(g, K, lam, tol=1e-12, max_iter=200000, full_output=True)
    J_ipalm = l2tv_objective(res.z, g, K, lam)
    assert abs(J_ipalm - ref.objective) / ref.objective < 1e-4


def test_l2_source_variant_runs():
    obj, _ = small_problem(source="l2", lam2=1e-4)
    res = ipalm_solve(obj, IpalmConfig(mode="heuristic", max_iter=15))
    assert np.isfinite(res.J) and res.J < obj.total(np.zeros(obj.grid.n_velocity), np.zeros(256))[0]


def test_ncc_variant_decreases():
    obj, _ = small_problem(data="ncc", lam2=1e-3)
    res = ipalm_solve(obj, IpalmConfig(alpha=0.0, max_iter=15))
    assert np.all(np.diff(res.state.history) <= 1e-12)


def test_log_file(tmp_path):
    obj, _ = small_problem()
    path = tmp_path / "it.log"
    ipalm_solve(obj, IpalmConfig(mode="heuristic", max_iter=5, log_path=str(path)))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#iter\tJ")
    assert len(lines) == 6 and len(lines[1].split("\t")) == 10


def test_gauss_newton_matches_newton_for_linear_residual():
    # affine template, linear interpolation, one Euler step: R is linear in v
    m = 8
    grid = CellGrid(2, m)
    x = grid.centers()
    T = ScalarField(grid, 0.2 + 0.5 * x[:, 0] + 0.3 * x[:, 1])
    geom = level_geometry(equispaced_angles(4), 3, scale=1.0)
    K = RadonOperator(geom, grid)
    rng = np.random.default_rng(0)
    g = Sinogram(geom, K.forward(T.values) + 0.01 * rng.normal(size=geom.size))
    cfg = ObjectiveConfig(lam1=(1e-2, 1e-2, 1e-3), order="linear", scheme="euler", n_steps=1)
    obj = Objective(T, g, K, cfg)
    # pull every point inward so that no clamp is active near v
    inward = np.tile(0.03 * (x - 0.5).T.ravel(), grid.m_t + 1)
    v = inward + 1e-4 * rng.normal(size=grid.n_velocity)
    z = np.zeros(grid.size)
    ev = obj.evaluate(v, z)
    d_gn, grad = gauss_newton_direction(obj, ev, cg_tol=1e-14, cg_max_iter=5000)

    def data_grad(vv):
        return obj.grad_v(obj.evaluate(vv, z))

    # finite differences for the data term; the quadratic regulariser's
    # Hessian is known exactly and too stiff to difference accurately
    n = grid.n_velocity
    eps = 1e-4
    H = obj.B.weight * obj.B.normal(cfg.lam1).toarray()
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        H[:, i] += (data_grad(v + e) - data_grad(v - e)) / (2 * eps)
    d_newton = np.linalg.solve(0.5 * (H + H.T), -grad)
    assert np.linalg.norm(d_gn - d_newton) / np.linalg.norm(d_newton) < 1e-8


def test_gauss_newton_never_increases():
    obj, _ = small_problem()
    res = ipalm_solve(obj, IpalmConfig(mode="heuristic", max_iter=10))
    J0, _ = obj.total(res.v, res.z)
    v, info = gauss_newton_refine_v(obj, res.v, res.z)
    J1, _ = obj.total(v, res.z)
    assert J1 <= J0 + 1e-12 * abs(J0)
    assert info["f"] <= info["f0"]


def test_gauss_newton_at_optimum_of_toy():
    g = CellGrid(2, 8)
    T = ScalarField(g, np.zeros(g.size))
    obj = Objective(T, np.zeros(g.size), IdentityOperator(g), ObjectiveConfig())
    v0 = np.zeros(g.n_velocity)
    v, info = gauss_newton_refine_v(obj, v0, np.zeros(g.size))
    assert np.array_equal(v, v0) and info["f"] == info["f0"]


def test_gauss_newton_rejects_ncc():
    obj, _ = small_problem(data="ncc")
    with pytest.raises(InvalidInputError):
        gauss_newton_direction(obj, obj.evaluate(np.zeros(obj.grid.n_velocity), np.zeros(256)))
