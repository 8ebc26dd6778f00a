"""Characteristics of the flow equation and the solution map ``(v, z) -> R``.

The trajectories start at the cell centres at ``t = 1`` and are integrated
backward to ``t = 0``, which yields ``phi(0, x_c)``, the pre-image of every cell
centre under the flow. The deformed template is ``T(phi(0, x_c))``.

Derivatives with respect to the velocity coefficients are propagated through
every stage of the time stepper. Each stage stores its spatial Jacobian and
its interpolation stencil, which is enough to apply ``d phi / d v`` and its
transpose without materialising the matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalBlowupError
from .grid import (CellGrid, ScalarField, SplineInterpolant, VelocityField,
                   eval_velocity)

__all__ = [
    "SolverConfig",
    "FlowResult",
    "solve_backward_flow",
    "solution_map",
    "apply_dR_dv",
    "apply_dR_dv_T",
    "jacobian_determinant",
]


@dataclass(frozen=True)
class SolverConfig:
    n_steps: int = 5
    scheme: str = "rk4"

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidInputError("n_steps must be >= 1")
        if self.scheme not in ("rk4", "euler"):
            raise InvalidInputError(f"unknown scheme {self.scheme!r}")


class _Stage:
    __slots__ = ("jac", "stencil")

    def __init__(self, jac, stencil):
        self.jac = jac
        self.stencil = stencil


class FlowResult:
    """End points ``phi(0, x)`` plus what is needed to differentiate them.

    ``apply`` maps a velocity perturbation to an ``(n, d)`` perturbation of
    the end points, ``apply_T`` is its transpose.
    """

    def __init__(self, grid, phi0, steps, dt, scheme):
        self.grid = grid
        self.phi0 = phi0
        self._steps = steps
        self.dt = dt
        self.scheme = scheme

    @property
    def n_velocity(self):
        return self.grid.n_velocity

    def _check(self, dv):
        dv = np.asarray(dv, dtype=float).ravel()
        if dv.size != self.n_velocity:
            raise InvalidInputError(
                f"velocity perturbation has {dv.size} entries, expected {self.n_velocity}")
        return dv

    def apply(self, dv):
        dv = self._check(dv)
        dt = self.dt
        dy = np.zeros_like(self.phi0)
        for stages in self._steps:
            if self.scheme == "euler":
                (s1,) = stages
                dy = dy + dt * (np.einsum("nck,nk->nc", s1.jac, dy) + s1.stencil.apply(dv))
                continue
            s1, s2, s3, s4 = stages
            dk1 = np.einsum("nck,nk->nc", s1.jac, dy) + s1.stencil.apply(dv)
            dk2 = np.einsum("nck,nk->nc", s2.jac, dy + 0.5 * dt * dk1) + s2.stencil.apply(dv)
            dk3 = np.einsum("nck,nk->nc", s3.jac, dy + 0.5 * dt * dk2) + s3.stencil.apply(dv)
            dk4 = np.einsum("nck,nk->nc", s4.jac, dy + dt * dk3) + s4.stencil.apply(dv)
            dy = dy + dt / 6.0 * (dk1 + 2 * dk2 + 2 * dk3 + dk4)
        return dy

    def apply_T(self, g):
        g = np.asarray(g, dtype=float).reshape(self.phi0.shape)
        dt = self.dt
        vbar = np.zeros(self.n_velocity)
        ybar = g.copy()
        for stages in reversed(self._steps):
            if self.scheme == "euler":
                (s1,) = stages
                kbar = dt * ybar
                vbar += s1.stencil.apply_T(kbar)
                ybar = ybar + np.einsum("nck,nc->nk", s1.jac, kbar)
                continue
            s1, s2, s3, s4 = stages
            k1 = dt / 6.0 * ybar
            k2 = dt / 3.0 * ybar
            k3 = dt / 3.0 * ybar
            k4 = dt / 6.0 * ybar
            y0 = ybar.copy()
            sb = np.einsum("nck,nc->nk", s4.jac, k4)
            vbar += s4.stencil.apply_T(k4)
            y0 += sb
            k3 = k3 + dt * sb
            sb = np.einsum("nck,nc->nk", s3.jac, k3)
            vbar += s3.stencil.apply_T(k3)
            y0 += sb
            k2 = k2 + 0.5 * dt * sb
            sb = np.einsum("nck,nc->nk", s2.jac, k2)
            vbar += s2.stencil.apply_T(k2)
            y0 += sb
            k1 = k1 + 0.5 * dt * sb
            sb = np.einsum("nck,nc->nk", s1.jac, k1)
            vbar += s1.stencil.apply_T(k1)
            y0 += sb
            ybar = y0
        return vbar


def _velocity_values(v, grid):
    if isinstance(v, VelocityField):
        return v.values, v.grid
    if grid is None:
        raise InvalidInputError("a grid is required for raw velocity arrays")
    v = np.asarray(v, dtype=float).ravel()
    if v.size != grid.n_velocity:
        raise InvalidInputError(f"velocity has {v.size} entries, grid expects {grid.n_velocity}")
    return v, grid


def solve_backward_flow(v, cfg: SolverConfig = SolverConfig(), grid: CellGrid = None,
                        points=None, keep_derivative=True) -> FlowResult:
    """Integrate ``dphi/dt = v(t, phi)`` from ``t = 1`` (``phi = x``) down to ``t = 0``.

    Parameters
    ----------
    v : VelocityField or ndarray
        Velocity; a raw flat array needs ``grid``.
    cfg : SolverConfig
    points : ndarray, optional
        Start points at ``t = 1``; defaults to the cell centres.
    keep_derivative : bool
        Store stage Jacobians and stencils for later derivative products.
    """
    vflat, grid = _velocity_values(v, grid)
    if not np.all(np.isfinite(vflat)):
        raise InvalidInputError("velocity contains non-finite entries")
    y = grid.centers() if points is None else np.array(points, dtype=float)
    n_steps = cfg.n_steps
    dt = -1.0 / n_steps
    steps = []
    for k in range(n_steps):
        t = 1.0 - k / n_steps
        t_half = 1.0 - (k + 0.5) / n_steps
        t_next = 1.0 - (k + 1) / n_steps
        if cfg.scheme == "euler":
            k1, j1, st1 = eval_velocity(vflat, grid, t, y)
            stages = (_Stage(j1, st1),)
            y = y + dt * k1
        else:
            k1, j1, st1 = eval_velocity(vflat, grid, t, y)
            k2, j2, st2 = eval_velocity(vflat, grid, t_half, y + 0.5 * dt * k1)
            k3, j3, st3 = eval_velocity(vflat, grid, t_half, y + 0.5 * dt * k2)
            k4, j4, st4 = eval_velocity(vflat, grid, max(t_next, 0.0), y + dt * k3)
            stages = (_Stage(j1, st1), _Stage(j2, st2), _Stage(j3, st3), _Stage(j4, st4))
            y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericalBlowupError(f"non-finite trajectory after step {k + 1}", step=k + 1)
        if keep_derivative:
            steps.append(stages)
    return FlowResult(grid, y, steps, dt, cfg.scheme)


def _check_same_grid(a: CellGrid, b: CellGrid, what):
    if a.dim != b.dim or a.m != b.m:
        raise InvalidInputError(f"{what}: grid mismatch (m={a.m}, d={a.dim} vs m={b.m}, d={b.dim})")


def solution_map(T: ScalarField, v: VelocityField, z: ScalarField,
                 cfg: SolverConfig = SolverConfig(), order="cubic"):
    """Reconstruction ``R = T(phi(0, x_c)) + z`` and the flow behind it."""
    _check_same_grid(T.grid, v.grid, "template/velocity")
    _check_same_grid(T.grid, z.grid, "template/source")
    flow = solve_backward_flow(v, cfg)
    warped, grad = SplineInterpolant(T.image, order)(flow.phi0)
    flow.template_grad = grad
    return ScalarField(T.grid, warped + z.values, T.range_hint), flow


def _template_grad(flow, T, order):
    # T=None reuses the gradient cached by solution_map
    if T is None:
        return flow.template_grad
    _, grad = SplineInterpolant(T.image, order)(flow.phi0)
    return grad


def apply_dR_dv(flow: FlowResult, T: ScalarField, dv, order="cubic"):
    """Directional derivative of ``R`` along ``dv``; ``dR/dz`` is the identity."""
    grad = _template_grad(flow, T, order)
    dv = dv.values if isinstance(dv, VelocityField) else dv
    return np.einsum("nk,nk->n", grad, flow.apply(dv))


def apply_dR_dv_T(flow: FlowResult, T: ScalarField, w, order="cubic"):
    """Transpose of :func:`apply_dR_dv` applied to an image-sized vector ``w``."""
    grad = _template_grad(flow, T, order)
    w = np.asarray(w, dtype=float).ravel()
    if w.size != flow.phi0.shape[0]:
        raise InvalidInputError(f"cotangent has {w.size} entries, expected {flow.phi0.shape[0]}")
    return flow.apply_T(grad * w[:, None])


def jacobian_determinant(phi0, grid: CellGrid):
    """Central-difference Jacobian determinant of ``x_c -> phi0`` at interior cells."""
    m, dim = grid.m, grid.dim
    phi = phi0.reshape(grid.shape + (dim,))
    jac = np.empty(((m - 2),) * dim + (dim, dim))
    for k in range(dim):
        hi = [slice(1, -1)] * dim
        lo = [slice(1, -1)] * dim
        hi[k] = slice(2, None)
        lo[k] = slice(None, -2)
        jac[..., :, k] = (phi[tuple(hi)] - phi[tuple(lo)]) / (2 * grid.h)
    return np.linalg.det(jac)
