"""Direct L2-TV reconstruction, the comparison method.

Solves ``min_R 0.5 h_Y |K R - g|^2 + lam * TV(R)`` with a primal-dual
iteration that carries one dual variable for the projector and one for the
discrete gradient.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .functionals import div_h, grad_h, tv_value
from .grid import CellGrid, ScalarField

__all__ = ["BaselineResult", "l2tv_objective", "l2tv_baseline"]


@dataclass
class BaselineResult:
    R: ScalarField
    objective: float
    iterations: int
    converged: bool


def l2tv_objective(R, g, K, lam):
    R = np.asarray(getattr(R, "values", R), dtype=float).ravel()
    g = np.asarray(getattr(g, "data", g), dtype=float).ravel()
    r = K.forward(R) - g
    img = R.reshape(K.grid.shape)
    return 0.5 * K.h_y * float(r @ r) + lam * tv_value(img, K.grid.h)


def l2tv_baseline(g, K, lam, tol=1e-6, max_iter=5000, x0=None, check_every=20,
                  full_output=False):
    """PDHG for the L2-TV model.

    Stops when the relative change of the primal iterate over
    ``check_every`` iterations drops below ``tol``; the data term has no
    bounded-domain conjugate, so a duality gap is not used.
    """
    if lam < 0:
        raise InvalidInputError("lam must be non-negative")
    grid: CellGrid = K.grid
    g = np.asarray(getattr(g, "data", g), dtype=float).ravel()
    h, dim, hy = grid.h, grid.dim, K.h_y
    shape = grid.shape
    LK = np.sqrt(K.norm_KtK())
    LD = np.sqrt(4.0 * dim) / h
    # the primal step follows the data curvature h_Y |K|^2; the dual steps are
    # then chosen so that tau * (s1 LK^2 + s2 LD^2) <= 0.98
    tau = 1.0 / (hy * LK * LK)
    s1 = 0.49 / (tau * LK * LK)
    s2 = 0.49 / (tau * LD * LD)
    c = lam * h**dim
    x = np.zeros(grid.size) if x0 is None else np.array(getattr(x0, "values", x0), float).ravel()
    p = np.zeros(g.size)
    q = np.zeros((dim,) + shape)
    xbar = x.copy()
    x_check = x.copy()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = (p + s1 * (K.forward(xbar) - g)) / (1.0 + s1 / hy)
        if c > 0:
            q = q + s2 * grad_h(xbar.reshape(shape), h)
            q /= np.maximum(1.0, np.sqrt((q * q).sum(axis=0)) / c)
        x_new = x - tau * (K.adjoint(p) - div_h(q, h).ravel())
        xbar = 2 * x_new - x
        x = x_new
        if it % check_every == 0:
            change = np.linalg.norm(x - x_check) / max(np.linalg.norm(x), 1e-300)
            x_check = x.copy()
            if change < tol:
                converged = True
                break
    if not converged:
        warnings.warn(f"l2tv_baseline: no convergence in {max_iter} iterations", RuntimeWarning)
    R = ScalarField(grid, x)
    res = BaselineResult(R, l2tv_objective(x, g, K, lam), it, converged)
    return res if full_output else R
