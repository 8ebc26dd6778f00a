"""Proximal maps of the velocity and source regularisers.

All maps use the step ``tau`` of ``argmin_x 1/(2 tau) |x - v|^2 + G(x)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .errors import ConvergenceError, InvalidInputError
from .functionals import RegOperatorB, div_h, grad_h

__all__ = [
    "ProxInfo",
    "prox_quadratic",
    "prox_tv",
    "prox_tv_1d_exact",
    "prox_l2_source",
]


@dataclass
class ProxInfo:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    floor: float = 0.0


def _pcg(matvec, b, precond, x0, tol, max_iter):
    """Preconditioned CG on the true residual ``|b - A x| / |b|``."""
    nb = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x)
    res = np.linalg.norm(r) / nb
    it = 0
    while res > tol and it < max_iter:
        s = precond(r)
        rs = r @ s
        p = s
        while it < max_iter:
            it += 1
            Ap = matvec(p)
            a = rs / (p @ Ap)
            x += a * p
            r -= a * Ap
            if np.linalg.norm(r) <= 0.5 * tol * nb:
                break
            s = precond(r)
            rs_new = r @ s
            p = s + (rs_new / rs) * p
            rs = rs_new
        # recompute to guard against drift of the recursive residual
        r = b - matvec(x)
        res = np.linalg.norm(r) / nb
    return x, res, it


def prox_quadratic(v, tau, B: RegOperatorB, lam1, tol=1e-8, max_iter=500, x0=None,
                   info: ProxInfo = None, precond="spectral"):
    """Solve ``(I + tau h_t h^d B_l^T B_l) x = v`` by preconditioned CG.

    Parameters
    ----------
    precond : {"spectral", "jacobi"}
        ``spectral`` inverts the DCT-diagonal approximation of the operator
        (see :meth:`RegOperatorB.symbol`); ``jacobi`` uses the diagonal.

    Raises
    ------
    ConvergenceError
        If the relative residual is above ``tol`` after ``max_iter`` steps.
    """
    v = np.asarray(v, dtype=float).ravel()
    if tau < 0:
        raise InvalidInputError("prox step must be non-negative")
    info = ProxInfo() if info is None else info
    if tau == 0 or not np.any(v):
        info.iterations, info.residual, info.converged = 0, 0.0, True
        return v.copy()
    c = tau * B.weight
    N = B.normal(lam1)
    matvec = lambda x: x + c * (N @ x)
    if precond == "jacobi":
        dinv = 1.0 / (1.0 + c * N.diagonal())
        M = lambda r: dinv * r
    elif precond == "spectral":
        sym = 1.0 + c * B.symbol(lam1)
        shape = B.grid.velocity_shape
        axes = (0,) + tuple(range(2, 2 + B.grid.dim))
        M = lambda r: idctn(dctn(r.reshape(shape), axes=axes, norm="ortho") / sym,
                            axes=axes, norm="ortho").ravel()
    else:
        raise InvalidInputError(f"unknown preconditioner {precond!r}")
    x, res, it = _pcg(matvec, v, M, x0, tol, max_iter)
    info.iterations, info.residual, info.converged = it, float(res), res <= tol
    if res > tol:
        # Rounding x alone perturbs the residual by about eps |A| |x|; for very
        # stiff weights that exceeds tol and no solver can do better.
        absx = np.abs(x)
        floor = np.finfo(float).eps * np.linalg.norm(absx + c * (abs(N) @ absx)) / np.linalg.norm(v)
        info.floor = float(floor)
        if res > max(tol, 10.0 * floor):
            raise ConvergenceError(f"PCG stopped at relative residual {res:.3e} > {tol:.1e}", residual=res)
        warnings.warn(f"PCG residual {res:.2e} limited by rounding (floor {floor:.1e})", RuntimeWarning)
    return x


# ---------------------------------------------------------------------------
# total variation


@dataclass
class TVProxResult:
    x: np.ndarray
    dual: np.ndarray
    gap: float
    iterations: int
    warning: bool


def _tv_primal(x, z, c, h):
    gx = grad_h(x, h)
    return 0.5 * float(((x - z) ** 2).sum()) + c * float(np.sqrt((gx * gx).sum(axis=0)).sum())


def _project_ball(p, c):
    nrm = np.sqrt((p * p).sum(axis=0))
    return p / np.maximum(1.0, nrm / c)


def prox_tv(z, weight, h=None, tol=1e-6, max_iter=500, dual0=None, check_every=10,
            full_output=False):
    """``argmin_x 0.5|x - z|^2 + weight h^d sum_i |grad_h x|_i`` by PDHG.

    Parameters
    ----------
    z : ndarray
        Image of any dimension (``(m, 1)`` gives a 1-D problem).
    weight : float
        Already includes the prox step, i.e. ``tau * lam2``.
    h : float, optional
        Grid spacing, default ``1 / z.shape[0]``.
    tol : float
        Relative primal-dual gap at which to stop.
    dual0 : ndarray, optional
        Dual warm start, e.g. from the previous outer iteration.

    Returns
    -------
    x, or a :class:`TVProxResult` when ``full_output`` is set. The ``warning``
    flag is raised when ``max_iter`` was hit before the gap closed.
    """
    z = np.asarray(z, dtype=float)
    h = 1.0 / z.shape[0] if h is None else float(h)
    if weight < 0:
        raise InvalidInputError("TV weight must be non-negative")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("prox_tv input contains non-finite values")
    dim = z.ndim
    c = weight * h**dim
    if c == 0 or np.ptp(z) == 0:
        res = TVProxResult(z.copy(), np.zeros((dim,) + z.shape), 0.0, 0, False)
        return res if full_output else res.x
    step = 0.99 * h / (2.0 * np.sqrt(dim))
    tau = sigma = step
    y = np.zeros((dim,) + z.shape) if dual0 is None else _project_ball(np.array(dual0, float), c)
    x = z + div_h(y, h)
    xbar = x
    gap = np.inf
    best = (np.inf, x, y)
    it = 0
    for it in range(1, max_iter + 1):
        y = _project_ball(y + sigma * grad_h(xbar, h), c)
        x_new = (x + tau * div_h(y, h) + tau * z) / (1.0 + tau)
        xbar = 2.0 * x_new - x
        x = x_new
        if it % check_every == 0 or it == max_iter:
            xd = z + div_h(y, h)  # primal point recovered from the dual
            primal = _tv_primal(xd, z, c, h)
            dual = 0.5 * float((z * z).sum()) - 0.5 * float((xd * xd).sum())
            gap = max(primal - dual, 0.0)
            if gap < best[0]:
                best = (gap, xd, y.copy())
            if gap <= tol * max(abs(primal), 1e-300):
                return _tv_done(xd, y, gap, it, False, full_output)
    gap, xd, yb = best
    warnings.warn(f"prox_tv: relative gap {gap:.2e} after {max_iter} iterations", RuntimeWarning)
    return _tv_done(xd, yb, gap, it, True, full_output)


def _tv_done(x, y, gap, it, flag, full):
    res = TVProxResult(x, y, gap, it, flag)
    return res if full else res.x


def prox_tv_1d_exact(z, weight):
    """Exact ``argmin_x 0.5|x - z|^2 + weight sum_i |x_{i+1} - x_i|``.

    Condat's direct (taut-string) algorithm, linear time in practice.
    """
    y = np.asarray(z, dtype=float).ravel()
    n = y.size
    out = np.empty(n)
    lam = float(weight)
    if n == 0:
        return out
    if lam <= 0:
        return y.copy()
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = y[0] - lam, y[0] + lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                out[k0 : kminus + 1] = vmin
                k0 = kminus + 1
                k = kminus = k0
                vmin = y[k0]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                out[k0 : kplus + 1] = vmax
                k0 = kplus + 1
                k = kplus = k0
                vmax = y[k0]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                out[k0 : k + 1] = vmin
                return out
        umin += y[k + 1] - vmin
        if umin < -lam:
            out[k0 : kminus + 1] = vmin
            k0 = kminus + 1
            k = kplus = kminus = k0
            vmin = y[k0]
            vmax = vmin + 2 * lam
            umin, umax = lam, -lam
            continue
        umax += y[k + 1] - vmax
        if umax > lam:
            out[k0 : kplus + 1] = vmax
            k0 = kplus + 1
            k = kplus = kminus = k0
            vmax = y[k0]
            vmin = vmax - 2 * lam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def prox_l2_source(z, tau, lam2=1.0, cell_volume=None, h=None, dim=2):
    """Prox of ``lam2 * 0.5 h^d |x|^2``: ``x = z / (1 + tau lam2 h^d)``."""
    if tau < 0:
        raise InvalidInputError("prox step must be non-negative")
    if cell_volume is None:
        if h is None:
            raise InvalidInputError("need cell_volume or h")
        cell_volume = h**dim
    return np.asarray(z, dtype=float) / (1.0 + tau * lam2 * cell_volume)
