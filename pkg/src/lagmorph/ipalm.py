"""Inertial proximal alternating linearised minimisation on the blocks (v, z).

One outer iteration::

    v_bar = v_k + a_k (v_k - v_{k-1})
    v_{k+1} = prox_{G1 / s1}(v_bar - grad_v H(v_bar, z_k) / s1)
    z_bar = z_k + a_k (z_k - z_{k-1})
    z_{k+1} = prox_{G2 / s2}(z_bar - grad_z H(v_{k+1}, z_bar) / s2)

``s_i = (1 + 2 a) / (2 (1 - a)) L_i`` in guaranteed mode and ``s_i = L_i``
in heuristic mode. ``L1`` is found by backtracking on the descent lemma.
"""
from __future__ import annotations

import logging
import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import InvalidInputError, NumericalBlowupError
from .functionals import Objective
from .prox import ProxInfo, prox_l2_source, prox_quadratic, prox_tv

__all__ = [
    "IpalmConfig",
    "IpalmState",
    "IpalmResult",
    "inertia",
    "step_factor",
    "ipalm_solve",
    "GaussNewtonConfig",
    "gauss_newton_direction",
    "gauss_newton_refine_v",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "J", "data", "e1", "e2", "L1", "alpha", "bt_count", "pcg_residual",
               "residual")


@dataclass(frozen=True)
class IpalmConfig:
    mode: str = "guaranteed"
    alpha: float = 0.4
    max_iter: int = 200
    tol: float = 1e-6
    patience: int = 5
    eta: float = 2.0
    L1_init: float = 1.0
    L1_max: float = 1e12
    safeguard: bool = True
    gauss_newton: bool = False
    log_path: str = None

    def __post_init__(self):
        if self.mode not in ("guaranteed", "heuristic"):
            raise InvalidInputError(f"unknown iPALM mode {self.mode!r}")
        if self.mode == "guaranteed" and not 0.0 <= self.alpha < 0.5:
            raise InvalidInputError("guaranteed mode needs 0 <= alpha < 0.5")
        if self.eta <= 1 or self.L1_init <= 0 or self.max_iter < 1:
            raise InvalidInputError("need eta > 1, L1_init > 0, max_iter >= 1")


def inertia(cfg: IpalmConfig, k: int) -> float:
    """Inertial weight of outer iteration ``k >= 1``."""
    if cfg.mode == "guaranteed":
        return cfg.alpha
    return (k - 1) / (k + 2)


def step_factor(cfg: IpalmConfig, alpha: float) -> float:
    """``s / L`` for the configured mode."""
    if cfg.mode == "guaranteed":
        return (1 + 2 * alpha) / (2 * (1 - alpha))
    return 1.0


@dataclass
class IpalmState:
    v: np.ndarray
    z: np.ndarray
    v_prev: np.ndarray
    z_prev: np.ndarray
    L1: float
    L2: float
    alpha: float = 0.0
    k: int = 0
    history: list = field(default_factory=list)


@dataclass
class IpalmResult:
    v: np.ndarray
    z: np.ndarray
    R: np.ndarray
    J: float
    parts: dict
    diagnostics: list
    converged: bool
    state: IpalmState = None


def _dump(state, tag):
    fd, path = tempfile.mkstemp(prefix=f"ipalm-{tag}-", suffix=".npz")
    os.close(fd)
    np.savez(path, v=state.v, z=state.z, v_prev=state.v_prev, z_prev=state.z_prev)
    return path


def _check_finite(val, state, what):
    if not np.isfinite(val):
        path = _dump(state, "blowup")
        raise NumericalBlowupError(f"non-finite {what} at iteration {state.k}; iterates in {path}",
                                   step=state.k, dump_path=path)


def ipalm_solve(obj: Objective, cfg: IpalmConfig = IpalmConfig(), v0=None, z0=None,
                L2=None, log_file=None):
    """Run iPALM on ``obj`` from ``(v0, z0)`` (zeros by default).

    Parameters
    ----------
    obj : Objective
    cfg : IpalmConfig
    L2 : float, optional
        Lipschitz constant of the z-block; defaults to ``h_Y |K^T K|`` for
        SSD. NCC always backtracks it.
    log_file : file-like, optional
        Receives one tab-separated line per iteration; ``cfg.log_path`` is
        opened instead when given.

    Returns
    -------
    IpalmResult
        ``diagnostics`` holds one dict per iteration.
    """
    ocfg = obj.cfg
    nv, nz = obj.grid.n_velocity, obj.T.grid.size
    v = np.zeros(nv) if v0 is None else np.array(getattr(v0, "values", v0), dtype=float).ravel()
    z = np.zeros(nz) if z0 is None else np.array(getattr(z0, "values", z0), dtype=float).ravel()
    if v.size != nv or z.size != nz:
        raise InvalidInputError("initial iterates do not match the objective's grids")
    if L2 is None:
        if ocfg.data == "ssd":
            L2 = obj.K.h_y * obj.K.norm_KtK()
        else:
            L2 = 1.0
    state = IpalmState(v, z, v.copy(), z.copy(), cfg.L1_init, float(L2))

    own_log = None
    if cfg.log_path:
        own_log = log_file = open(cfg.log_path, "a")
    if log_file is not None:
        log_file.write("#" + "\t".join(LOG_COLUMNS) + "\n")
    try:
        return _loop(obj, cfg, state, log_file)
    finally:
        if own_log is not None:
            own_log.close()


def _loop(obj, cfg, state, log_file):
    ocfg = obj.cfg
    ncc_mode = ocfg.data == "ncc"
    ev = obj.evaluate(state.v, state.z)
    J, parts = obj.total(state.v, state.z, ev)
    _check_finite(J, state, "objective")
    state.history.append(J)
    diags = []
    dual = None
    quiet = 0
    converged = False
    pinfo = ProxInfo()
    h = obj.T.grid.h
    shape = obj.T.grid.shape
    for k in range(1, cfg.max_iter + 1):
        state.k = k
        a = inertia(cfg, k)
        c = step_factor(cfg, a)
        state.alpha = a

        # v-block with backtracking on L1
        v_bar = state.v + a * (state.v - state.v_prev)
        ev_bar = ev if a == 0.0 or k == 1 else obj.evaluate(v_bar, state.z)
        gv = obj.grad_v(ev_bar)
        bt = 0
        pcg_res = 0.0
        while True:
            s1 = c * state.L1
            rhs = v_bar - gv / s1
            v_new = prox_quadratic(rhs, 1.0 / s1, obj.B, ocfg.lam1, tol=ocfg.pcg_tol,
                                   max_iter=ocfg.pcg_max_iter, x0=state.v, info=pinfo)
            pcg_res = max(pcg_res, pinfo.residual)
            ev_v = obj.evaluate(v_new, state.z)
            d = v_new - v_bar
            bound = ev_bar.H + gv @ d + 0.5 * state.L1 * (d @ d)
            if np.isfinite(ev_v.H) and ev_v.H <= bound + 1e-14 * abs(ev_bar.H):
                break
            state.L1 *= cfg.eta
            bt += 1
            if state.L1 > cfg.L1_max:
                path = _dump(state, "backtrack")
                raise NumericalBlowupError(f"L1 exceeded {cfg.L1_max:g} at iteration {k}; "
                                           f"iterates in {path}", step=k, dump_path=path)
        L1_used = state.L1

        # z-block
        z_bar = state.z + a * (state.z - state.z_prev)
        ev_z = obj.with_z(ev_v, z_bar)
        gz = obj.grad_z(ev_z)
        tv_flag = False
        while True:
            s2 = c * state.L2
            w = z_bar - gz / s2
            if ocfg.source == "tv":
                res = prox_tv(w.reshape(shape), ocfg.lam2 / s2, h, tol=ocfg.pdhg_tol,
                              max_iter=ocfg.pdhg_max_iter, dual0=dual, full_output=True)
                z_new, dual, tv_flag = res.x.ravel(), res.dual, res.warning
            else:
                z_new = prox_l2_source(w, 1.0 / s2, ocfg.lam2, obj.T.grid.cell_volume)
            ev_new = obj.with_z(ev_v, z_new)
            if not ncc_mode:
                break
            dz = z_new - z_bar
            if ev_new.H <= ev_z.H + gz @ dz + 0.5 * state.L2 * (dz @ dz) + 1e-14 * abs(ev_z.H):
                break
            state.L2 *= cfg.eta
            bt += 1

        J_new, parts = obj.total(v_new, z_new, ev_new)
        rejected = False
        if cfg.safeguard:
            J_keep, parts_keep = obj.total(v_new, state.z, ev_v)
            if J_new > J_keep:
                # inexact prox made the z-step ascend; keep the old source
                rejected = True
                z_new, ev_new, J_new, parts = state.z, ev_v, J_keep, parts_keep
        _check_finite(J_new, state, "objective")

        resid = np.sqrt(s1 * s1 * float((v_new - v_bar) @ (v_new - v_bar))
                        + s2 * s2 * float((z_new - z_bar) @ (z_new - z_bar)))
        state.v_prev, state.v = state.v, v_new
        state.z_prev, state.z = state.z, z_new
        ev = ev_new
        J_old = state.history[-1]
        state.history.append(J_new)
        row = {"iter": k, "J": J_new, "data": parts["data"], "e1": parts["e1"],
               "e2": parts["e2"], "L1": L1_used, "L2": state.L2, "alpha": a,
               "bt_count": bt, "sigma1": s1, "sigma2": s2, "pcg_residual": pcg_res,
               "tv_warning": tv_flag, "z_rejected": rejected, "residual": resid}
        diags.append(row)
        if log_file is not None:
            log_file.write("\t".join(f"{row[c]:.10g}" if isinstance(row[c], float) else str(row[c])
                                     for c in LOG_COLUMNS) + "\n")
        if tv_flag:
            log.info("iteration %d: TV prox hit its iteration cap", k)

        state.L1 = max(state.L1 / cfg.eta, 1e-12)
        rel = (J_old - J_new) / max(abs(J_new), 1e-300)
        quiet = quiet + 1 if abs(rel) < cfg.tol else 0
        if quiet >= cfg.patience:
            converged = True
            break

    J, parts = obj.total(state.v, state.z, ev)
    return IpalmResult(state.v, state.z, ev.R, J, parts, diags, converged, state)


# ---------------------------------------------------------------------------
# Gauss-Newton refinement of the velocity


@dataclass(frozen=True)
class GaussNewtonConfig:
    max_iter: int = 5
    cg_tol: float = 1e-2
    cg_max_iter: int = 20
    armijo: float = 1e-4
    max_halvings: int = 10


def _smooth_value(obj, ev):
    e1, _ = obj.e1(ev.v)
    return ev.H + e1


def gauss_newton_direction(obj: Objective, ev, cg_tol=1e-2, cg_max_iter=20):
    """Inexact solution of ``(h_Y J^T J + w B^T B) d = -grad``.

    ``J`` is the derivative of ``K R`` with respect to ``v`` at ``ev``.
    Returns ``(d, gradient)``.
    """
    if obj.cfg.data != "ssd":
        raise InvalidInputError("Gauss-Newton refinement needs the SSD data term")
    _, ge1 = obj.e1(ev.v)
    grad = obj.grad_v(ev) + ge1
    reg = obj.B.weight * obj.B.normal(obj.cfg.lam1)
    hy = obj.K.h_y
    K = obj.K

    def normal(x):
        from .flow import apply_dR_dv_T

        jx = obj.jvp_v(ev, x)
        return hy * apply_dR_dv_T(ev.flow, None, K.adjoint(jx), obj.cfg.order) + reg @ x

    n = grad.size
    A = LinearOperator((n, n), matvec=normal, dtype=float)
    diag = reg.diagonal()
    diag = np.where(diag > 0, diag, 1.0)
    M = LinearOperator((n, n), matvec=lambda r: r / diag, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d, _ = cg(A, -grad, rtol=cg_tol, atol=0.0, maxiter=cg_max_iter, M=M)
    return d, grad


def gauss_newton_refine_v(obj: Objective, v0, z, cfg: GaussNewtonConfig = GaussNewtonConfig()):
    """Refine ``v`` with the source frozen at ``z``.

    Minimises ``H(v, z) + E1(v)``, which equals the SSD against the
    corrected data ``g - K z`` plus the velocity regulariser. Every accepted
    step satisfies the Armijo condition; if the very first line search fails,
    ``v0`` is returned unchanged.

    Returns
    -------
    v : ndarray
    info : dict
        ``f0``, ``f``, ``steps`` (accepted GN steps) and ``failed``.
    """
    v = np.array(getattr(v0, "values", v0), dtype=float).ravel()
    z = np.asarray(getattr(z, "values", z), dtype=float).ravel()
    ev = obj.evaluate(v, z)
    f = f0 = _smooth_value(obj, ev)
    steps = 0
    failed = False
    for _ in range(cfg.max_iter):
        d, grad = gauss_newton_direction(obj, ev, cfg.cg_tol, cfg.cg_max_iter)
        slope = float(grad @ d)
        if not slope < 0:
            failed = steps == 0
            break
        t = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            try:
                ev_t = obj.evaluate(v + t * d, z)
                f_t = _smooth_value(obj, ev_t)
            except NumericalBlowupError:
                f_t = np.inf
            if f_t <= f + cfg.armijo * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            failed = steps == 0
            break
        v, ev, f_prev, f = v + t * d, ev_t, f, f_t
        steps += 1
        if f_prev - f <= 1e-8 * abs(f_prev):
            break
    if failed:
        v = np.array(getattr(v0, "values", v0), dtype=float).ravel()
        f = f0
    return v, {"f0": f0, "f": f, "steps": steps, "failed": failed}
