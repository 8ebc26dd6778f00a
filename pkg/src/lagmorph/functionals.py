"""Data terms, regularisers and the assembled objective.

The objective is

    J(v, z) = D(K R_{v,z}, g) + E1_lambda(v) + lam2 * E2(z)

with ``D`` either SSD or NCC, ``E1_lambda`` the lambda-weighted quadratic
velocity regulariser and ``E2`` the discrete TV (or a squared L2 norm) of the
source. The smooth part ``H = D(K R, g)`` is handled by gradients, the two
regularisers by their proximal maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError
from .flow import SolverConfig, apply_dR_dv, apply_dR_dv_T, solution_map
from .grid import CellGrid, ScalarField, VelocityField
from .radon import Sinogram

__all__ = [
    "ssd", "ssd_grad", "ncc", "ncc_grad",
    "RegOperatorB", "e1_value_grad",
    "grad_h", "div_h", "tv_value",
    "ObjectiveConfig", "Objective",
    "objective_eval", "objective_grad_v", "objective_grad_z",
]

REG_KINDS = ("third-order", "curvature", "diffusion")


# ---------------------------------------------------------------------------
# data terms


def _pair(x, y, h_y=None):
    if isinstance(x, Sinogram) and isinstance(y, Sinogram):
        if x.geometry != y.geometry:
            raise InvalidInputError("sinograms have different geometries")
        return x.data, y.data, x.geometry.h_y if h_y is None else h_y
    xa = np.asarray(getattr(x, "data", x), dtype=float).ravel()
    ya = np.asarray(getattr(y, "data", y), dtype=float).ravel()
    if xa.shape != ya.shape:
        raise InvalidInputError(f"size mismatch: {xa.size} vs {ya.size}")
    return xa, ya, 1.0 if h_y is None else h_y


def ssd(x, y, h_y=None):
    """``0.5 * h_Y * ||x - y||^2``."""
    xa, ya, hy = _pair(x, y, h_y)
    r = xa - ya
    return 0.5 * hy * float(r @ r)


def ssd_grad(x, y, h_y=None):
    xa, ya, hy = _pair(x, y, h_y)
    return hy * (xa - ya)


def _ncc_parts(x, y):
    xa, ya, _ = _pair(x, y)
    nx = float(xa @ xa)
    ny = float(ya @ ya)
    if nx == 0.0 or ny == 0.0:
        raise InvalidInputError("NCC is undefined for a zero-norm argument")
    return xa, ya, nx, ny, float(xa @ ya)


def ncc(x, y):
    """``1 - <x,y>^2 / (|x|^2 |y|^2)``, in ``[0, 1]``."""
    _, _, nx, ny, xy = _ncc_parts(x, y)
    return float(min(max(1.0 - xy * xy / (nx * ny), 0.0), 1.0))


def ncc_grad(x, y):
    """Gradient of :func:`ncc` with respect to ``x``."""
    xa, ya, nx, ny, xy = _ncc_parts(x, y)
    return -2.0 * xy / (nx * ny) * ya + 2.0 * xy * xy / (nx * nx * ny) * xa


# ---------------------------------------------------------------------------
# velocity regulariser


def _replicate_pad(m, width):
    """``(m + 2 width) x m`` edge-replication (zero Neumann) padding matrix."""
    src = np.clip(np.arange(-width, m + width), 0, m - 1)
    return sp.csr_matrix((np.ones(src.size), (np.arange(src.size), src)),
                         shape=(src.size, m))


# Compact stencils, centred at a node (even order) or at the half node
# i + 1/2 (odd order). Wide collocated odd stencils such as [-.5, 1, 0, -1, .5]
# vanish on the alternating mode, which then goes unpenalised on coarse levels
# and turns into genuine roughness after prolongation.
_STENCILS = {
    1: (np.array([-1.0, 1.0]), 0),
    2: (np.array([1.0, -2.0, 1.0]), -1),
    3: (np.array([-1.0, 3.0, -3.0, 1.0]), -1),
}
PAD = 3


@lru_cache(maxsize=64)
def _axis_derivative(m, order, h):
    """``order``-th difference quotient on padded samples, restricted to the ``m`` cells."""
    if order == 0:
        return sp.identity(m, format="csr")
    coef, first = _STENCILS[order]
    n = m + 2 * PAD
    diff = sp.diags(list(coef), list(range(first, first + coef.size)), shape=(n, n), format="csr")
    keep = sp.identity(n, format="csr")[PAD : PAD + m]
    return (keep @ diff @ _replicate_pad(m, PAD) / h**order).tocsr()


def _spatial_blocks(kind, dim, m):
    """Scalar-image derivative blocks for each regulariser kind."""
    h = 1.0 / m
    if kind == "diffusion":
        orders = [tuple(int(a == k) for a in range(dim)) for k in range(dim)]
        blocks = [_kron_axes(o, m, h) for o in orders]
    elif kind == "curvature":
        lap = None
        for k in range(dim):
            term = _kron_axes(tuple(2 * int(a == k) for a in range(dim)), m, h)
            lap = term if lap is None else lap + term
        blocks = [lap]
    elif kind == "third-order":
        blocks = []
        for combo in combinations_with_replacement(range(dim), 3):
            blocks.append(_kron_axes(tuple(combo.count(a) for a in range(dim)), m, h))
    else:
        raise InvalidInputError(f"unknown regulariser kind {kind!r}")
    return sp.vstack(blocks, format="csr")


def _kron_axes(orders, m, h):
    out = None
    for o in orders:
        d1 = _axis_derivative(m, o, h)
        out = d1 if out is None else sp.kron(out, d1, format="csr")
    return out


class RegOperatorB:
    """Finite-difference operator of the velocity regulariser.

    Holds three unweighted blocks acting on the flat velocity vector: spatial
    derivatives (per time node and component), forward differences between
    time nodes, and the identity. ``normal(lam1)`` returns the weighted
    ``lam1[0] S^T S + lam1[1] D_t^T D_t + lam1[2] I``.
    """

    def __init__(self, grid: CellGrid, kind="third-order"):
        if kind not in REG_KINDS:
            raise InvalidInputError(f"unknown regulariser kind {kind!r}")
        self.grid = grid
        self.kind = kind
        self.padding = PAD
        n_img = grid.size
        scalar = _spatial_blocks(kind, grid.dim, grid.m)
        n_fields = (grid.m_t + 1) * grid.dim
        self.spatial = sp.kron(sp.identity(n_fields, format="csr"), scalar, format="csr")
        if grid.m_t >= 1:
            dt = sp.diags([-np.ones(grid.m_t), np.ones(grid.m_t)], [0, 1],
                          shape=(grid.m_t, grid.m_t + 1)) / grid.h_t
            self.temporal = sp.kron(dt, sp.identity(grid.dim * n_img), format="csr")
        else:
            self.temporal = sp.csr_matrix((0, grid.n_velocity))
        self._normals = {}
        self._sts = (self.spatial.T @ self.spatial).tocsr()
        self._tts = (self.temporal.T @ self.temporal).tocsr()

    @property
    def weight(self):
        """Quadrature factor ``h_t h_X^d``."""
        return self.grid.h_t * self.grid.cell_volume

    def matrix(self, lam1):
        """Stacked weighted operator ``B_lambda`` (rows scaled by ``sqrt(lam)``)."""
        l1, l2, l3 = _lam(lam1)
        return sp.vstack([np.sqrt(l1) * self.spatial, np.sqrt(l2) * self.temporal,
                          np.sqrt(l3) * sp.identity(self.grid.n_velocity)], format="csr")

    def normal(self, lam1):
        key = _lam(lam1)
        if key not in self._normals:
            l1, l2, l3 = key
            self._normals[key] = (l1 * self._sts + l2 * self._tts
                                  + l3 * sp.identity(self.grid.n_velocity)).tocsr()
        return self._normals[key]

    def apply_spatial(self, v):
        return self.spatial @ np.asarray(v, dtype=float).ravel()

    def symbol(self, lam1):
        """Approximate eigenvalues of ``normal(lam1)`` in the DCT-II basis.

        The temporal part is exact (the path Laplacian is DCT-diagonal);
        the spatial part keeps the diagonal of each 1-D Gram matrix in the
        DCT basis. Shape ``(m_t + 1, 1) + (m,) * d``.
        """
        key = ("symbol",) + _lam(lam1)
        if key in self._normals:
            return self._normals[key]
        l1, l2, l3 = _lam(lam1)
        grid = self.grid
        dim, m = grid.dim, grid.m
        d = [_gram_symbol(m, o) for o in range(4)]

        def outer(orders):
            out = np.ones((1,) * dim)
            for ax, o in enumerate(orders):
                shp = [1] * dim
                shp[ax] = m
                out = out * d[o].reshape(shp)
            return out

        if self.kind == "diffusion":
            spatial = sum(outer(tuple(int(a == k) for a in range(dim))) for k in range(dim))
        elif self.kind == "curvature":
            root = sum(np.sqrt(outer(tuple(2 * int(a == k) for a in range(dim)))) for k in range(dim))
            spatial = root * root
        else:
            spatial = sum(outer(tuple(c.count(a) for a in range(dim)))
                          for c in combinations_with_replacement(range(dim), 3))
        nt = grid.m_t + 1
        mu = (2.0 - 2.0 * np.cos(np.pi * np.arange(nt) / nt)) / grid.h_t**2 if nt > 1 else np.zeros(1)
        sym = (l1 * spatial[None, None] + l2 * mu.reshape((nt, 1) + (1,) * dim) + l3)
        self._normals[key] = sym
        return sym


@lru_cache(maxsize=32)
def _gram_symbol(m, order):
    from scipy.fft import dct

    D = _axis_derivative(m, order, 1.0 / m).toarray()
    C = dct(np.eye(m), norm="ortho", axis=0)
    return np.einsum("ij,jk,ik->i", C, D.T @ D, C)


def _lam(lam1):
    lam = tuple(float(a) for a in np.broadcast_to(np.asarray(lam1, dtype=float), (3,)))
    if min(lam) < 0:
        raise InvalidInputError(f"regularisation weights must be non-negative, got {lam}")
    return lam


def e1_value_grad(v, B: RegOperatorB, lam1):
    """``0.5 h_t h^d v^T B_l^T B_l v`` and its gradient."""
    vals = v.values if isinstance(v, VelocityField) else np.asarray(v, dtype=float).ravel()
    if vals.size != B.grid.n_velocity:
        raise InvalidInputError(f"velocity has {vals.size} entries, operator expects {B.grid.n_velocity}")
    g = B.weight * (B.normal(lam1) @ vals)
    return 0.5 * float(vals @ g), g


# ---------------------------------------------------------------------------
# total variation


def grad_h(img, h):
    """Forward differences, zero at the last index; returns ``(d,) + shape``."""
    img = np.asarray(img, dtype=float)
    out = np.zeros((img.ndim,) + img.shape)
    for k in range(img.ndim):
        sl = [slice(None)] * img.ndim
        sl[k] = slice(0, -1)
        out[(k,) + tuple(sl)] = np.diff(img, axis=k) / h
    return out


def div_h(p, h):
    """Negative adjoint of :func:`grad_h`: ``<grad_h u, p> = -<u, div_h p>``."""
    dim = p.shape[0]
    out = np.zeros(p.shape[1:])
    for k in range(dim):
        pk = p[k]
        n = pk.shape[k]
        sl = lambda s: tuple(s if a == k else slice(None) for a in range(dim))
        if n == 1:
            continue
        out[sl(slice(0, 1))] += pk[sl(slice(0, 1))]
        out[sl(slice(1, n - 1))] += pk[sl(slice(1, n - 1))] - pk[sl(slice(0, n - 2))]
        out[sl(slice(n - 1, n))] -= pk[sl(slice(n - 2, n - 1))]
    return out / h


def tv_value(z, h=None):
    """Isotropic discrete TV ``h^d * sum_i |grad_h z|_i``."""
    if isinstance(z, ScalarField):
        img, h = z.image, z.grid.h
    else:
        img = np.asarray(z, dtype=float)
        h = 1.0 / img.shape[0] if h is None else h
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("TV of non-finite image")
    g = grad_h(img, h)
    return h**img.ndim * float(np.sqrt((g * g).sum(axis=0)).sum())


# ---------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class ObjectiveConfig:
    data: str = "ssd"
    reg: str = "third-order"
    source: str = "tv"
    lam1: tuple = (0.001, 0.001, 1e-6)
    lam2: float = 0.1
    pcg_tol: float = 1e-8
    pcg_max_iter: int = 500
    pdhg_tol: float = 1e-6
    pdhg_max_iter: int = 500
    eta: float = 2.0
    n_steps: int = 5
    scheme: str = "rk4"
    order: str = "cubic"
    m_t: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lam1", _lam(self.lam1))
        if self.data not in ("ssd", "ncc"):
            raise InvalidInputError(f"unknown data term {self.data!r}")
        if self.reg not in REG_KINDS:
            raise InvalidInputError(f"unknown regulariser {self.reg!r}")
        if self.source not in ("tv", "l2"):
            raise InvalidInputError(f"unknown source regulariser {self.source!r}")
        if self.lam2 < 0:
            raise InvalidInputError("lam2 must be non-negative")
        if min(self.pcg_tol, self.pdhg_tol) <= 0 or self.eta <= 1:
            raise InvalidInputError("tolerances must be positive and eta > 1")

    @property
    def solver(self):
        return SolverConfig(self.n_steps, self.scheme)


@dataclass
class Evaluation:
    """Smooth-part evaluation at ``(v, z)``; keeps what the gradients need."""

    v: np.ndarray
    z: np.ndarray
    H: float
    R: np.ndarray
    KR: np.ndarray
    flow: object = field(repr=False)
    dD: np.ndarray = field(repr=False)


class Objective:
    """Objective bound to template, data and projector at one resolution.

    Parameters
    ----------
    T : ScalarField
    g : Sinogram or ndarray
    K : operator with ``forward``, ``adjoint`` and ``h_y``
    cfg : ObjectiveConfig
    """

    def __init__(self, T: ScalarField, g, K, cfg: ObjectiveConfig = ObjectiveConfig()):
        self.T = T
        self.grid = CellGrid(T.grid.dim, T.grid.m, cfg.m_t)
        self.g = np.asarray(getattr(g, "data", g), dtype=float).ravel()
        self.K = K
        self.cfg = cfg
        self.B = RegOperatorB(self.grid, cfg.reg)
        if cfg.data == "ncc" and not np.any(self.g):
            raise InvalidInputError("NCC needs non-zero data")

    # smooth part -----------------------------------------------------------
    def evaluate(self, v, z) -> Evaluation:
        v = np.asarray(getattr(v, "values", v), dtype=float).ravel()
        z = np.asarray(getattr(z, "values", z), dtype=float).ravel()
        R, flow = solution_map(self.T, VelocityField(self.grid, v),
                               ScalarField(self.T.grid, z), self.cfg.solver, self.cfg.order)
        KR = self.K.forward(R.values)
        if self.cfg.data == "ssd":
            H = ssd(KR, self.g, self.K.h_y)
            dD = ssd_grad(KR, self.g, self.K.h_y)
        else:
            H = ncc(KR, self.g)
            dD = ncc_grad(KR, self.g)
        return Evaluation(v, z, H, R.values, KR, flow, dD)

    def with_z(self, ev: Evaluation, z) -> Evaluation:
        """Re-evaluate at a new source ``z`` reusing the flow of ``ev``."""
        z = np.asarray(getattr(z, "values", z), dtype=float).ravel()
        R = ev.R - ev.z + z
        KR = self.K.forward(R)
        if self.cfg.data == "ssd":
            H, dD = ssd(KR, self.g, self.K.h_y), ssd_grad(KR, self.g, self.K.h_y)
        else:
            H, dD = ncc(KR, self.g), ncc_grad(KR, self.g)
        return Evaluation(ev.v, z, H, R, KR, ev.flow, dD)

    def grad_v(self, ev: Evaluation):
        return apply_dR_dv_T(ev.flow, None, self.K.adjoint(ev.dD), self.cfg.order)

    def grad_z(self, ev: Evaluation):
        return self.K.adjoint(ev.dD)

    def jvp_v(self, ev: Evaluation, dv):
        """``d(K R)/dv`` applied to ``dv``."""
        return self.K.forward(apply_dR_dv(ev.flow, None, dv, self.cfg.order))

    # regularisers ----------------------------------------------------------
    def e1(self, v):
        return e1_value_grad(v, self.B, self.cfg.lam1)

    def e2(self, z):
        z = np.asarray(getattr(z, "values", z), dtype=float)
        if self.cfg.source == "tv":
            return tv_value(z.reshape(self.T.grid.shape), self.T.grid.h)
        return 0.5 * self.T.grid.cell_volume * float(z @ z)

    def total(self, v, z, ev: Evaluation = None):
        """``(J, parts)``; ``parts['e1']`` is already lambda-weighted."""
        ev = self.evaluate(v, z) if ev is None else ev
        e1, _ = self.e1(ev.v)
        e2 = self.e2(ev.z)
        parts = {"data": ev.H, "e1": e1, "e2": e2}
        return ev.H + e1 + self.cfg.lam2 * e2, parts


def objective_eval(T, v, z, g, K, cfg: ObjectiveConfig = ObjectiveConfig()):
    """``J = data + e1 + lam2 * e2`` and its parts."""
    return Objective(T, g, K, cfg).total(v, z)


def objective_grad_v(T, v, z, g, K, cfg: ObjectiveConfig = ObjectiveConfig()):
    """Gradient of the smooth part ``H`` with respect to ``v``."""
    obj = Objective(T, g, K, cfg)
    return obj.grad_v(obj.evaluate(v, z))


def objective_grad_z(T, v, z, g, K, cfg: ObjectiveConfig = ObjectiveConfig()):
    obj = Objective(T, g, K, cfg)
    return obj.grad_z(obj.evaluate(v, z))
