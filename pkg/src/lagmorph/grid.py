"""Cell-centred grids on the unit cube, fields living on them, and interpolation.

Conventions
-----------
* A grid with ``m`` cells per axis covers ``(0, 1)^d``; cell centres sit at
  ``(i + 1/2) * h`` for ``i = 0..m-1`` (0-based).
* Images are stored as arrays of shape ``(m,) * d``; axis ``k`` carries the
  coordinate ``x_k``. Flattening is C order (last axis fastest).
* A velocity field is stored with shape ``(m_t + 1, d, m, ..., m)``: time
  node, component, then space.
* Query points are plain ``(n, d)`` arrays in physical coordinates.
* Off-grid queries are clamped to the bounding box of the cell centres, so
  values are continued by their nearest boundary value and the derivative
  across a clamped axis is zero.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "CellGrid",
    "ScalarField",
    "VelocityField",
    "SplineInterpolant",
    "interp_spline",
    "interp_velocity",
    "prolongate",
    "restrict",
]


@dataclass(frozen=True)
class CellGrid:
    """Cell-centred discretisation of ``(0,1)^dim`` and of the time interval."""

    dim: int
    m: int
    m_t: int = 1

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise InvalidInputError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.m < 1:
            raise InvalidInputError(f"m must be positive, got {self.m}")
        if self.m_t < 0:
            raise InvalidInputError(f"m_t must be non-negative, got {self.m_t}")

    @property
    def h(self) -> float:
        return 1.0 / self.m

    @property
    def h_t(self) -> float:
        # a single time node represents a stationary field on [0, 1]
        return 1.0 / self.m_t if self.m_t >= 1 else 1.0

    @property
    def shape(self) -> tuple:
        return (self.m,) * self.dim

    @property
    def size(self) -> int:
        return self.m**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def n_velocity(self) -> int:
        return self.dim * (self.m_t + 1) * self.size

    @property
    def velocity_shape(self) -> tuple:
        return (self.m_t + 1, self.dim) + self.shape

    def axis_centers(self) -> np.ndarray:
        return (np.arange(self.m) + 0.5) * self.h

    def centers(self) -> np.ndarray:
        """Cell centres as an ``(m^d, d)`` array in C order."""
        return _centers(self.dim, self.m).copy()

    def time_nodes(self) -> np.ndarray:
        if self.m_t == 0:
            return np.zeros(1)
        return np.arange(self.m_t + 1) * self.h_t

    def with_m(self, m: int) -> "CellGrid":
        return CellGrid(self.dim, m, self.m_t)


@lru_cache(maxsize=16)
def _centers(dim, m):
    c = (np.arange(m) + 0.5) / m
    mesh = np.meshgrid(*([c] * dim), indexing="ij")
    out = np.stack([a.ravel() for a in mesh], axis=1)
    out.setflags(write=False)
    return out


def _as_finite(values, name):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


@dataclass
class ScalarField:
    """Image sampled at the cell centres of ``grid``.

    ``values`` is the flat C-ordered sample vector of length ``m^d``;
    ``range_hint`` only matters for export scaling.
    """

    grid: CellGrid
    values: np.ndarray
    range_hint: tuple = field(default=(0.0, 1.0))

    def __post_init__(self):
        vals = _as_finite(self.values, "field values").ravel()
        if vals.size != self.grid.size:
            raise InvalidInputError(
                f"field has {vals.size} values, grid expects {self.grid.size}"
            )
        self.values = vals

    @classmethod
    def from_array(cls, arr, m_t=1, range_hint=(0.0, 1.0)):
        arr = np.asarray(arr, dtype=float)
        if len(set(arr.shape)) != 1:
            raise InvalidInputError(f"image must be square/cubic, got {arr.shape}")
        return cls(CellGrid(arr.ndim, arr.shape[0], m_t), arr.ravel(), range_hint)

    @property
    def image(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy(), self.range_hint)


@dataclass
class VelocityField:
    """Time-dependent vector field: time nodes x components x cell centres."""

    grid: CellGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _as_finite(self.values, "velocity values").ravel()
        if vals.size != self.grid.n_velocity:
            raise InvalidInputError(
                f"velocity has {vals.size} values, grid expects {self.grid.n_velocity}"
            )
        self.values = vals

    @classmethod
    def zeros(cls, grid: CellGrid) -> "VelocityField":
        return cls(grid, np.zeros(grid.n_velocity))

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.grid.velocity_shape)


# ---------------------------------------------------------------------------
# stencils


def _check_points(pts, dim):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise InvalidInputError(f"points must have shape (n, {dim}), got {pts.shape}")
    if pts.shape[0] == 0:
        raise InvalidInputError("empty point set")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("points contain non-finite coordinates")
    return pts


def _axis_coords(x, m):
    """Clamped continuous index, base cell and fraction along one axis.

    Returns ``(i0, t, inside)`` with ``0 <= i0 <= m-2`` and ``t`` in ``[0, 1]``;
    ``inside`` is False where the coordinate was clamped.
    """
    u = x * m - 0.5
    inside = (u >= 0.0) & (u <= m - 1)
    u = np.clip(u, 0.0, m - 1)
    i0 = np.minimum(np.floor(u), m - 2).astype(np.intp)
    return i0, u - i0, inside


def _linear_stencil(pts, m):
    """Multilinear weights at ``pts`` on an ``m``-grid.

    Returns flat indices ``(n, 2^d)``, weights ``(n, 2^d)`` and weight
    derivatives ``(n, 2^d, d)`` with respect to the physical coordinates.
    """
    n, dim = pts.shape
    if m == 1:
        return (np.zeros((n, 1), np.intp), np.ones((n, 1)), np.zeros((n, 1, dim)))
    per_axis = []
    for k in range(dim):
        i0, t, inside = _axis_coords(pts[:, k], m)
        w = np.stack([1.0 - t, t], axis=1)
        dw = np.stack([-np.ones_like(t), np.ones_like(t)], axis=1) * (m * inside)[:, None]
        per_axis.append((i0, w, dw))
    corners = list(itertools.product((0, 1), repeat=dim))
    idx = np.zeros((n, len(corners)), np.intp)
    wts = np.ones((n, len(corners)))
    dwts = np.ones((n, len(corners), dim))
    for c, offs in enumerate(corners):
        flat = np.zeros(n, np.intp)
        for k, a in enumerate(offs):
            i0, w, dw = per_axis[k]
            flat = flat * m + (i0 + a)
            wts[:, c] *= w[:, a]
            for j in range(dim):
                dwts[:, c, j] *= dw[:, a] if j == k else w[:, a]
        idx[:, c] = flat
    return idx, wts, dwts


def _bspline_weights(t):
    s = 1.0 - t
    t2 = t * t
    t3 = t2 * t
    w = np.stack([s**3 / 6.0, (3 * t3 - 6 * t2 + 4) / 6.0,
                  (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0, t3 / 6.0], axis=1)
    dw = np.stack([-0.5 * s * s, 0.5 * (3 * t2 - 4 * t),
                   0.5 * (-3 * t2 + 2 * t + 1), 0.5 * t2], axis=1)
    return w, dw


@lru_cache(maxsize=16)
def _prefilter_inverse(m):
    # natural end conditions: c[-1] = 2c[0] - c[1] turns the first row into c[0] = f[0]
    a = np.zeros((m, m))
    a[0, 0] = a[-1, -1] = 1.0
    for i in range(1, m - 1):
        a[i, i - 1 : i + 2] = (1 / 6, 4 / 6, 1 / 6)
    inv = np.linalg.inv(a)
    inv.setflags(write=False)
    return inv


def spline_coefficients(image: np.ndarray) -> np.ndarray:
    """Interpolating cubic B-spline coefficients with natural end conditions.

    The result is padded by one linearly extrapolated layer per side, so it
    has shape ``(m + 2,) * d``. Affine images are their own coefficients.
    """
    coef = np.asarray(image, dtype=float)
    m = coef.shape[0]
    if m < 2:
        raise InvalidInputError("cubic interpolation needs m >= 2")
    inv = _prefilter_inverse(m)
    for ax in range(coef.ndim):
        coef = np.moveaxis(np.tensordot(inv, coef, axes=(1, ax)), 0, ax)
    for ax in range(coef.ndim):
        first = 2 * np.take(coef, [0], ax) - np.take(coef, [1], ax)
        last = 2 * np.take(coef, [-1], ax) - np.take(coef, [-2], ax)
        coef = np.concatenate([first, coef, last], axis=ax)
    return coef


class SplineInterpolant:
    """Reusable interpolant of a fixed image.

    Parameters
    ----------
    image : ndarray
        Samples at cell centres, shape ``(m,) * d``.
    order : {"cubic", "linear"}
    """

    def __init__(self, image, order="cubic"):
        image = _as_finite(image, "image")
        if order not in ("cubic", "linear"):
            raise InvalidInputError(f"unknown interpolation order {order!r}")
        self.order = order
        self.dim = image.ndim
        self.m = image.shape[0]
        if order == "cubic" and self.m >= 2:
            self._data = spline_coefficients(image).ravel()
        else:
            self.order = "linear" if order == "cubic" else order
            self._data = image.ravel().copy()

    def __call__(self, pts, gradient=True):
        pts = _check_points(pts, self.dim)
        if self.order == "linear":
            idx, w, dw = _linear_stencil(pts, self.m)
            vals = self._data[idx]
            value = (w * vals).sum(axis=1)
            if not gradient:
                return value
            return value, np.einsum("nc,nck->nk", vals, dw)
        return self._cubic(pts, gradient)

    def _cubic(self, pts, gradient):
        n, dim = pts.shape
        m = self.m
        mp = m + 2
        per_axis = []
        for k in range(dim):
            i0, t, inside = _axis_coords(pts[:, k], m)
            w, dw = _bspline_weights(t)
            per_axis.append((i0, w, dw * (m * inside)[:, None]))
        value = np.zeros(n)
        grad = np.zeros((n, dim))
        # padded index of original cell i0 - 1 is i0
        for offs in itertools.product(range(4), repeat=dim):
            flat = np.zeros(n, np.intp)
            wprod = np.ones(n)
            for k, a in enumerate(offs):
                flat = flat * mp + (per_axis[k][0] + a)
                wprod = wprod * per_axis[k][1][:, a]
            c = self._data[flat]
            value += wprod * c
            if gradient:
                for j in range(dim):
                    g = c.copy()
                    for k, a in enumerate(offs):
                        g *= per_axis[k][2][:, a] if k == j else per_axis[k][1][:, a]
                    grad[:, j] += g
        if not gradient:
            return value
        return value, grad


def interp_spline(fld: ScalarField, pts, order="cubic"):
    """Interpolate ``fld`` at ``pts``; returns ``(values (n,), gradients (n, d))``."""
    return SplineInterpolant(fld.image, order)(pts)


# ---------------------------------------------------------------------------
# velocity interpolation


def _time_weights(grid, t):
    if not (0.0 <= t <= 1.0) or not np.isfinite(t):
        raise InvalidInputError(f"time {t} outside [0, 1]")
    if grid.m_t == 0:
        return (0,), (1.0,)
    tau = t * grid.m_t
    j0 = min(int(np.floor(tau)), grid.m_t - 1)
    s = tau - j0
    return (j0, j0 + 1), (1.0 - s, s)


class VelocityStencil:
    """Interpolation stencil of a velocity field at one time and point set.

    ``index`` points at component 0 in the flat velocity vector; component
    ``c`` lives at ``index + c * m^d``.
    """

    __slots__ = ("index", "weight", "dim", "comp_stride", "n_velocity")

    def __init__(self, index, weight, dim, comp_stride, n_velocity):
        self.index = index
        self.weight = weight
        self.dim = dim
        self.comp_stride = comp_stride
        self.n_velocity = n_velocity

    def apply(self, dv):
        """``d(values)/dv @ dv`` as an ``(n, d)`` array."""
        return np.stack(
            [(self.weight * dv[self.index + c * self.comp_stride]).sum(axis=1)
             for c in range(self.dim)], axis=1)

    def apply_T(self, g):
        """Transpose product: scatter ``(n, d)`` cotangents onto the velocity vector."""
        out = np.zeros(self.n_velocity)
        for c in range(self.dim):
            out += np.bincount((self.index + c * self.comp_stride).ravel(),
                               weights=(self.weight * g[:, c : c + 1]).ravel(),
                               minlength=self.n_velocity)
        return out

    def to_sparse(self):
        import scipy.sparse as sp

        n, k = self.index.shape
        rows = np.repeat(np.arange(n)[:, None] * self.dim, k, axis=1)
        blocks = [
            sp.csr_matrix((self.weight.ravel(), ((rows + c).ravel(),
                           (self.index + c * self.comp_stride).ravel())),
                          shape=(n * self.dim, self.n_velocity))
            for c in range(self.dim)
        ]
        return sum(blocks[1:], blocks[0]).tocsr()


def velocity_stencil(grid: CellGrid, t: float, pts):
    """Values, spatial Jacobian and coefficient stencil of the interpolated field.

    Returns
    -------
    (spatial_index, spatial_weights, spatial_dweights, time_nodes, time_weights)
    used by :func:`eval_velocity`.
    """
    idx, w, dw = _linear_stencil(pts, grid.m)
    nodes, tw = _time_weights(grid, t)
    return idx, w, dw, nodes, tw


def eval_velocity(v_flat, grid: CellGrid, t: float, pts):
    """Multilinear (space) x linear (time) interpolation of a velocity field.

    Returns ``values (n, d)``, ``jac_pts (n, d, d)`` with
    ``jac_pts[i, c, k] = d v_c / d x_k`` and a :class:`VelocityStencil`.
    """
    dim = grid.dim
    size = grid.size
    idx, w, dw, nodes, tw = velocity_stencil(grid, t, pts)
    v = v_flat.reshape(grid.m_t + 1, dim, size)
    vals = np.zeros((pts.shape[0], dim))
    jac = np.zeros((pts.shape[0], dim, dim))
    full_idx = []
    full_w = []
    for j, a in zip(nodes, tw):
        if a == 0.0 and len(nodes) > 1:
            continue
        for c in range(dim):
            corner = v[j, c][idx]
            vals[:, c] += a * (w * corner).sum(axis=1)
            jac[:, c, :] += a * np.einsum("nq,nqk->nk", corner, dw)
        full_idx.append(idx + j * dim * size)
        full_w.append(a * w)
    stencil = VelocityStencil(np.concatenate(full_idx, axis=1),
                              np.concatenate(full_w, axis=1), dim, size,
                              grid.n_velocity)
    return vals, jac, stencil


def interp_velocity(v: VelocityField, t: float, pts):
    """Interpolate ``v`` at time ``t`` and points ``pts``.

    Returns
    -------
    values : ndarray (n, d)
    jac_pts : ndarray (n, d, d)
        Derivative with respect to the query point.
    jac_v : scipy.sparse.csr_matrix (n*d, N)
        Derivative with respect to the velocity coefficients; row ``i*d + c``
        belongs to component ``c`` at point ``i``.
    """
    pts = _check_points(pts, v.grid.dim)
    vals, jac, stencil = eval_velocity(v.values, v.grid, t, pts)
    return vals, jac, stencil.to_sparse()


# ---------------------------------------------------------------------------
# grid transfer


def _prolongate_image(img, m_fine):
    m = img.shape[0]
    dim = img.ndim
    pts = _centers(dim, m_fine)
    idx, w, _ = _linear_stencil(pts, m)
    return (w * img.ravel()[idx]).sum(axis=1).reshape((m_fine,) * dim)


def prolongate(fld, fine: CellGrid):
    """Multilinear interpolation of a coarse field onto the doubled grid ``fine``."""
    coarse = fld.grid
    if fine.m != 2 * coarse.m or fine.dim != coarse.dim:
        raise InvalidInputError(f"cannot prolongate m={coarse.m} onto m={fine.m}")
    if isinstance(fld, VelocityField):
        if fine.m_t != coarse.m_t:
            raise InvalidInputError("time nodes must match for velocity prolongation")
        arr = fld.array
        out = np.empty(fine.velocity_shape)
        for j in range(arr.shape[0]):
            for c in range(arr.shape[1]):
                out[j, c] = _prolongate_image(arr[j, c], fine.m)
        return VelocityField(fine, out.ravel())
    return ScalarField(fine, _prolongate_image(fld.image, fine.m).ravel(), fld.range_hint)


def restrict_image(img):
    """``2^d`` block average of an image with even side length."""
    img = np.asarray(img, dtype=float)
    m = img.shape[0]
    if m % 2:
        raise InvalidInputError(f"cannot restrict odd size {m}")
    dim = img.ndim
    shp = []
    for _ in range(dim):
        shp += [m // 2, 2]
    return img.reshape(shp).mean(axis=tuple(range(1, 2 * dim, 2)))


def restrict(fld):
    """Block-average restriction of a scalar or velocity field to ``m / 2``."""
    coarse = fld.grid.with_m(fld.grid.m // 2)
    if isinstance(fld, VelocityField):
        arr = fld.array
        out = np.stack([np.stack([restrict_image(a) for a in row]) for row in arr])
        return VelocityField(coarse, out.ravel())
    return ScalarField(coarse, restrict_image(fld.image).ravel(), fld.range_hint)
