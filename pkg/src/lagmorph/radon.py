"""Discrete parallel-beam Radon transform with exact pixel-intersection weights.

Every ray is traced through the pixel grid of ``(0,1)^2``. The weight of a
pixel is the length of the ray segment inside it, so forward and adjoint are
one sparse matrix and its transpose.

Detector layout: ``q`` cells centred on the image centre covering a line of
length ``sqrt(2)`` (the diagonal of the unit square). Cell spacing is
``sqrt(2)/q``. The quadrature weight of the data term is still ``h_Y = 1/q``.

Sinogram values are ``scale`` times the physical line integrals. The
multi-level pipeline uses ``scale = m / DATA_UNIT`` (integrals in units of
``DATA_UNIT`` pixel lengths). Any scale proportional to ``m`` makes the
``/4`` pairwise detector downsampling rule match the operator on the coarser
grid; the constant fixes the balance between the data term and the
regularisation weights.

3-D volumes rotate about the third axis: each slice ``x_3 = const`` is
projected independently and the sinogram layout is ``(angle, detector,
slice)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError
from .grid import CellGrid, ScalarField

__all__ = [
    "SinogramGeometry",
    "Sinogram",
    "RadonOperator",
    "IdentityOperator",
    "radon_forward",
    "radon_adjoint",
    "opnorm_KtK",
    "downsample_sinogram",
    "level_geometry",
    "equispaced_angles",
    "write_sinogram_csv",
    "read_sinogram_csv",
    "read_raw_sinogram",
]

DETECTOR_LENGTH = np.sqrt(2.0)
DATA_UNIT = 8.0


def equispaced_angles(p):
    """``p`` angles in degrees, equally spaced over ``[0, 180)``."""
    return tuple(float(a) for a in np.arange(p) * 180.0 / p)


@dataclass(frozen=True)
class SinogramGeometry:
    """Parallel-beam measurement layout.

    ``n_slices`` is 0 for 2-D data; for 3-D data it equals the number of
    image slices along the rotation axis.
    """

    angles: tuple
    q: int
    level: int = None
    scale: float = 1.0
    n_slices: int = 0

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if len(self.angles) < 1:
            raise InvalidInputError("geometry needs at least one angle")
        if self.q < 1:
            raise InvalidInputError(f"detector cell count must be positive, got {self.q}")
        if not np.all(np.isfinite(self.angles)):
            raise InvalidInputError("angles must be finite")

    @property
    def p(self):
        return len(self.angles)

    @property
    def h_y(self):
        return 1.0 / self.q

    @property
    def size(self):
        return self.p * self.q * max(self.n_slices, 1)

    @property
    def shape(self):
        if self.n_slices:
            return (self.p, self.q, self.n_slices)
        return (self.p, self.q)

    def detector_offsets(self):
        du = DETECTOR_LENGTH / self.q
        return -0.5 * DETECTOR_LENGTH + (np.arange(self.q) + 0.5) * du


def level_geometry(angles, k, scale=None, n_slices=0):
    """Geometry at level ``k`` with ``q = 1.5 * 2^k`` detector cells.

    ``scale`` defaults to ``2^k / DATA_UNIT``.
    """
    q = 3 * 2 ** (k - 1)
    if k < 1:
        raise InvalidInputError(f"level must be >= 1, got {k}")
    return SinogramGeometry(tuple(angles), q, level=k,
                            scale=2.0**k / DATA_UNIT if scale is None else scale,
                            n_slices=n_slices)


@dataclass
class Sinogram:
    geometry: SinogramGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).ravel()
        if data.size != self.geometry.size:
            raise InvalidInputError(
                f"sinogram has {data.size} values, geometry expects {self.geometry.size}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("sinogram contains non-finite values")
        self.data = data

    @property
    def array(self):
        return self.data.reshape(self.geometry.shape)


# ---------------------------------------------------------------------------
# ray tracing


def _trace_angle(theta, offsets, m):
    """Intersection lengths of all rays at one angle with an ``m x m`` grid.

    Returns ``(ray, pixel, length)`` triplets, ``pixel`` flattened C-order.
    """
    normal = np.array([np.cos(theta), np.sin(theta)])
    direc = np.array([-np.sin(theta), np.cos(theta)])
    start = 0.5 + offsets[:, None] * normal[None, :]  # (q, 2), ray passes through here
    q = offsets.size
    t_lo = np.full(q, -np.inf)
    t_hi = np.full(q, np.inf)
    crossings = []
    eps = 1e-14
    for k in range(2):
        if abs(direc[k]) < eps:
            outside = (start[:, k] <= 0.0) | (start[:, k] >= 1.0)
            t_lo[outside] = np.inf
            continue
        a = (0.0 - start[:, k]) / direc[k]
        b = (1.0 - start[:, k]) / direc[k]
        t_lo = np.maximum(t_lo, np.minimum(a, b))
        t_hi = np.minimum(t_hi, np.maximum(a, b))
        lines = np.arange(m + 1) / m
        crossings.append((lines[None, :] - start[:, k : k + 1]) / direc[k])
    hit = t_hi > t_lo
    if not np.any(hit):
        return np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0)
    rays = np.nonzero(hit)[0]
    lo = t_lo[rays, None]
    hi = t_hi[rays, None]
    ts = np.concatenate([lo, hi] + [np.clip(c[rays], lo, hi) for c in crossings], axis=1)
    ts.sort(axis=1)
    seg = np.diff(ts, axis=1)
    mid = 0.5 * (ts[:, 1:] + ts[:, :-1])
    px = start[rays, 0:1] + mid * direc[0]
    py = start[rays, 1:2] + mid * direc[1]
    ix = np.clip(np.floor(px * m).astype(np.intp), 0, m - 1)
    iy = np.clip(np.floor(py * m).astype(np.intp), 0, m - 1)
    keep = seg > 1e-15
    ray_idx = np.broadcast_to(rays[:, None], seg.shape)[keep]
    return ray_idx, (ix * m + iy)[keep], seg[keep]


@lru_cache(maxsize=32)
def _system_matrix_2d(angles, q, m):
    offsets = SinogramGeometry(angles, q).detector_offsets()
    rows, cols, vals = [], [], []
    for i, ang in enumerate(angles):
        r, c, v = _trace_angle(np.deg2rad(ang), offsets, m)
        rows.append(r + i * q)
        cols.append(c)
        vals.append(v)
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(len(angles) * q, m * m))
    mat.sum_duplicates()
    return mat


class RadonOperator:
    """Sparse ray-driven projector for a grid/geometry pair.

    Parameters
    ----------
    geometry : SinogramGeometry
    grid : CellGrid
        Square (d=2) or cubic (d=3) grid.
    """

    def __init__(self, geometry: SinogramGeometry, grid: CellGrid):
        if grid.dim not in (2, 3):
            raise InvalidInputError("the Radon transform needs d = 2 or 3")
        if grid.dim == 3 and geometry.n_slices != grid.m:
            raise InvalidInputError(
                f"3-D geometry has {geometry.n_slices} slices, grid has m = {grid.m}")
        if grid.dim == 2 and geometry.n_slices:
            raise InvalidInputError("2-D grid given a sliced (3-D) geometry")
        self.geometry = geometry
        self.grid = grid
        base = _system_matrix_2d(geometry.angles, geometry.q, grid.m) * geometry.scale
        if grid.dim == 3:
            # image index (x1, x2, x3) -> x3 fastest; sinogram (angle, u, slice)
            base = sp.kron(base, sp.identity(grid.m, format="csr"), format="csr")
        self.matrix = base.tocsr()
        self._matrix_t = self.matrix.T.tocsr()
        self._norm = None

    @property
    def h_y(self):
        return self.geometry.h_y

    @property
    def shape(self):
        return self.matrix.shape

    def forward(self, f):
        f = np.asarray(f, dtype=float).ravel()
        if f.size != self.grid.size:
            raise InvalidInputError(f"image has {f.size} values, operator expects {self.grid.size}")
        return self.matrix @ f

    def adjoint(self, y):
        y = np.asarray(y, dtype=float).ravel()
        if y.size != self.geometry.size:
            raise InvalidInputError(
                f"sinogram has {y.size} values, operator expects {self.geometry.size}")
        return self._matrix_t @ y

    def norm_KtK(self, tol=1e-4):
        if self._norm is None:
            self._norm = power_iteration(self.forward, self.adjoint, self.grid.size, tol=tol)
        return self._norm


class IdentityOperator:
    """``K = Id`` on images; handy for denoising-type problems and tests."""

    def __init__(self, grid: CellGrid, h_y=1.0):
        self.grid = grid
        self.h_y = h_y

    def forward(self, f):
        return np.asarray(f, dtype=float).ravel().copy()

    def adjoint(self, y):
        return np.asarray(y, dtype=float).ravel().copy()

    def norm_KtK(self, tol=1e-4):
        return 1.0


def power_iteration(forward, adjoint, n, tol=1e-4, max_iter=2000, seed=0):
    """Largest eigenvalue of ``K^T K`` via Rayleigh quotients."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = adjoint(forward(x))
        lam_new = float(x @ y)
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        x = y / nrm
        # the Rayleigh quotient converges faster than the iterate; stop well inside tol
        if abs(lam_new - lam) <= 1e-2 * tol * abs(lam_new):
            return lam_new
        lam = lam_new
    return lam


def radon_forward(f: ScalarField, geometry: SinogramGeometry) -> Sinogram:
    if geometry.size == 0:
        raise InvalidInputError("empty geometry")
    op = RadonOperator(geometry, f.grid)
    return Sinogram(geometry, op.forward(f.values))


def radon_adjoint(s: Sinogram, grid: CellGrid) -> ScalarField:
    geom = s.geometry
    if geom.level is not None and 2**geom.level != grid.m:
        raise InvalidInputError(f"sinogram level {geom.level} does not match m = {grid.m}")
    op = RadonOperator(geom, grid)
    return ScalarField(grid, op.adjoint(s.data))


def opnorm_KtK(geometry: SinogramGeometry, grid: CellGrid, tol=1e-4) -> float:
    """``||K^T K||``; multiply by ``h_Y`` for the source-block Lipschitz constant."""
    return RadonOperator(geometry, grid).norm_KtK(tol)


def downsample_sinogram(s: Sinogram) -> Sinogram:
    """One level down: ``g_j <- (g_{2j} + g_{2j+1}) / 4`` per angle.

    The factor 4 combines averaging two detector cells with halving the
    pixel length; the returned geometry has ``q/2`` cells and half the scale.
    For 3-D data neighbouring slices are averaged as well.
    """
    geom = s.geometry
    if geom.q % 2:
        raise InvalidInputError(f"cannot downsample odd detector count q = {geom.q}")
    arr = s.array
    out = (arr[:, 0::2] + arr[:, 1::2]) / 4
    n_slices = 0
    if geom.n_slices:
        if geom.n_slices % 2:
            raise InvalidInputError("cannot downsample odd slice count")
        out = (out[:, :, 0::2] + out[:, :, 1::2]) / 2
        n_slices = geom.n_slices // 2
    new = replace(geom, q=geom.q // 2, scale=geom.scale / 2,
                  level=None if geom.level is None else geom.level - 1, n_slices=n_slices)
    return Sinogram(new, out.ravel())


# ---------------------------------------------------------------------------
# file formats


def _header(geom):
    parts = ["angles=" + ",".join(repr(a) for a in geom.angles), f"q={geom.q}",
             f"level={'' if geom.level is None else geom.level}"]
    if geom.scale != 1.0:
        parts.append(f"scale={geom.scale!r}")
    if geom.n_slices:
        parts.append(f"slices={geom.n_slices}")
    return ";".join(parts)


def _parse_header(line):
    line = line.strip()
    keys = {}
    for part in line.split(";"):
        if "=" not in part:
            raise InvalidInputError(f"malformed sinogram header item {part!r}")
        key, val = part.split("=", 1)
        keys[key.strip()] = val.strip()
    if "angles" not in keys or "q" not in keys:
        raise InvalidInputError("sinogram header needs 'angles' and 'q'")
    try:
        angles = tuple(float(a) for a in re.split(r",\s*", keys["angles"]) if a)
        level = int(keys["level"]) if keys.get("level") else None
        return SinogramGeometry(angles, int(keys["q"]), level=level,
                                scale=float(keys.get("scale", 1.0)),
                                n_slices=int(keys.get("slices", 0)))
    except ValueError as exc:
        raise InvalidInputError(f"malformed sinogram header: {exc}") from exc


def write_sinogram_csv(path, s: Sinogram):
    """Header line then one row of ``q`` (times slices) values per angle."""
    rows = s.data.reshape(s.geometry.p, -1)
    with open(path, "w") as fh:
        fh.write(_header(s.geometry) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_sinogram_csv(path) -> Sinogram:
    with open(path) as fh:
        geom = _parse_header(fh.readline())
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] != geom.p:
        raise InvalidInputError(f"expected {geom.p} sinogram rows, found {data.shape[0]}")
    return Sinogram(geom, data)


def read_raw_sinogram(path, sidecar) -> Sinogram:
    """Import float32 angle-major raw data; ``sidecar`` holds the CSV header line."""
    with open(sidecar) as fh:
        geom = _parse_header(fh.readline())
    data = np.fromfile(path, dtype="<f4").astype(float)
    return Sinogram(geom, data)
