"""Synthetic images, smooth deformation presets and measurement noise.

Phantoms are rasterised by averaging an analytic indicator over a fixed
absolute lattice of 1024 samples per axis (``1024 / m`` sub-samples per cell),
so that block-averaging a phantom at ``2m`` reproduces the phantom at ``m``.

Image axis 0 is ``x_1`` and axis 1 is ``x_2``; the Shepp-Logan coordinate
frame ``[-1, 1]^2`` is mapped affinely onto the unit square.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInputError
from .flow import SolverConfig, solution_map
from .grid import CellGrid, ScalarField, VelocityField
from .radon import Sinogram

__all__ = [
    "PHANTOMS",
    "PRESETS",
    "SQUARE_CENTER",
    "SQUARE_SIDE",
    "make_phantom",
    "square_mask",
    "velocity_preset",
    "synth_deform",
    "add_noise",
    "experiment_pair",
]

LATTICE = 1024

# modified Shepp-Logan: intensity, semi-axes a, b, centre x0, y0, angle (deg)
_SHEPP_LOGAN = np.array([
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
])

# the added square sits in the grey matter, clear of all ellipse boundaries
SQUARE_CENTER = (0.70, 0.28)
SQUARE_SIDE = 0.08


def _raster(m, fn, dim=2):
    """Average ``fn(coords)`` over the fixed lattice, returning an ``(m,)*dim`` image."""
    if LATTICE % m and m < LATTICE:
        raise InvalidInputError(f"m = {m} must divide {LATTICE}")
    sub = max(1, LATTICE // m)
    c = (np.arange(m * sub) + 0.5) / (m * sub)
    out = np.empty((m,) * dim)
    if dim == 2:
        # row blocks keep the sample arrays small
        for i in range(m):
            xs = c[i * sub : (i + 1) * sub]
            X, Y = np.meshgrid(xs, c, indexing="ij")
            vals = fn(X, Y)
            out[i] = vals.reshape(sub, m, sub).mean(axis=(0, 2))
        return out
    raise InvalidInputError("phantoms are two-dimensional")


def _shepp_logan(X, Y):
    u = 2.0 * X - 1.0
    w = 2.0 * Y - 1.0
    img = np.zeros_like(X)
    for A, a, b, x0, y0, phi in _SHEPP_LOGAN:
        t = np.deg2rad(phi)
        du, dw = u - x0, w - y0
        xr = du * np.cos(t) + dw * np.sin(t)
        yr = -du * np.sin(t) + dw * np.cos(t)
        img += A * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    return img


def _square(X, Y, center=SQUARE_CENTER, side=SQUARE_SIDE):
    return ((np.abs(X - center[0]) <= side / 2) & (np.abs(Y - center[1]) <= side / 2)).astype(float)


def _disk(X, Y, r=0.3):
    return ((X - 0.5) ** 2 + (Y - 0.5) ** 2 <= r * r).astype(float)


def _gauss_bump(X, Y, s=0.1):
    return np.exp(-((X - 0.5) ** 2 + (Y - 0.5) ** 2) / (2 * s * s))


PHANTOMS = ("shepp-logan", "shepp-logan-square", "gauss-bump", "disk", "square")


def make_phantom(name, m, m_t=1):
    """Rasterise a named phantom on an ``m x m`` grid, values in ``[0, 1]``."""
    if m < 8:
        raise InvalidInputError(f"phantoms need m >= 8, got {m}")
    if name == "shepp-logan":
        img = _raster(m, _shepp_logan)
    elif name == "shepp-logan-square":
        img = _raster(m, lambda X, Y: np.where(_square(X, Y) > 0, 1.0, _shepp_logan(X, Y)))
    elif name == "gauss-bump":
        img = _raster(m, _gauss_bump)
    elif name == "disk":
        img = _raster(m, _disk)
    elif name == "square":
        img = _raster(m, _square)
    else:
        raise InvalidInputError(f"unknown phantom {name!r}; choose from {', '.join(PHANTOMS)}")
    return ScalarField(CellGrid(2, m, m_t), np.clip(img, 0.0, 1.0).ravel())


def square_mask(m, dilate=0):
    """Cells touched by the added square, optionally dilated by ``dilate`` cells."""
    from scipy.ndimage import binary_dilation

    mask = _raster(m, _square) > 0
    if dilate:
        mask = binary_dilation(mask, iterations=dilate)
    return mask


# ---------------------------------------------------------------------------
# deformation presets


def _bump(x, c, s):
    return np.exp(-((x - np.asarray(c)) ** 2).sum(axis=1) / (2 * s * s))


def velocity_preset(name, grid: CellGrid, amplitude=None, **kw):
    """Stationary smooth velocity fields for manufacturing target images.

    ``translate`` is the constant field ``b`` (default ``(0.05, 0)``);
    ``translate-bump`` moves a Gaussian neighbourhood of the centre;
    ``swirl`` rotates the central region; ``bend`` shears horizontally with a
    profile that vanishes at the boundary.
    """
    x = grid.centers()
    if grid.dim != 2:
        raise InvalidInputError("deformation presets are two-dimensional")
    vel = np.zeros((grid.size, 2))
    if name == "zero":
        pass
    elif name == "translate":
        vel[:] = np.asarray(kw.get("b", (0.05, 0.0)), dtype=float)
    elif name == "translate-bump":
        b = np.asarray(kw.get("b", (0.04, 0.03)), dtype=float)
        vel = _bump(x, (0.5, 0.5), kw.get("width", 0.2))[:, None] * b
    elif name == "swirl":
        a = 0.6 if amplitude is None else amplitude
        prof = a * _bump(x, (0.5, 0.5), kw.get("width", 0.2))
        vel[:, 0] = -prof * (x[:, 1] - 0.5)
        vel[:, 1] = prof * (x[:, 0] - 0.5)
    elif name == "bend":
        a = 0.04 if amplitude is None else amplitude
        vel[:, 0] = a * np.sin(np.pi * x[:, 1]) * np.sin(np.pi * x[:, 0]) ** 2
        vel[:, 1] = 0.5 * a * np.sin(2 * np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]) ** 2
    else:
        raise InvalidInputError(f"unknown deformation preset {name!r}; choose from {', '.join(PRESETS)}")
    arr = np.broadcast_to(vel.T.reshape(1, 2, grid.size), (grid.m_t + 1, 2, grid.size))
    return VelocityField(grid, np.ascontiguousarray(arr).ravel())


PRESETS = ("zero", "translate", "translate-bump", "swirl", "bend")


def synth_deform(image: ScalarField, preset="swirl", n_steps=20, order="cubic", **kw):
    """Warp ``image`` by the flow of a preset velocity: ``image(phi(0, x))``."""
    v = preset if isinstance(preset, VelocityField) else velocity_preset(preset, image.grid, **kw)
    zero = ScalarField(image.grid, np.zeros(image.grid.size))
    R, _ = solution_map(image, v, zero, SolverConfig(n_steps, "rk4"), order)
    return ScalarField(image.grid, np.clip(R.values, 0.0, 1.0), image.range_hint)


def add_noise(g: Sinogram, level, seed=0):
    """Add white Gaussian noise with ``sigma = level * |g|_2 / sqrt(M)``."""
    if level < 0:
        raise InvalidInputError("noise level must be non-negative")
    if level == 0:
        return Sinogram(g.geometry, g.data.copy())
    rng = np.random.default_rng(seed)
    sigma = level * np.linalg.norm(g.data) / np.sqrt(g.data.size)
    return Sinogram(g.geometry, g.data + sigma * rng.standard_normal(g.data.size))


def experiment_pair(m, preset="swirl", square=True, **kw):
    """Template Shepp-Logan and its deformed copy, optionally with the square.

    The square is painted after warping, so it is the only structure the
    deformation cannot produce.
    """
    T = make_phantom("shepp-logan", m)
    U = synth_deform(T, preset, **kw)
    if square:
        frac = _raster(m, _square).ravel()
        U = ScalarField(U.grid, np.clip(U.values * (1 - frac) + frac, 0.0, 1.0))
    return T, U
