"""Image files, previews and experiment specifications.

Image format: one ASCII header line ``LAGIMG <d> <m> <lo> <hi>`` followed by
``m^d`` little-endian float32 values in C order (axis 0 is ``x_1``).

Experiment specs are INI files; see :class:`ExperimentSpec` for the keys.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import InvalidInputError
from .grid import CellGrid, ScalarField

__all__ = ["write_image", "read_image", "write_png", "ExperimentSpec", "load_spec"]

MAGIC = "LAGIMG"


def write_image(path, fld: ScalarField):
    lo, hi = fld.range_hint
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {fld.grid.dim} {fld.grid.m} {lo!r} {hi!r}\n".encode("ascii"))
        fh.write(fld.values.astype("<f4").tobytes())


def read_image(path, m_t=1) -> ScalarField:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        if len(header) != 5 or header[0] != MAGIC:
            raise InvalidInputError(f"{path}: not a {MAGIC} image")
        try:
            dim, m = int(header[1]), int(header[2])
            lo, hi = float(header[3]), float(header[4])
        except ValueError as exc:
            raise InvalidInputError(f"{path}: malformed header") from exc
        data = np.frombuffer(fh.read(), dtype="<f4")
    grid = CellGrid(dim, m, m_t)
    if data.size != grid.size:
        raise InvalidInputError(f"{path}: expected {grid.size} values, found {data.size}")
    return ScalarField(grid, data.astype(float), (lo, hi))


def write_png(path, img, lo=None, hi=None, stretch=1.0):
    """8-bit preview with ``x_2`` pointing up; ``stretch`` > 1 boosts contrast."""
    from PIL import Image

    img = np.asarray(getattr(img, "image", img), dtype=float)
    if img.ndim != 2:
        img = img[..., img.shape[-1] // 2]
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    span = (hi - lo) / stretch if hi > lo else 1.0
    scaled = np.clip((img - lo) / span, 0.0, 1.0)
    Image.fromarray((255 * scaled.T[::-1]).round().astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# experiment specification


def _floats(text):
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


@dataclass
class ExperimentSpec:
    """Settings of one reconstruction experiment.

    Sections and keys (all optional)::

        [data]    template, target, deform, deform_amplitude, add_square,
                  m, angles, noise, seed, sinogram, ground_truth
        [model]   data, reg, source, lam1, lam2
        [solver]  mode, alpha, max_iter, tol, n_steps, scheme, order,
                  coarsest, gauss_newton, pdhg_tol, pdhg_max_iter
        [sweep]   lam1_base, lam1_scale, lam2
        [baseline] lam, lam_grid
    """

    template: str = "shepp-logan"
    target: str = "shepp-logan"
    deform: str = "swirl"
    deform_amplitude: float = 0.3
    add_square: bool = True
    m: int = 64
    angles: int = 10
    noise: float = 0.05
    seed: int = 0
    sinogram: str = None
    ground_truth: str = None
    data: str = "ssd"
    reg: str = "third-order"
    source: str = "tv"
    lam1: tuple = (0.001, 0.001, 1e-6)
    lam2: float = 0.1
    mode: str = "heuristic"
    alpha: float = 0.4
    max_iter: int = 200
    tol: float = 1e-6
    n_steps: int = 5
    scheme: str = "rk4"
    order: str = "cubic"
    coarsest: int = 32
    gauss_newton: bool = True
    pdhg_tol: float = 1e-6
    pdhg_max_iter: int = 500
    lam1_base: tuple = (0.001, 0.1, 1e-6)
    lam1_scale: tuple = (0.01, 0.1, 1.0, 10.0, 100.0)
    lam2_grid: tuple = (0.02, 0.2, 2.0, 20.0)
    baseline_lam: float = None
    baseline_grid: tuple = (0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)
    source_file: str = field(default=None, repr=False)


_SECTIONS = {
    "data": ("template", "target", "deform", "deform_amplitude", "add_square", "m", "angles",
             "noise", "seed", "sinogram", "ground_truth"),
    "model": ("data", "reg", "source", "lam1", "lam2"),
    "solver": ("mode", "alpha", "max_iter", "tol", "n_steps", "scheme", "order", "coarsest",
               "gauss_newton", "pdhg_tol", "pdhg_max_iter"),
    "sweep": ("lam1_base", "lam1_scale", "lam2"),
    "baseline": ("lam", "lam_grid"),
}
_RENAME = {("sweep", "lam2"): "lam2_grid", ("baseline", "lam"): "baseline_lam",
           ("baseline", "lam_grid"): "baseline_grid"}


def load_spec(path) -> ExperimentSpec:
    """Parse an INI experiment file; unknown keys and bad values are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    types = {f.name: f.type for f in fields(ExperimentSpec)}
    defaults = ExperimentSpec()
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise InvalidInputError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise InvalidInputError(f"{path}: unknown key '{key}' in [{section}]")
            name = _RENAME.get((section, key), key)
            default = getattr(defaults, name)
            try:
                if isinstance(default, bool):
                    val = parser.getboolean(section, key)
                elif isinstance(default, tuple):
                    val = _floats(raw)
                elif isinstance(default, int):
                    val = int(raw)
                elif isinstance(default, float) or types[name] == "float":
                    val = float(raw)
                else:
                    val = raw.strip() or None
            except ValueError as exc:
                raise InvalidInputError(f"{path}: bad value for '{key}' in [{section}]: {raw!r}") from exc
            values[name] = val
    spec = ExperimentSpec(**values, source_file=str(path))
    if len(spec.lam1) != 3 or len(spec.lam1_base) != 3:
        raise InvalidInputError(f"{path}: lam1 and lam1_base need three values")
    if spec.angles < 1 or spec.noise < 0:
        raise InvalidInputError(f"{path}: need angles >= 1 and noise >= 0")
    return spec
