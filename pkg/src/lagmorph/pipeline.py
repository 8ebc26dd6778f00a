"""Coarse-to-fine reconstruction driver."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .functionals import Objective, ObjectiveConfig
from .grid import CellGrid, ScalarField, VelocityField, prolongate, restrict
from .ipalm import GaussNewtonConfig, IpalmConfig, gauss_newton_refine_v, ipalm_solve
from .metrics import metric_ssd, metric_ssim
from .radon import RadonOperator, Sinogram, downsample_sinogram

__all__ = ["Level", "build_pyramid", "Reconstruction", "reconstruct", "write_report",
           "Experiment", "prepare_experiment", "configs_from_spec"]


@dataclass
class Level:
    k: int
    m: int
    T: ScalarField
    g: Sinogram

    @property
    def q(self):
        return self.g.geometry.q


def _log2(m):
    k = int(round(np.log2(m))) if m > 0 else -1
    if m < 1 or 2**k != m:
        raise InvalidInputError(f"grid size {m} is not a power of two")
    return k


def build_pyramid(T: ScalarField, g: Sinogram, finest_m=None, coarsest_m=32):
    """Levels from coarsest to finest; template block-averaged, data downsampled."""
    finest_m = T.grid.m if finest_m is None else finest_m
    if finest_m != T.grid.m:
        raise InvalidInputError(f"template has m = {T.grid.m}, finest level m = {finest_m}")
    lf, lc = _log2(finest_m), _log2(coarsest_m)
    if lc > lf:
        raise InvalidInputError(f"coarsest m = {coarsest_m} exceeds finest m = {finest_m}")
    if g.geometry.level is not None and g.geometry.level != lf:
        raise InvalidInputError(f"sinogram level {g.geometry.level} does not match m = {finest_m}")
    levels = [Level(lf, finest_m, T, g)]
    for k in range(lf - 1, lc - 1, -1):
        prev = levels[-1]
        levels.append(Level(k, 2**k, restrict(prev.T), downsample_sinogram(prev.g)))
    return levels[::-1]


@dataclass
class Reconstruction:
    R: ScalarField
    v: VelocityField
    z: ScalarField
    deformed: ScalarField
    report: dict = field(default_factory=dict)


def _projector(level: Level, factory):
    return factory(level.g.geometry, level.T.grid)


def reconstruct(T: ScalarField, g: Sinogram, cfg_obj: ObjectiveConfig = ObjectiveConfig(),
                cfg_alg: IpalmConfig = IpalmConfig(), coarsest_m=32, ground_truth=None,
                gn_cfg: GaussNewtonConfig = GaussNewtonConfig(), log_dir=None,
                projector=RadonOperator, v0=None, z0=None):
    """Run iPALM on every level, coarse to fine, then optionally refine ``v``.

    Returns
    -------
    Reconstruction
        ``report`` has a ``levels`` list (one dict per level) and a
        ``final`` dict with the objective, optional Gauss-Newton statistics
        and, when ``ground_truth`` is given, SSD and SSIM.
    """
    levels = build_pyramid(T, g, coarsest_m=coarsest_m)
    report = {"levels": [], "final": {}}
    v = z = None
    obj = res = None
    for i, lev in enumerate(levels):
        K = _projector(lev, projector)
        obj = Objective(lev.T, lev.g, K, cfg_obj)
        grid = obj.grid
        if v is None:
            v_init = np.zeros(grid.n_velocity) if v0 is None else np.asarray(v0, float).ravel()
            z_init = np.zeros(grid.size) if z0 is None else np.asarray(z0, float).ravel()
        else:
            v_init = prolongate(v, grid).values
            z_init = prolongate(z, lev.T.grid).values
        alg = cfg_alg
        log_file = None
        if log_dir is not None:
            os.makedirs(log_dir, exist_ok=True)
            log_file = open(os.path.join(log_dir, f"level{lev.k}.log"), "w")
        try:
            J_init, _ = obj.total(v_init, z_init)
            J_zero, _ = obj.total(np.zeros(grid.n_velocity), np.zeros(grid.size))
            res = ipalm_solve(obj, alg, v_init, z_init, log_file=log_file)
        except Exception as exc:
            exc.args = (f"level {lev.k} (m = {lev.m}): {exc}",) + exc.args[1:]
            raise
        finally:
            if log_file is not None:
                log_file.close()
        diags = res.diagnostics
        report["levels"].append({
            "level": lev.k, "m": lev.m, "q": lev.q, "iterations": len(diags),
            "converged": res.converged, "J_init": J_init, "J_zero": J_zero, "J": res.J,
            "data": res.parts["data"], "e1": res.parts["e1"], "e2": res.parts["e2"],
            "max_pcg_residual": max((d["pcg_residual"] for d in diags), default=0.0),
            "tv_warnings": sum(d["tv_warning"] for d in diags),
            "z_rejected": sum(d["z_rejected"] for d in diags),
            "L1_max": max((d["L1"] for d in diags), default=0.0),
            "diagnostics": diags,
        })
        v = VelocityField(grid, res.v)
        z = ScalarField(lev.T.grid, res.z)

    final = report["final"]
    final["J_ipalm"] = res.J
    if cfg_alg.gauss_newton:
        if cfg_obj.data != "ssd":
            final["gauss_newton"] = "skipped (NCC data term)"
        else:
            J_before, _ = obj.total(v.values, z.values)
            v_new, info = gauss_newton_refine_v(obj, v.values, z.values, gn_cfg)
            J_after, _ = obj.total(v_new, z.values)
            final.update(gn_J_before=J_before, gn_J_after=J_after, gn_steps=info["steps"],
                         gn_failed=info["failed"])
            v = VelocityField(v.grid, v_new)
    ev = obj.evaluate(v.values, z.values)
    J, parts = obj.total(v.values, z.values, ev)
    final.update(J=J, data=parts["data"], e1=parts["e1"], e2=parts["e2"])
    R = ScalarField(T.grid, ev.R, T.range_hint)
    deformed = ScalarField(T.grid, ev.R - z.values, T.range_hint)
    if ground_truth is not None:
        final["ssd"] = metric_ssd(R, ground_truth)
        final["ssim"] = metric_ssim(R, ground_truth)
    return Reconstruction(R, v, z, deformed, report)


def write_report(path, report, header=None):
    """Key = value text, one ``[section]`` per level plus ``[final]``."""
    with open(path, "w") as fh:
        if header:
            for line in header:
                fh.write(f"# {line}\n")
        for lev in report["levels"]:
            fh.write(f"[level {lev['level']}]\n")
            for key, val in lev.items():
                if key != "diagnostics":
                    fh.write(f"{key} = {val}\n")
            fh.write("\n")
        fh.write("[final]\n")
        for key, val in report["final"].items():
            fh.write(f"{key} = {val}\n")


# ---------------------------------------------------------------------------
# experiments described by an ExperimentSpec


@dataclass
class Experiment:
    T: ScalarField
    g: Sinogram
    U: ScalarField = None
    noise_sigma: float = 0.0


def _load_image(name, m):
    from .io import read_image
    from .phantoms import PHANTOMS, make_phantom

    if name in PHANTOMS:
        return make_phantom(name, m)
    img = read_image(name)
    if img.grid.m != m:
        raise InvalidInputError(f"{name}: image has m = {img.grid.m}, spec says m = {m}")
    return img


def prepare_experiment(spec, seed=None) -> Experiment:
    """Template, (noisy) sinogram and ground truth for a spec.

    With ``spec.sinogram`` set the data are read from that CSV file and the
    ground truth, if any, from ``spec.ground_truth``. Otherwise the target is
    built from ``spec.target``, warped by ``spec.deform``, optionally given the
    square, projected and corrupted by noise drawn with ``seed``.
    """
    from .phantoms import _raster, _square, add_noise, synth_deform
    from .radon import equispaced_angles, level_geometry, read_sinogram_csv

    seed = spec.seed if seed is None else seed
    T = _load_image(spec.template, spec.m)
    if spec.sinogram:
        g = read_sinogram_csv(spec.sinogram)
        U = _load_image(spec.ground_truth, spec.m) if spec.ground_truth else None
        return Experiment(T, g, U)
    U = _load_image(spec.target, spec.m)
    if spec.deform and spec.deform not in ("none", "zero"):
        U = synth_deform(U, spec.deform, amplitude=spec.deform_amplitude)
    if spec.add_square:
        frac = _raster(spec.m, _square).ravel()
        U = ScalarField(U.grid, np.clip(U.values * (1 - frac) + frac, 0.0, 1.0))
    geom = level_geometry(equispaced_angles(spec.angles), _log2(spec.m))
    clean = Sinogram(geom, RadonOperator(geom, U.grid).forward(U.values))
    g = add_noise(clean, spec.noise, seed)
    sigma = spec.noise * np.linalg.norm(clean.data) / np.sqrt(clean.data.size)
    return Experiment(T, g, U, sigma)


def configs_from_spec(spec, lam1=None, lam2=None):
    """``(ObjectiveConfig, IpalmConfig)`` for a spec, optionally overriding lambdas."""
    obj = ObjectiveConfig(data=spec.data, reg=spec.reg, source=spec.source,
                          lam1=spec.lam1 if lam1 is None else lam1,
                          lam2=spec.lam2 if lam2 is None else lam2,
                          pdhg_tol=spec.pdhg_tol, pdhg_max_iter=spec.pdhg_max_iter,
                          n_steps=spec.n_steps, scheme=spec.scheme, order=spec.order)
    alg = IpalmConfig(mode=spec.mode, alpha=spec.alpha, max_iter=spec.max_iter, tol=spec.tol,
                      gauss_newton=spec.gauss_newton)
    return obj, alg
