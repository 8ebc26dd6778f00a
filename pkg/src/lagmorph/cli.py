"""Command-line driver.

Exit codes: 0 success, 2 invalid input, 3 convergence failure or numerical
blow-up, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import ConvergenceError, InvalidInputError, NumericalBlowupError
from .grid import ScalarField

log = logging.getLogger("lagmorph")

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4
ERROR_STRETCH = 4.0  # contrast boost of error-map previews


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _save(out, name, fld, png=True, **kw):
    from .io import write_image, write_png

    write_image(os.path.join(out, name + ".img"), fld)
    if png:
        write_png(os.path.join(out, name + ".png"), fld, **kw)


def _spec(args):
    from .io import ExperimentSpec, load_spec

    spec = load_spec(args.spec) if args.spec else ExperimentSpec()
    if getattr(args, "level_coarsest", None):
        spec.coarsest = args.level_coarsest
    return spec


def _noise_note(exp, spec):
    return (f"noise: sigma = level * |g|_2 / sqrt(M), level = {spec.noise}, "
            f"sigma = {exp.noise_sigma:.6g}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    from .phantoms import make_phantom, synth_deform

    img = make_phantom(args.name, args.m)
    if args.deform:
        img = synth_deform(img, args.deform, amplitude=args.amplitude)
    _save(_outdir(args.out), args.name, img, lo=0.0, hi=1.0)
    print(os.path.join(args.out, args.name + ".img"))


def cmd_project(args):
    from .io import read_image
    from .phantoms import add_noise
    from .pipeline import _log2
    from .radon import RadonOperator, Sinogram, equispaced_angles, level_geometry, write_sinogram_csv

    img = read_image(args.image)
    geom = level_geometry(equispaced_angles(args.angles), _log2(img.grid.m))
    g = Sinogram(geom, RadonOperator(geom, img.grid).forward(img.values))
    g = add_noise(g, args.noise, args.seed)
    path = os.path.join(_outdir(args.out), "sinogram.csv")
    write_sinogram_csv(path, g)
    print(path)


def cmd_reconstruct(args):
    from .pipeline import configs_from_spec, prepare_experiment, reconstruct, write_report

    spec = _spec(args)
    out = _outdir(args.out)
    exp = prepare_experiment(spec, args.seed)
    cfg_obj, cfg_alg = configs_from_spec(spec)
    rec = reconstruct(exp.T, exp.g, cfg_obj, cfg_alg, coarsest_m=spec.coarsest,
                      ground_truth=exp.U, log_dir=os.path.join(out, "logs"))
    _save(out, "R", rec.R, lo=0.0, hi=1.0)
    _save(out, "deformed", rec.deformed, lo=0.0, hi=1.0)
    _save(out, "z", rec.z)
    if exp.U is not None:
        err = ScalarField(rec.R.grid, np.abs(rec.R.values - exp.U.values), (0.0, 1.0))
        _save(out, "error", err, lo=0.0, hi=1.0, stretch=ERROR_STRETCH)
    header = [f"spec: {spec.source_file or 'defaults'}", f"seed: {spec.seed if args.seed is None else args.seed}",
              _noise_note(exp, spec), f"lam1 = {cfg_obj.lam1}, lam2 = {cfg_obj.lam2}",
              f"error map preview stretched by {ERROR_STRETCH}"]
    write_report(os.path.join(out, "report.txt"), rec.report, header)
    final = rec.report["final"]
    print(f"J = {final['J']:.6g}" + (f"  ssd = {final['ssd']:.6g}  ssim = {final['ssim']:.4f}"
                                       if "ssd" in final else ""))


def _baseline_run(g, K, lam):
    from .baseline import l2tv_baseline

    return l2tv_baseline(g, K, lam, full_output=True)


def cmd_baseline(args):
    from .metrics import metric_ssd, metric_ssim
    from .pipeline import prepare_experiment
    from .radon import RadonOperator

    spec = _spec(args)
    out = _outdir(args.out)
    exp = prepare_experiment(spec, args.seed)
    K = RadonOperator(exp.g.geometry, exp.T.grid)
    lams = [args.lam] if args.lam is not None else (
        [spec.baseline_lam] if spec.baseline_lam is not None else list(spec.baseline_grid))
    if len(lams) > 1 and exp.U is None:
        raise InvalidInputError("grid search over lam needs a ground truth image")
    rows, best = [], None
    for lam in lams:
        res = _baseline_run(exp.g, K, lam)
        ssd = metric_ssd(res.R, exp.U) if exp.U is not None else float("nan")
        ssim = metric_ssim(res.R, exp.U) if exp.U is not None else float("nan")
        rows.append((lam, ssd, ssim, res.converged))
        if best is None or ssd < best[1]:
            best = (lam, ssd, res)
    _save(out, "baseline", best[2].R, lo=0.0, hi=1.0)
    with open(os.path.join(out, "baseline.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lam", "ssd", "ssim", "converged"])
        w.writerows(rows)
    print(f"best lam = {best[0]}  ssd = {best[1]:.6g}")


def cmd_metrics(args):
    from .io import read_image
    from .metrics import metric_ssd, metric_ssim

    a, b = read_image(args.a), read_image(args.b)
    print(f"ssd = {metric_ssd(a, b):.10g}")
    print(f"ssim = {metric_ssim(a, b):.10g}")


def _sweep_job(job):
    from .pipeline import configs_from_spec, prepare_experiment, reconstruct

    spec, seed, s, lam2 = job
    exp = prepare_experiment(spec, seed)
    lam1 = tuple(s * b for b in spec.lam1_base)
    cfg_obj, cfg_alg = configs_from_spec(spec, lam1=lam1, lam2=lam2)
    rec = reconstruct(exp.T, exp.g, cfg_obj, cfg_alg, coarsest_m=spec.coarsest, ground_truth=exp.U)
    f = rec.report["final"]
    return s, lam2, f["ssd"], f["ssim"], f["J"]


def cmd_sweep(args):
    spec = _spec(args)
    if spec.sinogram and not spec.ground_truth:
        raise InvalidInputError("sweep needs a ground truth image")
    out = _outdir(args.out)
    jobs = [(spec, args.seed, s, l2) for s, l2 in itertools.product(spec.lam1_scale, spec.lam2_grid)]
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lam1_scale", "lam2", "ssd", "ssim", "J"])
        w.writerows(rows)
    print(path)


# ---------------------------------------------------------------------------


def build_parser():
    from .phantoms import PHANTOMS, PRESETS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="noise seed (overrides the experiment file)")
    common.add_argument("--log", default=None, help="write log messages to this file")
    common.add_argument("-v", "--verbose", action="store_true")

    with_spec = argparse.ArgumentParser(add_help=False, parents=[common])
    with_spec.add_argument("--spec", default=None, help="experiment INI file")
    with_spec.add_argument("--level-coarsest", type=int, default=None, metavar="M",
                           help="grid size of the coarsest level")

    ap = argparse.ArgumentParser(prog="lagmorph", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="rasterise a builtin phantom")
    p.add_argument("name", choices=PHANTOMS)
    p.add_argument("--m", type=int, default=128)
    p.add_argument("--deform", choices=PRESETS, default=None)
    p.add_argument("--amplitude", type=float, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("project", parents=[common], help="simulate a noisy sinogram")
    p.add_argument("image")
    p.add_argument("--angles", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_project, seed=0)

    p = sub.add_parser("reconstruct", parents=[with_spec], help="run the reconstruction")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("baseline", parents=[with_spec], help="L2-TV comparison reconstruction")
    p.add_argument("--lam", type=float, default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("metrics", parents=[common], help="SSD and SSIM of two images")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sweep", parents=[with_spec], help="lambda grid, CSV table")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        filename=args.log, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, NumericalBlowupError) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
