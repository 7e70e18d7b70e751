"""Command-line entry points.

Subcommands:

* ``optimize <scenario>``  - run the topology optimization loop
* ``simulate <scenario>``  - one forward run, optionally with a density volume
* ``gradcheck <scenario>`` - adjoint vs. finite-difference comparison
* ``fit-prony <curve>``    - estimate relative moduli from a master curve
* ``surface <volume>``     - extract the 50%-density isosurface

Errors print a single machine-parsable line ``error: <kind>: <message>`` and
exit nonzero (2 for usage problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, io_formats
from .adjoint import finite_difference_check, gradient
from .errors import SorotoptError, UsageError
from .optimizer import (
    AdamState,
    AugLagState,
    BestDesign,
    HistoryRecord,
    OptimizationHistory,
    optimize,
)
from .prony import fit_prony
from .scenario import build_problem, load_scenario, scenario_text

log = logging.getLogger(__name__)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sorotopt",
        description="Shape synthesis of locomotive soft robots by topology "
                    "optimization over a differentiable MLS-MPM simulation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log per-iteration progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run the optimization loop")
    p.add_argument("scenario")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="zero wall-time columns so reruns match byte for byte")
    p.add_argument("--resume", default=None, help="checkpoint file to continue from")

    p = sub.add_parser("simulate", help="single forward simulation")
    p.add_argument("scenario")
    p.add_argument("--design", default=None,
                   help="density volume file sampled onto the design particles")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--snapshot-every", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("gradcheck", help="adjoint vs central finite differences")
    p.add_argument("scenario")
    p.add_argument("--indices", default=None,
                   help="comma-separated design indices (default: 10 strongest)")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--out", default=None,
                   help="directory for the per-particle gradient dump")
    p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("fit-prony", help="fit relative moduli to a master curve")
    p.add_argument("curve")
    p.add_argument("--terms", type=int, required=True)
    p.add_argument("--tau-min", type=float, default=None)
    p.add_argument("--tau-max", type=float, default=None)

    p = sub.add_parser("surface", help="extract a density isosurface")
    p.add_argument("volume")
    p.add_argument("--level", type=float, default=0.5)
    p.add_argument("--out", default=None, help="output mesh path")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except SorotoptError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    return {
        "optimize": _cmd_optimize,
        "simulate": _cmd_simulate,
        "gradcheck": _cmd_gradcheck,
        "fit-prony": _cmd_fit_prony,
        "surface": _cmd_surface,
    }[args.command](args)


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

def _cmd_optimize(args) -> int:
    scenario = load_scenario(args.scenario)
    problem = build_problem(scenario)
    max_iters = args.max_iters if args.max_iters is not None \
        else scenario.opt.max_iterations
    out = Path(args.out)

    design = problem.initial_design()
    adam = problem.initial_adam()
    auglag = problem.initial_auglag()
    history = OptimizationHistory()
    best = None
    start_iteration = 0
    if args.resume:
        ck = io_formats.load_checkpoint(args.resume)
        design = design.with_values(ck["design_values"])
        adam = AdamState(m=ck["adam_m"], v=ck["adam_v"],
                         count=int(ck["adam_count"]),
                         learning_rate=float(ck["adam_lr"]))
        auglag = AugLagState(
            c_max=float(ck["auglag_c_max"]), multiplier=float(ck["auglag_multiplier"]),
            penalty=float(ck["auglag_penalty"]), growth_factor=float(ck["auglag_growth"]),
            growth_every=int(ck["auglag_every"]),
            activation_iteration=int(ck["auglag_activation"]))
        best = BestDesign(values=ck["best_values"],
                          objective=float(ck["best_objective"]),
                          iteration=int(ck["best_iteration"]),
                          feasible=bool(ck.get("best_feasible", False)))
        start_iteration = int(ck["iteration"]) + 1
        for row in ck["history_rows"]:
            history.append(HistoryRecord(
                iteration=int(row[0]), objective=row[1], constraint=row[2],
                xg=row[3:3 + scenario.dim], mass=row[6], gravity=row[7],
                multiplier=row[8], penalty=row[9], seconds=row[10]))

    ckpt_path = out / "checkpoint.npz"
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint_callback(iteration, current_design, result, hist, current_best):
        io_formats.save_checkpoint(ckpt_path, current_design.values, adam,
                                   auglag, iteration, hist, current_best)

    result = optimize(
        problem.engine, design, max_iterations=max_iters, auglag=auglag,
        adam=adam, symmetry=problem.symmetry,
        gravity_ramp=scenario.opt.gravity_ramp,
        start_iteration=start_iteration, history=history, best=best,
        callback=checkpoint_callback)

    final_volume = problem.density_volume(result.design.density)
    best_design = result.design.with_values(result.best_values)
    best_volume = problem.density_volume(best_design.density)
    mesh = io_formats.extract_isosurface(best_volume, 0.5)
    io_formats.export_outputs(
        out, scenario_text(scenario), history=result.history,
        final_volume=final_volume, best_volume=best_volume, mesh=mesh,
        deterministic=args.deterministic,
        extra={"converged": result.converged,
               "best_objective_m": result.best_objective,
               "best_iteration": result.best_iteration,
               "iterations_run": len(result.history)})
    io_formats.save_checkpoint(
        ckpt_path, result.design.values, result.adam, result.auglag,
        len(result.history) - 1, result.history, result.best)
    print(f"optimize: {len(result.history)} iterations, "
          f"best L = {result.best_objective:.6g} m at iteration "
          f"{result.best_iteration}, converged = {result.converged}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    problem = build_problem(scenario)
    if args.design:
        volume = io_formats.load_density_volume(args.design)
        density = np.clip(volume.sample_at(problem.design_positions), 0.0, 1.0)
    else:
        density = problem.initial_design().density
    summary = problem.engine.run_forward(
        density, snapshot_every=args.snapshot_every)
    print(f"simulate: L = {summary.objective:.6g} m over "
          f"{summary.n_steps} steps ({summary.wall_seconds:.1f} s wall), "
          f"clamp activations = {summary.clamp_activations}")
    if args.out:
        from .mpm import PHASE_WALL

        gamma_full = np.zeros(problem.engine.particles.n)
        gamma_full[problem.engine.particles.phase == PHASE_WALL] = 1.0
        gamma_full[problem.engine.design_slots] = density
        io_formats.export_outputs(
            Path(args.out), scenario_text(scenario),
            final_volume=problem.density_volume(density),
            snapshots=summary.snapshots, gamma_by_particle=gamma_full,
            deterministic=args.deterministic,
            extra={"objective_m": summary.objective,
                   "xg_start_m": list(summary.xg_start),
                   "xg_end_m": list(summary.xg_end)})
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _cmd_gradcheck(args) -> int:
    scenario = load_scenario(args.scenario)
    problem = build_problem(scenario)
    design = problem.initial_design()
    result = gradient(problem.engine, design)
    if args.indices:
        indices = np.asarray([int(i) for i in args.indices.split(",")])
    else:
        strongest = np.argsort(-np.abs(result.dphi))
        indices = np.sort(strongest[: args.probes])
    report = finite_difference_check(problem.engine, design, indices,
                                     delta=args.delta)
    print("index  adjoint        finite-diff    rel-error")
    for i, adj, fd, err in zip(report["indices"], report["adjoint"],
                               report["finite_differences"],
                               report["relative_errors"]):
        print(f"{i:5d}  {adj: .6e}  {fd: .6e}  {err:.3e}")
    print(f"clamp activations during run: {report['clamp_activations']}")
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        io_formats.write_gradient_csv(outdir / "gradient.csv", result.dphi)
    worst = float(report["relative_errors"].max()) if len(indices) else 0.0
    print(f"max relative error: {worst:.3e}")
    return 0


# ---------------------------------------------------------------------------
# fit-prony
# ---------------------------------------------------------------------------

def _cmd_fit_prony(args) -> int:
    curve = io_formats.load_master_curve(args.curve)
    tau_max = args.tau_max if args.tau_max is not None else 1.0 / curve.omega[0]
    tau_min = args.tau_min if args.tau_min is not None else 1.0 / curve.omega[-1]
    series, residual = fit_prony(curve, args.terms, (tau_min, tau_max))
    print("# scenario block:")
    print(f"solid.prony.g_inf = {float(series.g_inf)!r}")
    print("solid.prony.g = " + ",".join(repr(float(g)) for g in series.moduli))
    print("solid.prony.tau_s = " + ",".join(repr(float(t)) for t in series.taus))
    print(f"# residual error norm: {residual:.6e}")
    return 0


# ---------------------------------------------------------------------------
# surface
# ---------------------------------------------------------------------------

def _cmd_surface(args) -> int:
    if not 0.0 < args.level < 1.0:
        raise UsageError(f"isosurface level must lie in (0, 1), got {args.level}")
    volume = io_formats.load_density_volume(args.volume)
    mesh = io_formats.extract_isosurface(volume, args.level)
    if mesh.empty:
        print("surface: level not crossed; empty mesh")
        return 0
    kind = "triangles" if mesh.dim == 3 else "segments"
    print(f"surface: {len(mesh.vertices)} vertices, {len(mesh.faces)} {kind}, "
          f"{mesh.n_components} component(s), watertight = {mesh.watertight}")
    if args.out:
        out = Path(args.out)
        if mesh.dim == 3:
            io_formats.write_stl(mesh, out)
        else:
            io_formats.write_polyline_csv(mesh, out)
        print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
