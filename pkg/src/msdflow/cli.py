"""Command-line entry point: config handling, orchestration and file output.

All file formats live here: CSV tables with a JSON sidecar, legacy ASCII
VTK snapshots, and the compressed multiscale basis archive.  Numeric output
uses repr formatting, so identical configurations produce byte-identical
files regardless of the worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, experiments as ex
from .experiments import BudgetExceededError
from .mesh import Mesh
from .msfem import (StaleArchiveError, build_ms_space, load_ms_space,
                    save_ms_space, space_fingerprint)
from .solver import MsDarcySpace, NumericalFailure, SchemeConfig, check_stability

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_BUDGET = 4


class ConfigError(ValueError):
    pass


def parse_fraction(text: str) -> float:
    """Accept '1/8' style literals as well as plain decimals."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"cannot parse number {text!r}") from e


def parse_fraction_list(text: str) -> list[float]:
    return [parse_fraction(tok) for tok in text.split(",") if tok.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="msdflow",
        description="Coupled surface/subsurface flow solver with multiscale "
                    "basis functions in the porous region.")
    p.add_argument("--mode", required=True,
                   choices=["offline", "solve", "table-spatial",
                            "table-resonance", "table-temporal", "snapshot"])
    p.add_argument("--config", help="JSON file with defaults; flags override")
    p.add_argument("--example", type=int, choices=[1, 2, 3], default=1)
    p.add_argument("--eps", type=parse_fraction, default=0.02,
                   help="oscillation period of the permeability")
    p.add_argument("--P", type=float, default=None,
                   help="oscillation amplitude override")
    p.add_argument("--h", type=parse_fraction, default=0.125,
                   help="coarse mesh size, fractions like 1/8 accepted")
    p.add_argument("--h-list", type=parse_fraction_list, default=None,
                   help="comma list of mesh sizes for table modes")
    p.add_argument("--nsplit", type=int, default=None,
                   help="fine subdivisions per coarse cell")
    p.add_argument("--h-fine", type=parse_fraction, default=None,
                   help="fixed fine mesh size; nsplit then varies with h")
    p.add_argument("--dt", type=parse_fraction, default=0.01)
    p.add_argument("--dt-list", type=parse_fraction_list, default=None,
                   help="halving chain of time steps for table-temporal")
    p.add_argument("--T", type=parse_fraction, default=1.0)
    p.add_argument("--scheme", choices=["msfem", "fem"], default="msfem")
    p.add_argument("--eps-over-h", type=float, default=0.32,
                   help="fixed ratio for table-resonance")
    p.add_argument("--ref-h-fluid", type=parse_fraction, default=None)
    p.add_argument("--ref-h-darcy", type=parse_fraction, default=None)
    p.add_argument("--ref-dt", type=parse_fraction, default=None)
    p.add_argument("--dof-budget", type=int, default=4_000_000)
    p.add_argument("--basis", help="multiscale basis archive to load")
    p.add_argument("--build-basis", action="store_true",
                   help="allow computing the basis inline in solve mode")
    p.add_argument("--snap-times", type=parse_fraction_list, default=None,
                   help="comma list of snapshot times (default: final time)")
    p.add_argument("--decay", action="store_true",
                   help="zero forcing and boundary data for t > 0")
    p.add_argument("--monitor", action="store_true",
                   help="log energies every step and report stability")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--workers", type=int, default=1)
    return p


def parse_config(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        raise ConfigError("no arguments given")
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            file_vals = json.load(fh)
        defaults = parser.parse_args(["--mode", args.mode])
        for key, val in file_vals.items():
            attr = key.replace("-", "_")
            if not hasattr(defaults, attr):
                raise ConfigError(f"unknown config key {key!r}")
            # flags explicitly given on the command line win
            if getattr(args, attr) == getattr(defaults, attr):
                if attr in ("h", "dt", "T", "eps", "ref_h_fluid",
                            "ref_h_darcy", "ref_dt"):
                    val = parse_fraction(str(val))
                elif attr in ("h_list", "dt_list", "snap_times"):
                    val = [parse_fraction(str(v)) for v in val]
                setattr(args, attr, val)
    if args.workers < 1:
        raise ConfigError("workers must be at least 1")
    try:
        SchemeConfig(dt=args.dt, T=args.T)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return args


# ---------------------------------------------------------------------------
# output helpers

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict]) -> None:
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in cols])


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_sidecar(path: Path, args: argparse.Namespace, extra: dict) -> None:
    payload = {"version": __version__,
               "config": {k: _jsonable(v) for k, v in vars(args).items()},
               **_jsonable(extra)}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_vtk(path: Path, vertices: np.ndarray, triangles: np.ndarray,
              point_data: dict[str, np.ndarray], title: str) -> None:
    """Legacy ASCII VTK unstructured grid with triangle cells."""
    nv, nt = len(vertices), len(triangles)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for x, y in vertices:
            fh.write(f"{float(x)!r} {float(y)!r} 0.0\n")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("5\n" * nt)
        fh.write(f"POINT_DATA {nv}\n")
        for name, data in point_data.items():
            data = np.asarray(data)
            if data.ndim == 1:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in data:
                    fh.write(f"{float(v)!r}\n")
            else:
                fh.write(f"VECTORS {name} double\n")
                for vx, vy in data:
                    fh.write(f"{float(vx)!r} {float(vy)!r} 0.0\n")


def _fluid_snapshot(path: Path, sol: ex.Solution, t: float) -> None:
    mesh = sol.fluid_mesh
    layout = sol.solver.layout
    u = np.column_stack([sol.state.u[layout.vertex_dofs(0)],
                         sol.state.u[layout.vertex_dofs(1)]])
    data = {"velocity": u}
    if sol.state.p is not None:
        data["pressure"] = sol.state.p
    write_vtk(path, mesh.vertices, mesh.triangles, data, f"fluid t={t!r}")


def _porous_snapshot(path: Path, sol: ex.Solution, t: float) -> None:
    darcy = sol.darcy
    if isinstance(darcy, MsDarcySpace):
        # export the union of fine submeshes so the oscillations stay visible
        verts, tris, vals = [], [], []
        offset = 0
        coeffs = sol.state.phi
        for b in darcy.space.bases:
            fine = b.sub.fine
            verts.append(fine.vertices)
            tris.append(fine.triangles + offset)
            vals.append(coeffs[darcy.mesh.triangles[b.cell]] @ b.eta)
            offset += fine.num_vertices
        write_vtk(path, np.vstack(verts), np.vstack(tris),
                  {"head": np.concatenate(vals)}, f"porous t={t!r}")
    else:
        write_vtk(path, darcy.mesh.vertices, darcy.mesh.triangles,
                  {"head": sol.state.phi}, f"porous t={t!r}")


# ---------------------------------------------------------------------------
# problem and policy plumbing

def make_problem(args, eps: float | None = None) -> ex.StokesDarcyProblem:
    overrides = {}
    if args.P is not None:
        base = ex.define_example(args.example, eps or args.eps)
        overrides["kfield"] = ex.PermeabilityField(
            base.kfield.kind, eps=eps or args.eps, P=args.P)
    if args.T != 1.0:
        overrides["T"] = args.T
    problem = ex.define_example(args.example, eps or args.eps,
                                overrides or None)
    if args.decay:
        problem = ex.decay_variant(problem)
    problem.kfield.check_positive(problem.porous_rect)
    return problem


def nsplit_policy(args) -> tuple[str, float]:
    if args.h_fine is not None:
        return ("fixed_hfine", args.h_fine)
    if args.nsplit is not None:
        return ("fixed_nsplit", args.nsplit)
    raise ConfigError("need --nsplit or --h-fine")


def darcy_scheme(args) -> str:
    return "msfem" if args.scheme == "msfem" else "p1"


def ref_h_darcy_for(args, eps: float) -> float:
    """Reference porous mesh size, tightened so the oscillation is resolved."""
    h = args.ref_h_darcy if args.ref_h_darcy is not None else 1 / 512
    while h > eps / 8 + 1e-12:
        h /= 2
    return h


def make_reference(args, problem: ex.StokesDarcyProblem) -> ex.Solution:
    h_s = args.ref_h_fluid if args.ref_h_fluid is not None else 1 / 256
    h_d = ref_h_darcy_for(args, problem.kfield.eps)
    dt = args.ref_dt if args.ref_dt is not None else args.dt
    return ex.reference_solve(problem, h_s, h_d, dt, dof_budget=args.dof_budget)


def archive_name(problem: ex.StokesDarcyProblem, mesh: Mesh, nsplit: int) -> str:
    fp = space_fingerprint(mesh, problem.kfield.id, nsplit)
    return f"basis_{fp[:12]}.msb"


# ---------------------------------------------------------------------------
# commands

def cmd_offline(args, out: Path) -> int:
    if args.nsplit is None:
        raise ConfigError("offline mode needs --nsplit")
    problem = make_problem(args)
    porous = ex.build_porous_mesh(problem, args.h)
    t0 = time.perf_counter()
    space = build_ms_space(porous, problem.kfield, args.nsplit,
                           workers=args.workers, eps_hint=problem.kfield.eps)
    elapsed = time.perf_counter() - t0
    path = out / archive_name(problem, porous, args.nsplit)
    save_ms_space(path, space, problem.kfield.id)
    ncells = porous.num_triangles
    print(f"wrote {path} ({ncells} cells, {elapsed:.2f}s, "
          f"{elapsed / ncells * 1e3:.1f} ms/cell with {args.workers} workers)")
    write_sidecar(out / "run_offline.json", args,
                  {"archive": path.name, "cells": ncells,
                   "offline_seconds": elapsed})
    return EXIT_OK


def _load_or_build_space(args, problem, porous):
    if args.basis:
        return load_ms_space(args.basis, porous, problem.kfield.id)
    if not args.build_basis:
        raise ConfigError(
            "solve with --scheme msfem needs --basis or --build-basis")
    return build_ms_space(porous, problem.kfield, args.nsplit,
                          workers=args.workers, eps_hint=problem.kfield.eps)


def cmd_solve(args, out: Path, snapshots: bool = False) -> int:
    problem = make_problem(args)
    config = SchemeConfig(dt=args.dt, T=args.T, darcy_space=darcy_scheme(args),
                          stability_monitor=args.monitor or snapshots)
    ms_space = None
    if config.darcy_space == "msfem":
        if args.nsplit is None and not args.basis:
            raise ConfigError("msfem scheme needs --nsplit or --basis")
        porous = ex.build_porous_mesh(problem, args.h)
        ms_space = _load_or_build_space(args, problem, porous)
    snap_times = sorted(args.snap_times or [args.T]) if snapshots else []
    taken = []

    t0 = time.perf_counter()
    sol = ex.solve_coupled(problem, args.h, config, nsplit=args.nsplit,
                           ms_space=ms_space, workers=args.workers)
    elapsed = time.perf_counter() - t0

    extra = {"h": args.h, "final_time": sol.state.t,
             "online_seconds": elapsed,
             "div_residual": sol.solver.div_residual(sol.state.u)}
    log = sol.meta.get("log")
    if config.stability_monitor and log is not None and log.t:
        extra["stability"] = check_stability(log)
        extra["energy"] = {"t": log.t, "u_l2_sq": log.u_l2_sq,
                           "phi_l2_sq": log.phi_l2_sq,
                           "div_residual": log.div_residual}

    if snapshots:
        # rerun snapshots from the retained final state is not possible; for
        # intermediate times, step again with an observer
        if snap_times == [args.T]:
            tag = f"{args.T!r}".replace(".", "p")
            _fluid_snapshot(out / f"snap_fluid_t{tag}.vtk", sol, args.T)
            _porous_snapshot(out / f"snap_porous_t{tag}.vtk", sol, args.T)
            taken = [args.T]
        else:
            solver = sol.solver
            state = solver.init_state()
            pending = list(snap_times)
            for n in range(config.num_steps):
                state = solver.step(state)
                while pending and state.t >= pending[0] - config.dt / 2:
                    t = pending.pop(0)
                    shot = ex.Solution(fluid_mesh=sol.fluid_mesh,
                                       darcy=sol.darcy, state=state,
                                       solver=solver)
                    tag = f"{t!r}".replace(".", "p")
                    _fluid_snapshot(out / f"snap_fluid_t{tag}.vtk", shot, t)
                    _porous_snapshot(out / f"snap_porous_t{tag}.vtk", shot, t)
                    taken.append(t)
        extra["snapshots"] = taken
    write_sidecar(out / ("run_snapshot.json" if snapshots else "run_solve.json"),
                  args, extra)
    print(f"solve finished at t={sol.state.t!r} in {elapsed:.2f}s")
    return EXIT_OK


def cmd_table_spatial(args, out: Path) -> int:
    if not args.h_list:
        raise ConfigError("table-spatial needs --h-list")
    problem = make_problem(args)
    scheme = darcy_scheme(args)
    policy = nsplit_policy(args) if scheme == "msfem" else ("fixed_nsplit", 0)
    t0 = time.perf_counter()
    reference = make_reference(args, problem)
    rows = ex.spatial_study(problem, args.h_list, args.dt, policy, reference,
                            scheme=scheme, workers=args.workers,
                            monitor=args.monitor)
    path = out / "table_spatial.csv"
    write_csv(path, rows)
    write_sidecar(out / "run_table_spatial.json", args, {
        "table": path.name, "seconds": time.perf_counter() - t0,
        "reference": reference.meta})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_table_resonance(args, out: Path) -> int:
    if not args.h_list:
        raise ConfigError("table-resonance needs --h-list")
    if args.nsplit is None:
        raise ConfigError("table-resonance needs --nsplit")
    t0 = time.perf_counter()

    def factory(eps):
        return make_problem(args, eps=eps)

    rows = ex.resonance_study(factory, args.h_list, args.eps_over_h,
                              args.nsplit, args.dt,
                              lambda prob: make_reference(args, prob),
                              workers=args.workers)
    for row in rows:
        row["eps_over_h"] = args.eps_over_h
    path = out / "table_resonance.csv"
    write_csv(path, rows)
    write_sidecar(out / "run_table_resonance.json", args, {
        "table": path.name, "seconds": time.perf_counter() - t0})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_table_temporal(args, out: Path) -> int:
    if not args.dt_list:
        raise ConfigError("table-temporal needs --dt-list")
    scheme = darcy_scheme(args)
    if scheme == "msfem" and args.nsplit is None:
        raise ConfigError("table-temporal with msfem needs --nsplit")
    problem = make_problem(args)
    t0 = time.perf_counter()
    rows = ex.temporal_study(problem, args.h, args.nsplit, args.dt_list,
                             scheme=scheme, workers=args.workers)
    path = out / "table_temporal.csv"
    write_csv(path, rows)
    write_sidecar(out / "run_table_temporal.json", args, {
        "table": path.name, "seconds": time.perf_counter() - t0})
    print(f"wrote {path}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_config(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return e.code if e.code in (0, None) else EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.mode == "offline":
            return cmd_offline(args, out)
        if args.mode == "solve":
            return cmd_solve(args, out)
        if args.mode == "snapshot":
            return cmd_solve(args, out, snapshots=True)
        if args.mode == "table-spatial":
            return cmd_table_spatial(args, out)
        if args.mode == "table-resonance":
            return cmd_table_resonance(args, out)
        if args.mode == "table-temporal":
            return cmd_table_temporal(args, out)
        raise ConfigError(f"unknown mode {args.mode!r}")
    except (ConfigError, StaleArchiveError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BudgetExceededError as e:
        print(f"budget exceeded: {e}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
