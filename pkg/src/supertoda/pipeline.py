"""Command-line pipeline: mesh -> spin classes -> spectrum -> solve -> verify.

Every run directory receives a manifest (config hash, mesh hash, spin class,
code version) that pins the run; reports are serialized with sorted keys so
identical configurations produce byte-identical files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__
from .hypmesh import MeshError, SurfaceMesh, build_fuchsian_mesh, load_mesh, \
    mesh_report, save_mesh
from .spinops import DiracSpectrum, ExceptionalRhoError, NontrivialKernelError, \
    SpinError, assemble_dirac, eigendecompose, enumerate_spin_classes
from .saddle import SeedError, SolverConfig, SolverReport, continuation_sweep, \
    mountain_pass_search, newton_refine, verify_solution
from . import variational as vr

__all__ = [
    "ConfigError",
    "RunConfig",
    "read_config",
    "write_report",
    "run_cli",
    "main",
]

logger = logging.getLogger(__name__)

_DOMAIN_ERRORS = (MeshError, SpinError, ExceptionalRhoError,
                  NontrivialKernelError, SeedError, vr.FieldRangeError,
                  FileNotFoundError, OSError, ValueError, RuntimeError)


class ConfigError(ValueError):
    """Configuration file violates the schema."""


@dataclass(frozen=True)
class RunConfig:
    """Validated sweep/solve configuration."""

    mesh_genus: int | None
    mesh_subdivision: int
    mesh_path: str | None
    spin_class: int | str
    rho: object            # float, relative string, or list of floats
    solver: dict
    output_dir: str


_SOLVER_KEYS = {f.name for f in dc_fields(SolverConfig)} - {"rho"}


def read_config(path) -> RunConfig:
    """Strict-schema JSON config; unknown keys are rejected with their path."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    allowed = {"mesh", "spin_class", "rho", "solver", "output_dir"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key at {key}")
    mesh = raw.get("mesh")
    if not isinstance(mesh, dict):
        raise ConfigError("missing or non-object key at mesh")
    genus = subdivision = mesh_path = None
    if "path" in mesh:
        for key in mesh:
            if key != "path":
                raise ConfigError(f"unknown key at mesh.{key}")
        mesh_path = str(mesh["path"])
    else:
        for key in mesh:
            if key not in ("genus", "subdivision"):
                raise ConfigError(f"unknown key at mesh.{key}")
        if "genus" not in mesh:
            raise ConfigError("mesh needs either path or generator parameters")
        genus = int(mesh["genus"])
        subdivision = int(mesh.get("subdivision", 0))
    spin_class = raw.get("spin_class", "scan")
    if not (spin_class == "scan" or isinstance(spin_class, int)):
        raise ConfigError("spin_class must be an integer or 'scan'")
    rho = raw.get("rho")
    if isinstance(rho, dict):
        for key in rho:
            if key not in ("start", "stop", "count", "values"):
                raise ConfigError(f"unknown key at rho.{key}")
        if "values" in rho:
            values = [float(x) for x in rho["values"]]
        else:
            values = list(np.linspace(float(rho["start"]), float(rho["stop"]),
                                      int(rho["count"])))
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError("rho grid must be strictly increasing")
        rho = values
    elif isinstance(rho, list):
        rho = [float(x) for x in rho]
        if any(b <= a for a, b in zip(rho, rho[1:])):
            raise ConfigError("rho grid must be strictly increasing")
    elif rho is not None and not isinstance(rho, (int, float, str)):
        raise ConfigError("rho must be a number, string, grid object or list")
    solver = raw.get("solver", {})
    if not isinstance(solver, dict):
        raise ConfigError("solver must be an object")
    for key in solver:
        if key not in _SOLVER_KEYS:
            raise ConfigError(f"unknown key at solver.{key}")
    output_dir = str(raw.get("output_dir", "."))
    return RunConfig(genus, subdivision or 0, mesh_path, spin_class, rho,
                     dict(solver), output_dir)


_RHO_REL = re.compile(r"^([0-9.eE+-]+)x-lambda([0-9]+)$")


def resolve_rho(rho_spec, spec: DiracSpectrum) -> float:
    """Absolute rho, or '<mult>x-lambda<k>' relative to the spectrum."""
    if isinstance(rho_spec, (int, float)):
        return float(rho_spec)
    m = _RHO_REL.match(str(rho_spec))
    if not m:
        raise ConfigError(f"cannot parse rho specification {rho_spec!r}")
    mult = float(m.group(1))
    k = int(m.group(2))
    pos = spec.eigenvalues[spec.eigenvalues > 0]
    if not (1 <= k <= len(pos)):
        raise ConfigError(f"lambda{k} out of range")
    return mult * float(pos[k - 1])


# -- serialization ---------------------------------------------------------------

def _json_dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report(report: SolverReport, out_dir, state=None, spec=None) -> dict:
    """Write report JSON, iterate-log CSV and (optionally) the field state."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(report.to_dict(), out_dir / "report.json")
    with open(out_dir / "iterates.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "J", "grad_norm"])
        for row in report.iterate_log:
            wr.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
    written = {"report": str(out_dir / "report.json"),
               "iterates": str(out_dir / "iterates.csv")}
    if state is not None and spec is not None:
        vr.save_state(state, spec, out_dir / "state.csv")
        written["state"] = str(out_dir / "state.csv")
    return written


def _write_manifest(out_dir: Path, config_obj, mesh: SurfaceMesh,
                    spin_class, extra=None) -> None:
    blob = json.dumps(config_obj, sort_keys=True).encode()
    manifest = {
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "mesh_hash": mesh.mesh_hash,
        "spin_class": spin_class,
        "code_version": __version__,
    }
    if extra:
        manifest.update(extra)
    _json_dump(manifest, out_dir / "manifest.json")


def _max_workers() -> int:
    env = os.environ.get("TODA_SPIN_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _spectrum_for_class(mesh: SurfaceMesh, class_index: int) -> DiracSpectrum:
    spins = enumerate_spin_classes(mesh)
    matches = [s for s in spins if s.class_index == class_index]
    if not matches:
        raise SpinError(f"no spin class with index {class_index}")
    return eigendecompose(assemble_dirac(mesh, matches[0]))


# -- CLI stages -------------------------------------------------------------------

def _stage_mesh(args) -> int:
    mesh = build_fuchsian_mesh(args.genus, args.subdivision)
    save_mesh(mesh, args.out)
    rep = mesh_report(mesh)
    print(f"wrote {args.out}: V={mesh.vertex_count} F={len(mesh.faces)} "
          f"genus={mesh.genus} defect={rep.max_vertex_defect:.2e} "
          f"area_error={rep.area_error:.2e}")
    return 0


def _stage_spectrum(args) -> int:
    mesh = load_mesh(args.mesh)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spins = enumerate_spin_classes(mesh)
    if args.spin_class != "scan":
        wanted = int(args.spin_class)
        spins = [s for s in spins if s.class_index == wanted]
        if not spins:
            raise SpinError(f"no spin class with index {wanted}")

    def solve(spin):
        return spin.class_index, eigendecompose(assemble_dirac(mesh, spin))

    kernel_table = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=_max_workers()) as ex:
        for class_index, spec in ex.map(solve, spins):
            csv_path = out_dir / f"spectrum_class{class_index}.csv"
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh)
                wr.writerow(["index", "lambda"])
                for i, lam in enumerate(spec.eigenvalues):
                    wr.writerow([i, repr(float(lam))])
            kernel_table[str(class_index)] = {
                "kernel_dim": spec.kernel_dim,
                "min_abs_lambda": float(np.abs(spec.eigenvalues).min()),
            }
            if args.dump_spinors:
                _dump_spinors(spec, out_dir / f"eigenspinors_class{class_index}")
    _json_dump(kernel_table, out_dir / "kernel_dims.json")
    _write_manifest(out_dir, {"mesh": str(args.mesh), "spin_class": args.spin_class},
                    mesh, args.spin_class)
    print(f"wrote {len(kernel_table)} spectra to {out_dir}")
    return 0


def _dump_spinors(spec: DiracSpectrum, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    nv = spec.mesh.vertex_count
    for k in range(spec.dimension):
        mode = spec.modes[:, k].reshape(nv, 4)
        with open(out_dir / f"mode{k}.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["vertex", "re_w", "re_x", "re_y", "re_z"])
            for v in range(nv):
                wr.writerow([v] + [repr(float(x)) for x in mode[v]])


def _solver_config(rho: float, overrides: dict) -> SolverConfig:
    return SolverConfig(rho=rho, **overrides)


def _stage_solve(args) -> int:
    mesh = load_mesh(args.mesh)
    spec = _spectrum_for_class(mesh, int(args.spin_class))
    rho = resolve_rho(args.rho, spec)
    spec = spec.with_rho(rho)
    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.max_steps is not None:
        overrides["max_deform_steps"] = args.max_steps
    if args.path_points is not None:
        overrides["path_points"] = args.path_points
    cfg = _solver_config(rho, overrides)
    state, report = mountain_pass_search(spec, cfg)
    if report.outcome == "converged":
        state, nrep = newton_refine(state, spec, cfg)
        nrep.linking_level_estimate = report.linking_level_estimate
        nrep.iterate_log = report.iterate_log + nrep.iterate_log
        report = nrep
    verdict = verify_solution(state, spec, cfg)
    report.extras["verdict"] = verdict.to_dict()
    report.extras["rho"] = rho
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir, state=state, spec=spec)
    _write_manifest(out_dir, {"mesh": str(args.mesh), "rho": str(args.rho),
                              "spin_class": int(args.spin_class),
                              "solver": overrides},
                    mesh, int(args.spin_class))
    print(f"solve: {report.outcome}, J={report.J_value:.9g}, "
          f"verdict={verdict.verdict!r} -> {out_dir}")
    return 0


def _stage_sweep(args) -> int:
    run = read_config(args.config)
    if run.mesh_path is not None:
        mesh = load_mesh(run.mesh_path)
    else:
        mesh = build_fuchsian_mesh(run.mesh_genus, run.mesh_subdivision)
    if run.spin_class == "scan":
        raise ConfigError("sweep requires a concrete spin_class")
    spec = _spectrum_for_class(mesh, int(run.spin_class))
    rhos = run.rho if isinstance(run.rho, list) else [run.rho]
    grid = [resolve_rho(r, spec) for r in rhos]
    cfg = _solver_config(grid[0], run.solver)
    reports = continuation_sweep(spec, grid, cfg)
    out_dir = Path(run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, rep in enumerate(reports):
        sub = out_dir / f"rho_{i:03d}"
        write_report(rep, sub)
        summary.append({"rho": rep.extras.get("rho"), "outcome": rep.outcome,
                        "J": rep.J_value,
                        "dim_pos_b": rep.extras.get("dim_pos_b")})
    _json_dump(summary, out_dir / "sweep_summary.json")
    _write_manifest(out_dir, {"config": str(args.config)}, mesh, run.spin_class)
    print(f"sweep: {len(reports)} rho points -> {out_dir}")
    return 0


def _stage_verify(args) -> int:
    mesh = load_mesh(args.mesh)
    spec = _spectrum_for_class(mesh, int(args.spin_class))
    with open(vr._sidecar_path(str(args.state)), "r", encoding="utf-8") as fh:
        rho = float(json.load(fh)["rho"])
    spec = spec.with_rho(rho)
    state = vr.load_state(args.state, spec)
    cfg = _solver_config(rho, {})
    verdict = verify_solution(state, spec, cfg)
    out = json.dumps(verdict.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(out + "\n")
    print(out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="supertoda",
                                description="super Toda saddle-point laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    pm = sub.add_parser("mesh", help="generate a hyperbolic surface mesh")
    pm.add_argument("--genus", type=int, required=True)
    pm.add_argument("--subdivision", type=int, default=0)
    pm.add_argument("--out", required=True)
    pm.set_defaults(func=_stage_mesh)

    ps = sub.add_parser("spectrum", help="Dirac spectra over spin classes")
    ps.add_argument("--mesh", required=True)
    ps.add_argument("--spin-class", dest="spin_class", default="scan")
    ps.add_argument("--out", required=True)
    ps.add_argument("--dump-spinors", action="store_true")
    ps.set_defaults(func=_stage_spectrum)

    pv = sub.add_parser("solve", help="mountain-pass search plus refinement")
    pv.add_argument("--mesh", required=True)
    pv.add_argument("--spin-class", dest="spin_class", required=True)
    pv.add_argument("--rho", required=True)
    pv.add_argument("--out", required=True)
    pv.add_argument("--seed", type=int, default=None)
    pv.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    pv.add_argument("--path-points", dest="path_points", type=int, default=None)
    pv.set_defaults(func=_stage_solve)

    pw = sub.add_parser("sweep", help="rho continuation from a config file")
    pw.add_argument("--config", required=True)
    pw.set_defaults(func=_stage_sweep)

    pf = sub.add_parser("verify", help="re-verify a written field state")
    pf.add_argument("--mesh", required=True)
    pf.add_argument("--spin-class", dest="spin_class", required=True)
    pf.add_argument("--state", required=True)
    pf.add_argument("--out", default=None)
    pf.set_defaults(func=_stage_verify)
    return p


def run_cli(argv=None) -> int:
    """Dispatch a CLI invocation; exit codes: 0 ok, 1 domain error, 2 usage."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
