"""Convergence-study driver.

Runs (problem x scheme x h x tau) grids, measures the max-over-time L2 and
H1-type errors against the nodal interpolation of the exact solution,
computes observed orders, and writes CSV / plot-data / summary artifacts.
"""

from __future__ import annotations

import argparse
import math
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .assembly import assemble_block_system
from .linalg import CflReport, DEFAULT_SOLVE, SolveConfig, check_cfl, \
    estimate_cM, estimate_cinv
from .mesh import Mesh, generate_disk_mesh
from .problems import ProblemError, ProblemSpec, builtin_problem, \
    interpolate_exact, load_problem_config
from .schemes import DEFAULT_NEWTON, NewtonConfig, SchemeError, Trajectory, \
    discretize, integrate

ERROR_FIELDS = ("err_u_L2", "err_p_L2", "err_u_H1", "err_p_H1")
CSV_HEADER = ("problem,scheme,h,tau,err_u_L2,err_p_L2,err_u_H1,err_p_H1,"
              "blow_up,c_M,c_inv,cfl_satisfied")


class NormMatrices(NamedTuple):
    """Matrices for the error norms: unit-coefficient mass and stiffness."""

    M: object
    A1: object
    Mg: object
    Ag1: object


def norm_matrices(mesh: Mesh) -> NormMatrices:
    m, a, blocks = assemble_block_system(mesh, 1.0, 0.0, 1.0, 0.0)
    return NormMatrices(M=m.csr, A1=a.csr, Mg=blocks.M_gamma.csr,
                        Ag1=blocks.A_gamma.csr)


@dataclass
class ErrorRecord:
    """Errors of one (h, tau) run; absent (None) after a blow-up."""

    problem: str
    scheme: str
    h: float
    tau: float
    err_u_L2: float | None = None
    err_p_L2: float | None = None
    err_u_H1: float | None = None
    err_p_H1: float | None = None
    blow_up: bool = False
    cfl: CflReport | None = None
    note: str | None = None

    def error(self, field: str) -> float | None:
        return getattr(self, field)

    def csv_row(self) -> str:
        def num(x):
            return "" if x is None else f"{x:.17g}"

        c_m = num(self.cfl.c_M if self.cfl else None)
        c_inv = num(self.cfl.c_inv if self.cfl else None)
        sat = "" if self.cfl is None else str(int(self.cfl.satisfied))
        return (f"{self.problem},{self.scheme},{self.h:.17g},{self.tau:.17g},"
                f"{num(self.err_u_L2)},{num(self.err_p_L2)},"
                f"{num(self.err_u_H1)},{num(self.err_p_H1)},"
                f"{int(self.blow_up)},{c_m},{c_inv},{sat}")


def compute_errors(traj: Trajectory, spec: ProblemSpec, mesh: Mesh,
                   norms: NormMatrices | None = None,
                   cfl: CflReport | None = None) -> ErrorRecord:
    """Max over all time levels (n = 0 included) of the interpolation-relative
    errors, in the mass norm and the mass-plus-stiffness (H1-type) norm."""
    if spec.exact is None:
        raise ProblemError(f"problem {spec.name!r} has no exact solution")
    rec = ErrorRecord(problem=spec.name, scheme=traj.scheme, h=mesh.h,
                      tau=traj.tau, blow_up=traj.blow_up, cfl=cfl)
    if traj.blow_up:
        return rec
    if norms is None:
        norms = norm_matrices(mesh)
    n1 = mesh.n_interior
    eu2 = ep2 = euh = eph = 0.0
    for state in traj.states:
        e = state.u - interpolate_exact(spec, mesh, state.t)
        me = float(e @ (norms.M @ e))
        ae = float(e @ (norms.A1 @ e))
        ep = e[n1:]
        mp = float(ep @ (norms.Mg @ ep))
        ap = float(ep @ (norms.Ag1 @ ep))
        eu2 = max(eu2, me)
        euh = max(euh, me + ae)
        ep2 = max(ep2, mp)
        eph = max(eph, mp + ap)
    rec.err_u_L2 = math.sqrt(eu2)
    rec.err_u_H1 = math.sqrt(euh)
    rec.err_p_L2 = math.sqrt(ep2)
    rec.err_p_H1 = math.sqrt(eph)
    return rec


# -- EOC tables ------------------------------------------------------------

@dataclass(frozen=True)
class EocRow:
    h: float
    tau: float
    error: float | None
    eoc: float | None


@dataclass
class EocTable:
    field_name: str
    rows: list[EocRow]

    def eocs(self) -> list[float]:
        return [r.eoc for r in self.rows if r.eoc is not None]

    def median_eoc(self) -> float | None:
        vals = self.eocs()
        return statistics.median(vals) if vals else None

    def to_text(self) -> str:
        lines = [f"{'h':>12} {'tau':>12} {self.field_name:>14} {'eoc':>8}"]
        for r in self.rows:
            err = f"{r.error:.6e}" if r.error is not None else "   blow-up"
            eoc = f"{r.eoc:8.3f}" if r.eoc is not None else "       -"
            lines.append(f"{r.h:12.6g} {r.tau:12.6g} {err:>14} {eoc}")
        med = self.median_eoc()
        lines.append(f"median EOC: {med:.3f}" if med is not None
                     else "median EOC: undefined")
        return "\n".join(lines)


def eoc_table(records: Sequence[ErrorRecord], field: str) -> EocTable:
    """Observed orders along one refinement path (records in run order).

    eoc_k = log(e_k / e_{k+1}) / log(tau_k / tau_{k+1}) for consecutive
    non-blow-up rows with distinct tau.
    """
    rows: list[EocRow] = []
    prev: ErrorRecord | None = None
    for rec in records:
        err = rec.error(field)
        eoc = None
        if (prev is not None and err is not None and prev.error(field) is not None
                and prev.tau != rec.tau and err > 0.0):
            eoc = (math.log(prev.error(field) / err)
                   / math.log(prev.tau / rec.tau))
        rows.append(EocRow(h=rec.h, tau=rec.tau, error=err, eoc=eoc))
        prev = rec
    return EocTable(field_name=field, rows=rows)


# -- plateau detection -----------------------------------------------------

@dataclass(frozen=True)
class PlateauReport:
    status: str            # "plateau" or "inconclusive"
    value: float           # error at the smallest tau
    floor: float           # reference error (monolithic Euler at its smallest tau)
    ratio: float


def detect_plateau(records: Sequence[ErrorRecord], floor: ErrorRecord,
                   field: str = "err_u_L2",
                   window: float = 0.1) -> PlateauReport:
    """Plateau of a tau-sweep at fixed h against the splitting-free floor.

    The sweep has reached its plateau when the errors at the two smallest
    tau agree within ``window`` relative; otherwise the report is marked
    inconclusive (the ratio is still based on the smallest-tau error).
    """
    usable = [r for r in records if r.error(field) is not None]
    if len(usable) < 4:
        raise ValueError("plateau detection needs at least 4 usable tau points")
    usable.sort(key=lambda r: -r.tau)
    e_prev, e_last = usable[-2].error(field), usable[-1].error(field)
    floor_val = floor.error(field)
    if floor_val is None or floor_val <= 0.0:
        raise ValueError("floor record has no usable error")
    status = "plateau" if abs(e_last - e_prev) <= window * e_prev else \
        "inconclusive"
    return PlateauReport(status=status, value=e_last, floor=floor_val,
                         ratio=e_last / floor_val)


# -- grid driver -----------------------------------------------------------

def coupled_tau(h: float) -> float:
    """The coupled step-size rule tau = 1/ceil(1/h)."""
    return 1.0 / math.ceil(1.0 / h)


def estimate_constants(mesh: Mesh, spec: ProblemSpec, tol: float = 1e-8):
    """(c_M, c_inv) for the mesh, from alpha-free matrices."""
    _, _, blocks = assemble_block_system(mesh, spec.kappa, 0.0, spec.beta, 0.0)
    return estimate_cM(mesh, blocks, tol=tol), estimate_cinv(mesh, blocks,
                                                             tol=tol)


def run_convergence(spec: ProblemSpec, scheme: str, h_list: Sequence[float],
                    tau_rule, out_dir=None, *,
                    newton: NewtonConfig = DEFAULT_NEWTON,
                    solve_cfg: SolveConfig = DEFAULT_SOLVE,
                    trace: bool = False, cfl_report: bool = False,
                    meshes: dict | None = None) -> list[ErrorRecord]:
    """Run the (h, tau) grid for one problem and scheme.

    ``tau_rule`` is either the string "coupled" (tau = 1/ceil(1/h)) or an
    explicit tau list applied to every h.  Failures of individual runs are
    recorded in-row; the remaining grid points still execute.  Grid order is
    deterministic: h descending, tau descending.
    """
    records: list[ErrorRecord] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for target_h in sorted(set(h_list), reverse=True):
        mesh = (meshes or {}).get(target_h) or generate_disk_mesh(target_h)
        if meshes is not None:
            meshes[target_h] = mesh
        norms = norm_matrices(mesh)
        system = discretize(mesh, spec, solve_cfg)
        c_m, c_inv = estimate_constants(mesh, spec)
        taus = ([coupled_tau(mesh.h)] if tau_rule == "coupled"
                else sorted(set(float(t) for t in tau_rule), reverse=True))
        for tau in taus:
            cfl = check_cfl(tau, mesh.h, c_m, c_inv, h_gamma=mesh.h_gamma)
            try:
                traj = integrate(spec, mesh, scheme, tau, newton=newton,
                                 solve_cfg=solve_cfg, system=system)
                rec = compute_errors(traj, spec, mesh, norms, cfl=cfl)
                if out is not None and trace:
                    _write_trace(out, spec.name, scheme, mesh, traj, norms)
            except (SchemeError, ValueError, ProblemError) as e:
                rec = ErrorRecord(problem=spec.name, scheme=scheme, h=mesh.h,
                                  tau=tau, cfl=cfl, note=str(e))
            records.append(rec)

    if out is not None:
        write_errors_csv(out / "errors.csv", records)
        write_plot_data(out, records)
        (out / "summary.txt").write_text(
            summary_text(records, coupled=(tau_rule == "coupled")))
        if cfl_report:
            rows = [r.cfl.csv_row() for r in records if r.cfl is not None]
            (out / "cfl.csv").write_text(
                "\n".join([CflReport.CSV_HEADER] + rows) + "\n")
    return records


def _write_trace(out: Path, problem: str, scheme: str, mesh: Mesh,
                 traj: Trajectory, norms: NormMatrices) -> None:
    name = f"trace_{problem}_{scheme}_h{mesh.h:.4g}_tau{traj.tau:.6g}.csv"
    lines = ["n,t,norm_u_M,norm_p_Mgamma,newton_iters"]
    for n, state in enumerate(traj.states):
        u = state.u
        nu = math.sqrt(max(float(u @ (norms.M @ u)), 0.0))
        npg = math.sqrt(max(float(state.p @ (norms.Mg @ state.p)), 0.0))
        iters = traj.per_step_newton[n - 1] if 1 <= n <= len(
            traj.per_step_newton) else 0
        lines.append(f"{n},{state.t:.17g},{nu:.17g},{npg:.17g},{iters}")
    (out / name).write_text("\n".join(lines) + "\n")


# -- artifacts -------------------------------------------------------------

def write_errors_csv(path, records: Sequence[ErrorRecord]) -> None:
    rows = [CSV_HEADER] + [r.csv_row() for r in records]
    Path(path).write_text("\n".join(rows) + "\n")


def read_errors_csv(path) -> list[dict]:
    """Parse an emitted errors.csv back into field dictionaries."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected CSV header")
    keys = CSV_HEADER.split(",")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != len(keys):
            raise ValueError(f"{path}: malformed row {line!r}")
        row: dict = {}
        for key, val in zip(keys, parts):
            if key in ("problem", "scheme"):
                row[key] = val
            elif key in ("blow_up", "cfl_satisfied"):
                row[key] = None if val == "" else bool(int(val))
            else:
                row[key] = None if val == "" else float(val)
        out.append(row)
    return out


def write_plot_data(out_dir, records: Sequence[ErrorRecord]) -> None:
    """Two-column `tau error` blocks per h, one file per (problem, scheme,
    norm); directly consumable by log-log plotting tools."""
    out = Path(out_dir)
    by_ps: dict = {}
    for r in records:
        by_ps.setdefault((r.problem, r.scheme), []).append(r)
    for (problem, scheme), recs in by_ps.items():
        for field in ERROR_FIELDS:
            blocks = []
            for h in sorted({r.h for r in recs}, reverse=True):
                lines = [f"# h = {h:.17g}"]
                for r in sorted((x for x in recs if x.h == h),
                                key=lambda x: -x.tau):
                    if r.error(field) is not None:
                        lines.append(f"{r.tau:.17g} {r.error(field):.17g}")
                blocks.append("\n".join(lines))
            path = out / f"plot_{problem}_{scheme}_{field}.dat"
            path.write_text("\n\n".join(blocks) + "\n")


def summary_text(records: Sequence[ErrorRecord], coupled: bool) -> str:
    chunks = []
    failed = [r for r in records if r.note]
    blown = [r for r in records if r.blow_up]
    for field in ERROR_FIELDS:
        chunks.append(f"== {field} ==")
        if coupled:
            chunks.append(eoc_table(records, field).to_text())
        else:
            for h in sorted({r.h for r in records}, reverse=True):
                sweep = sorted((r for r in records if r.h == h),
                               key=lambda r: -r.tau)
                chunks.append(f"-- h = {h:.6g} --")
                chunks.append(eoc_table(sweep, field).to_text())
        chunks.append("")
    if blown:
        chunks.append("blow-ups: " + ", ".join(
            f"(h={r.h:.4g}, tau={r.tau:.4g})" for r in blown))
    if failed:
        chunks.append("failed runs:")
        chunks.extend(f"  (h={r.h:.4g}, tau={r.tau:.4g}): {r.note}"
                      for r in failed)
    return "\n".join(chunks) + "\n"


# -- command line ----------------------------------------------------------

def _parse_h(text: str) -> list[float]:
    if text.startswith("auto:"):
        k = int(text.split(":", 1)[1])
        if k < 1:
            raise ValueError("auto:<k> needs k >= 1")
        return [0.25 / math.sqrt(2.0) ** j for j in range(k)]
    vals = [float(v) for v in text.split(",") if v]
    if not vals:
        raise ValueError("empty h list")
    return vals


def _parse_tau(text: str):
    if text == "coupled":
        return "coupled"
    vals = [float(v) for v in text.split(",") if v]
    if not vals:
        raise ValueError("empty tau list")
    return vals


def _load_problem(name: str) -> ProblemSpec:
    if name.endswith(".json"):
        return load_problem_config(name)
    return builtin_problem(name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynbc",
        description="Convergence studies for bulk-surface splitting schemes")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a (problem, scheme, h, tau) grid")
    run.add_argument("--problem", required=True,
                     help="built-in name or a .json problem config")
    run.add_argument("--scheme", required=True,
                     choices=["euler", "lie", "naive", "strang"])
    run.add_argument("--h", required=True, dest="h_list",
                     help="comma list of target mesh sizes, or auto:<k>")
    run.add_argument("--tau", required=True,
                     help="'coupled' for tau = 1/ceil(1/h), or a comma list")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--trace", action="store_true",
                     help="dump per-step norms for every run")
    run.add_argument("--cfl-report", action="store_true",
                     help="also write cfl.csv with the constants per grid point")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        spec = _load_problem(args.problem)
        h_list = _parse_h(args.h_list)
        tau_rule = _parse_tau(args.tau)
        records = run_convergence(spec, args.scheme, h_list, tau_rule,
                                  out_dir=args.out, trace=args.trace,
                                  cfl_report=args.cfl_report)
    except Exception as e:  # hard error: nothing (or not everything) ran
        print(f"dynbc: error: {e}", file=sys.stderr)
        return 2
    print(summary_text(records, coupled=(tau_rule == "coupled")), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
