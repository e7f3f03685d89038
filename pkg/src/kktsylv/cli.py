"""Config-driven command line front end.

Usage::

    kktsylv solve --config run.ini --set problem.beta=1e-3 --out results/
    kktsylv sweep --config sweep.ini --workers 4

The config file is INI-style with sections ``[problem]``, ``[solver]``,
``[run]`` and ``[sweep]``; see ``CONFIG_SCHEMA`` for the keys. Exit status
is 0 when every run converged, 2 when one did not, 1 on errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import discretize as dz
from .linalg import write_matrix_market
from .oracle import OracleSizeError, assemble_full, solve_full
from .problem import TimeGrid, build_operator
from .residual import dense_residuals
from .solver import MIN_TOL, SolverConfig, StagnationError, recover_solution, solve

log = logging.getLogger("kktsylv")

CSV_VERSION = "1"
MODES = ("solve", "oracle", "both", "sweep")
EXPORTS = ("none", "factored", "dense")
DENSE_EXPORT_LIMIT = 5_000_000

CONFIG_SCHEMA = {
    "problem": {
        "pde": "heat | convection_diffusion",
        "level": "grid level k, 2**k cells per side",
        "domain": "unit | symmetric (default: unit for heat, symmetric otherwise)",
        "eps": "diffusion coefficient for convection_diffusion",
        "unobserved": "number of unobserved nodes n0 (0 = full observation)",
        "boundary_control": "true | false",
        "desired_state": "constant_rank1 | rank6_modes | zero | from_file",
        "desired_Y1": "MatrixMarket path (from_file)",
        "desired_Y2": "MatrixMarket path (from_file)",
        "T": "final time",
        "n_T": "number of time steps",
        "beta": "control cost",
    },
    "solver": {
        "tol": "stopping tolerance in [1e-8, 1)",
        "max_iters": "iteration cap",
        "truncation": "off | threshold",
        "threshold": "relative singular value cut for truncation",
        "shift_seed": "seed of the spectral estimates",
        "continuation": "auto | latest | residual",
    },
    "run": {
        "mode": "solve | oracle | both | sweep",
        "out": "output directory",
        "workers": "parallel sweep cells",
        "export": "none | factored | dense",
    },
    "sweep": {
        "level": "list of grid levels",
        "n_T": "list of time step counts",
        "beta": "list of control costs",
        "eps": "list of diffusion coefficients",
        "unobserved": "list of unobserved node counts",
        "truncation": "list of off | <threshold>",
    },
}

SWEEP_AXES = ("level", "n_T", "beta", "eps", "unobserved", "truncation")

CONVERGENCE_COLUMNS = ["run", "iteration", "p", "r1", "r2", "rho3", "wall_s"]
REPORT_COLUMNS = [
    "run", "n", "n_T", "beta", "eps", "n0", "truncation", "p", "r", "iterations",
    "time_s", "memory_MB", "converged", "message",
]


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


@dataclass
class ProblemSpec:
    pde: str = "heat"
    level: int = 5
    domain: str | None = None
    eps: float = 0.1
    unobserved: int = 0
    boundary_control: bool = False
    desired_state: str = "constant_rank1"
    desired_Y1: str | None = None
    desired_Y2: str | None = None
    T: float = 1.0
    n_T: int = 100
    beta: float = 1e-4


@dataclass
class SolverSpec:
    tol: float = 1e-4
    max_iters: int = 200
    truncation: str = "off"
    threshold: float = 1e-12
    shift_seed: int = 12345
    continuation: str = "auto"


@dataclass
class RunConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    mode: str = "solve"
    out: str = "results"
    workers: int = 1
    export: str = "factored"
    sweep: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        p, s = self.problem, self.solver
        if self.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {MODES}")
        if p.pde not in ("heat", "convection_diffusion"):
            raise ConfigError("problem.pde must be heat or convection_diffusion")
        if not p.beta > 0:
            raise ConfigError("problem.beta must be positive")
        if p.n_T < 1 or p.level < 1:
            raise ConfigError("problem.n_T and problem.level must be positive")
        if not (MIN_TOL <= s.tol < 1):
            raise ConfigError(
                f"solver.tol={s.tol:g} outside [{MIN_TOL:g}, 1): below {MIN_TOL:g} the residual "
                "norms from the trace identity are no more accurate than sqrt(machine epsilon) "
                "and even the exact discrete solution leaves a residual of about 1e-9"
            )
        if self.export not in EXPORTS:
            raise ConfigError(f"run.export must be one of {EXPORTS}")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.mode == "sweep":
            if not self.sweep:
                raise ConfigError("sweep mode needs at least one axis in [sweep]")
            for k, vals in self.sweep.items():
                if not vals:
                    raise ConfigError(f"sweep axis {k} is empty")
        try:
            self.solver_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(
            tol=s.tol, max_iters=s.max_iters, truncation=s.truncation, threshold=s.threshold,
            shift_seed=s.shift_seed, continuation=s.continuation,
        )


def _coerce(obj, key, raw):
    current = getattr(obj, key)
    types = {f: type(getattr(obj, f)) for f in vars(obj)}
    try:
        if key in ("domain", "desired_Y1", "desired_Y2"):
            return raw if raw.strip() else None
        t = types[key]
        if t is bool:
            return _bool(raw)
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
        return str(raw).strip() if current is None or isinstance(current, str) else raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _parse_axis(name, raw):
    items = [x.strip() for x in str(raw).split(",") if x.strip()]
    try:
        if name in ("level", "n_T", "unobserved"):
            return [int(x) for x in items]
        if name in ("beta", "eps"):
            return [float(x) for x in items]
        if name == "truncation":
            return [x if x == "off" else float(x) for x in items]
    except ValueError as exc:
        raise ConfigError(f"bad value in sweep axis {name}: {raw!r}") from exc
    raise ConfigError(f"unknown sweep axis {name!r}; expected one of {SWEEP_AXES}")


def _apply(cfg: RunConfig, section: str, key: str, raw: str):
    if section in ("problem", "solver"):
        target = getattr(cfg, section)
        if key not in CONFIG_SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(target, key, _coerce(target, key, raw))
    elif section == "run":
        if key not in CONFIG_SCHEMA["run"]:
            raise ConfigError(f"unknown key run.{key}")
        setattr(cfg, key, _coerce(cfg, key, raw))
    elif section == "sweep":
        cfg.sweep[key] = _parse_axis(key, raw)
    else:
        raise ConfigError(f"unknown config section [{section}]")


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
        else:
            hits = [s for s in ("problem", "solver", "run") if key in CONFIG_SCHEMA[s]]
            if len(hits) != 1:
                raise ConfigError(f"ambiguous or unknown key {key!r}; use section.key")
            section = hits[0]
        _apply(cfg, section, key, raw)
    return cfg


# ----------------------------------------------------------------------
def build_problem(p: ProblemSpec):
    domain = p.domain or ("unit" if p.pde == "heat" else "symmetric")
    grid = dz.build_grid(p.level, domain)
    if p.pde == "heat":
        pde = dz.assemble_heat(grid)
    else:
        pde = dz.assemble_convection_diffusion(grid, p.eps)
    if p.unobserved:
        pde = dz.apply_observation_mask(pde, dz.unobserved_nodes(grid, p.unobserved))
    if p.boundary_control:
        pde = dz.restrict_control_to_boundary(pde)
    yhat = dz.make_desired_state(p.desired_state, grid, p.n_T,
                                 path_Y1=p.desired_Y1, path_Y2=p.desired_Y2)
    return build_operator(pde, TimeGrid(p.T, p.n_T), p.beta, yhat)


def _rel_err(a, b):
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a))


def _export(out: Path, prefix: str, factors, kind: str):
    if kind == "none":
        return
    for name, f in factors.items():
        if kind == "dense" or f.left is None:
            if f.dense_size() > DENSE_EXPORT_LIMIT:
                log.warning("skipping dense export of %s: too large", name)
                continue
            write_matrix_market(out / f"{prefix}{name}.mm", f.dense())
        else:
            write_matrix_market(out / f"{prefix}{name}_left.mm", f.left)
            write_matrix_market(out / f"{prefix}{name}_right.mm", f.right)


@dataclass
class _Export:
    left: np.ndarray | None
    right: np.ndarray | None
    full: np.ndarray | None = None

    def dense(self):
        return self.full if self.full is not None else self.left @ self.right

    def dense_size(self):
        if self.full is not None:
            return self.full.size
        return self.left.shape[0] * self.right.shape[1]


def run_cell(cfg: RunConfig, index: int = 0, out: Path | None = None) -> dict:
    """One problem instance in solve/oracle/both mode; never raises."""
    p = cfg.problem
    row = {
        "run": index, "n": "", "n_T": p.n_T, "beta": p.beta,
        "eps": p.eps if p.pde == "convection_diffusion" else "", "n0": p.unobserved,
        "truncation": "off" if cfg.solver.truncation == "off" else cfg.solver.threshold,
        "p": "", "r": "", "iterations": "", "time_s": "", "memory_MB": "",
        "converged": False, "message": "",
    }
    history = []
    try:
        op = build_problem(p)
    except (ValueError, MemoryError, OSError) as exc:
        row["message"] = f"assembly error: {exc}"
        return {"row": row, "history": history, "error": True}
    row["n"] = op.n
    prefix = f"run{index}_" if cfg.mode == "sweep" else ""
    result = {"row": row, "history": history, "error": False}

    sol = None
    if cfg.mode in ("solve", "both", "sweep"):
        try:
            sol = solve(op, cfg.solver_config())
            message = sol.report.message
        except StagnationError as exc:
            sol = exc.result
            message = f"solver stagnation: {exc}"
        except (ValueError, ArithmeticError) as exc:
            row["message"] = f"solver error: {exc}"
            result["error"] = True
            return result
        rep = sol.report
        row.update(p=rep.p, r=rep.rank, iterations=rep.iterations, time_s=round(rep.wall_time, 4),
                   memory_MB=round(rep.memory_mb, 4), converged=rep.converged, message=message)
        history.extend((index, h.iteration, h.p, h.r1, h.r2, h.rho3, round(h.wall, 4))
                       for h in rep.history)
        if out is not None:
            Yf, Lf, Uf = recover_solution(sol.V, sol.Z, op)
            _export(out, prefix + "solution_", {
                "Y": _Export(Yf.left, Yf.right), "L": _Export(Lf.left, Lf.right),
                "U": _Export(Uf.left, Uf.right)}, cfg.export)

    if cfg.mode in ("oracle", "both"):
        t0 = time.perf_counter()
        try:
            Yo, Lo, Uo = solve_full(assemble_full(op), op)
        except OracleSizeError as exc:
            row["message"] = f"oracle guard: {exc}"
            result["error"] = True
            return result
        except ArithmeticError as exc:
            row["message"] = f"oracle error: {exc}"
            result["error"] = True
            return result
        if cfg.mode == "oracle":
            R1, R2 = dense_residuals(op, Yo, Lo)
            row.update(converged=True, message="direct solve", time_s=round(time.perf_counter() - t0, 4),
                       p="", r=int(np.linalg.matrix_rank(np.hstack([Yo, Lo]))))
            history.append((index, 0, "", float(np.linalg.norm(R1)), float(np.linalg.norm(R2)), "", ""))
            if out is not None:
                _export(out, "oracle_", {k: _Export(None, None, v) for k, v in
                                         (("Y", Yo), ("L", Lo), ("U", Uo))}, cfg.export)
        else:
            Yf, Lf, Uf = recover_solution(sol.V, sol.Z, op)
            row["oracle_rel_err"] = max(_rel_err(Yf.dense(), Yo), _rel_err(Lf.dense(), Lo))
    return result


def _sweep_cells(cfg: RunConfig):
    axes = [(k, cfg.sweep[k]) for k in SWEEP_AXES if k in cfg.sweep]
    for combo in itertools.product(*(v for _, v in axes)):
        p = replace(cfg.problem)
        s = replace(cfg.solver)
        for (name, _), value in zip(axes, combo):
            if name == "truncation":
                if value == "off":
                    s.truncation = "off"
                else:
                    s.truncation, s.threshold = "threshold", float(value)
            else:
                setattr(p, name, value)
        yield replace(cfg, problem=p, solver=s)


def _cell_worker(args):
    cfg, index, out = args
    return run_cell(cfg, index, out)


def write_csv(path: Path, columns, rows, kind: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# kktsylv {kind} v{CSV_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r.get(c, "") for c in columns] if isinstance(r, dict) else r)


def execute(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "sweep":
        cells = list(_sweep_cells(cfg))
        jobs = [(c, i, out) for i, c in enumerate(cells)]
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(_cell_worker, jobs))
        else:
            results = [_cell_worker(j) for j in jobs]
    else:
        results = [run_cell(cfg, 0, out)]

    columns = list(REPORT_COLUMNS)
    if cfg.mode == "both":
        columns.insert(columns.index("message"), "oracle_rel_err")
    write_csv(out / "report.csv", columns, [r["row"] for r in results], "report")
    write_csv(out / "convergence.csv", CONVERGENCE_COLUMNS,
              [h for r in results for h in r["history"]], "convergence")
    for r in results:
        row = r["row"]
        log.info("run %s: n=%s p=%s iterations=%s converged=%s %s", row["run"], row["n"],
                 row["p"], row["iterations"], row["converged"], row["message"])
    if cfg.mode != "sweep" and results[0]["error"]:
        print(results[0]["row"]["message"], file=sys.stderr)
        return 1
    return 0 if all(r["row"]["converged"] for r in results) else 2


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kktsylv", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=MODES)
    ap.add_argument("--config", type=Path, help="INI config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config value (section.key=value)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--workers", type=int, help="parallel sweep cells")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        cfg.mode = args.command
        if args.out is not None:
            cfg.out = args.out
        if args.workers is not None:
            cfg.workers = args.workers
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return execute(cfg)
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
