"""Command-line front end.

Every subcommand accepts its options as flags or from a JSON config file
(``--config``); flags win.  The fully resolved configuration is written to
``config.json`` in the output directory, and re-running from that file gives
the same results.  Wall-clock timings are kept in ``*.timing.*`` side files so
that the main outputs are byte-reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import bench
from .errors import (
    ChecksumMismatch,
    FormatVersionMismatch,
    GridMismatch,
    ModelMismatch,
    NewtonDiverged,
    OnlineDiverged,
    OuterNotConverged,
    SingularInterpolation,
    TruthSolveFailed,
    UnknownProblem,
)
from .problem import DirichletProblem, builtin, parameter_set, registry_names
from .rom import OnlineConfig, TrainConfig, load_model, online_solve, save_model, train
from .stencil import Stabilization
from .truth import NewtonConfig, TransportConfig, grid_for, solve_dirichlet, solve_transport

log = logging.getLogger("rbmonge")

EXIT_OK, EXIT_CONFIG, EXIT_OUTER, EXIT_NEWTON, EXIT_SINGULAR, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: Optional[str] = None
    mu: list = field(default_factory=list)  # list of parameter vectors
    grid_n: Optional[list] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    epsilon: float = 1e-8
    K: int = 100
    newton_tol: float = 1e-10
    newton_max: int = 50
    B: object = "auto"
    seed: int = 0
    output_dir: str = "."
    format: str = "csv"
    grids: list = field(default_factory=list)
    nmax: int = 7
    xi: list = field(default_factory=list)
    xi_test: list = field(default_factory=list)
    model: Optional[str] = None
    nrun: int = 50
    offline_time: Optional[float] = None
    online_time: Optional[float] = None
    fdm_time: Optional[float] = None

    def validate(self):
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format: expected csv or json, got {self.format!r}")
        if self.grid_n is not None:
            g = list(self.grid_n)
            if len(g) == 1:
                g = g * 2
            if len(g) != 2 or any(int(k) != k or k < 5 for k in g):
                raise ConfigError(f"grid_n: need one or two integers >= 5, got {self.grid_n!r}")
            self.grid_n = [int(k) for k in g]
        for name in ("epsilon", "newton_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("K", "newton_max", "nmax", "nrun"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if not (self.B == "auto" or (isinstance(self.B, (int, float)) and self.B > 0)):
            raise ConfigError(f"B: must be a positive number or 'auto', got {self.B!r}")
        self.mu = [[float(x) for x in np.atleast_1d(m)] for m in self.mu]
        return self


def _parse_vector(text: str) -> list:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"mu: cannot parse {text!r}") from exc


def _parse_ints(text: str, key: str) -> list:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def load_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    for k in data:
        if k not in known:
            raise ConfigError(f"config: unknown key {k!r}")
    return data


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig keys")
    common.add_argument("--problem", help="registry name: " + ", ".join(registry_names()))
    common.add_argument("--mu", action="append", help="parameter vector, comma separated; repeat for several")
    common.add_argument("--grid", help="points per axis: N or N1,N2")
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--K", type=int)
    common.add_argument("--newton-tol", type=float)
    common.add_argument("--newton-max", type=int)
    common.add_argument("--B", help="boundary scale for the first Neumann data, or 'auto'")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", "-o")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rbmonge", description="Monge-Ampere transport solver and R2-ROC reduced models")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="truth solve of a transport problem")
    sub.add_parser("dirichlet", parents=[common], help="truth solve of a Dirichlet problem")
    c = sub.add_parser("convergence", parents=[common], help="error and order table over grids")
    c.add_argument("--grids", help="comma separated grid sizes")
    t = sub.add_parser("train", parents=[common], help="offline greedy training")
    t.add_argument("--nmax", type=int)
    t.add_argument("--xi", action="append", help="training range a:step:b, one per parameter dimension")
    t.add_argument("--model", help="output model path")
    o = sub.add_parser("online", parents=[common], help="online reduced solves")
    o.add_argument("--model", required=False)
    s = sub.add_parser("sweep", parents=[common], help="E(n) over a test set")
    s.add_argument("--model")
    s.add_argument("--xi-test", action="append", help="test range a:step:b, one per parameter dimension")
    b = sub.add_parser("bench", parents=[common], help="cumulative run time and break-even count")
    b.add_argument("--model")
    b.add_argument("--nrun", type=int)
    b.add_argument("--offline-time", type=float)
    b.add_argument("--online-time", type=float)
    b.add_argument("--fdm-time", type=float)
    return p


def resolve(args) -> RunConfig:
    data = load_config(args.config) if args.config else {}
    flags = {
        "problem": args.problem,
        "alpha": args.alpha,
        "beta": args.beta,
        "epsilon": args.epsilon,
        "K": args.K,
        "newton_tol": args.newton_tol,
        "newton_max": args.newton_max,
        "seed": args.seed,
        "output_dir": args.output_dir,
        "format": args.format,
    }
    if args.mu is not None:
        flags["mu"] = [_parse_vector(m) for m in args.mu]
    if args.grid is not None:
        flags["grid_n"] = _parse_ints(args.grid, "grid")
    if args.B is not None:
        flags["B"] = args.B if args.B == "auto" else _float(args.B, "B")
    for name in ("nmax", "model", "nrun", "offline_time", "online_time", "fdm_time"):
        if hasattr(args, name):
            flags[name] = getattr(args, name)
    if getattr(args, "grids", None) is not None:
        flags["grids"] = _parse_ints(args.grids, "grids")
    if getattr(args, "xi", None) is not None:
        flags["xi"] = list(args.xi)
    if getattr(args, "xi_test", None) is not None:
        flags["xi_test"] = list(args.xi_test)
    data.update({k: v for k, v in flags.items() if v is not None})
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from exc
    return cfg.validate()


def _float(text, key):
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _problem(cfg: RunConfig, kind: Optional[str] = None):
    if cfg.problem is None:
        raise ConfigError("problem: required")
    try:
        prob = builtin(cfg.problem)
    except UnknownProblem as exc:
        raise ConfigError(f"problem: {exc}") from exc
    if kind == "transport" and isinstance(prob, DirichletProblem):
        raise ConfigError(f"problem: {cfg.problem} is a Dirichlet problem; use the dirichlet subcommand")
    if kind == "dirichlet" and not isinstance(prob, DirichletProblem):
        raise ConfigError(f"problem: {cfg.problem} is a transport problem; use the solve subcommand")
    if cfg.alpha is not None or cfg.beta is not None:
        a = prob.stab.alpha if cfg.alpha is None else cfg.alpha
        b = prob.stab.beta if cfg.beta is None else cfg.beta
        prob = prob.with_stab(Stabilization(a, b))
    cfg.alpha, cfg.beta = prob.stab.alpha, prob.stab.beta
    return prob


def _single_mu(cfg: RunConfig, prob) -> np.ndarray:
    if len(cfg.mu) > 1:
        raise ConfigError("mu: this subcommand takes a single parameter vector")
    mu = np.asarray(cfg.mu[0] if cfg.mu else [], dtype=float)
    if mu.size != prob.param_dim:
        raise ConfigError(f"mu: problem {prob.name} expects {prob.param_dim} value(s), got {mu.size}")
    cfg.mu = [mu.tolist()]
    return mu


def _grid(cfg: RunConfig, prob, default: int = 31):
    if cfg.grid_n is None:
        cfg.grid_n = [default, default]
    return grid_for(prob, tuple(cfg.grid_n))


def _configs(cfg: RunConfig):
    return (
        TransportConfig(cfg.epsilon, cfg.K, cfg.B),
        NewtonConfig(cfg.newton_tol, cfg.newton_max),
    )


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path):
    bench.write_json(out / "config.json", asdict(cfg))


def _write_table(cfg: RunConfig, out: Path, name: str, rows, columns, timing_columns=(), key=None):
    if cfg.format == "json":
        bench.write_json(out / f"{name}.json", [{c: r.get(c) for c in columns} for r in rows])
        if timing_columns:
            cols = ([key] if key else []) + list(timing_columns)
            bench.write_json(out / f"{name}.timing.json", [{c: r.get(c) for c in cols} for r in rows])
    else:
        bench.write_csv(out / f"{name}.csv", rows, columns, timing_columns, key)


def _solution_rows(grid, u):
    i, j = grid.index_arrays
    grad = bench.discrete_gradient(u, grid)
    pts = grid.points
    return [
        {"theta1": int(i[k]) + 1, "theta2": int(j[k]) + 1, "x1": pts[k, 0], "x2": pts[k, 1],
         "u": u[k], "du1": grad[k, 0], "du2": grad[k, 1]}
        for k in range(grid.size)
    ]


SOLUTION_COLUMNS = ("theta1", "theta2", "x1", "x2", "u", "du1", "du2")


def _mu_columns(dim: int) -> list:
    return [f"mu{k + 1}" for k in range(dim)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_solve(cfg: RunConfig) -> int:
    prob = _problem(cfg, "transport")
    mu = _single_mu(cfg, prob)
    grid = _grid(cfg, prob)
    tcfg, ncfg = _configs(cfg)
    out = _outdir(cfg)
    _write_config(cfg, out)
    code = EXIT_OK
    t0 = time.perf_counter()
    try:
        sol = solve_transport(prob, mu, grid, tcfg, ncfg)
    except OuterNotConverged as exc:
        sol, code = exc.result, EXIT_OUTER
    wall = time.perf_counter() - t0
    u = sol.u.values
    _write_table(cfg, out, "solution", _solution_rows(grid, u), SOLUTION_COLUMNS)
    report = {
        "problem": prob.name,
        "mu": mu,
        "grid_n": cfg.grid_n,
        "sigma": sol.sigma,
        "outer_iters": sol.outer_iters,
        "newton_iters_per_outer": sol.newton_iters_per_outer,
        "residual_history": sol.residual_history,
        "outer_history": sol.outer_history,
        "converged": sol.converged,
    }
    if prob.exact_map is not None:
        report["max_error"] = float(np.max(np.abs(bench.discrete_gradient(u, grid) - prob.exact_map(grid.points, mu))))
    bench.write_json(out / "report.json", report)
    bench.write_json(out / "report.timing.json", {"wall_time": wall})
    print(f"{prob.name}: sigma={sol.sigma:.17g} outer_iters={sol.outer_iters}" + (f" max_error={report['max_error']:.3e}" if "max_error" in report else ""))
    return code


def cmd_dirichlet(cfg: RunConfig) -> int:
    prob = _problem(cfg, "dirichlet")
    mu = _single_mu(cfg, prob)
    grid = _grid(cfg, prob)
    _, ncfg = _configs(cfg)
    out = _outdir(cfg)
    _write_config(cfg, out)
    t0 = time.perf_counter()
    sol = solve_dirichlet(prob, mu, grid, ncfg)
    wall = time.perf_counter() - t0
    u = sol.u.values
    _write_table(cfg, out, "solution", _solution_rows(grid, u), SOLUTION_COLUMNS)
    report = {"problem": prob.name, "mu": mu, "grid_n": cfg.grid_n, "newton_iters": sol.newton_iters_per_outer, "residual_history": sol.residual_history}
    if prob.exact_solution is not None:
        report["max_error"] = float(np.max(np.abs(u - prob.exact_solution(grid.points, mu))))
    bench.write_json(out / "report.json", report)
    bench.write_json(out / "report.timing.json", {"wall_time": wall})
    print(f"{prob.name}: newton_iters={sol.newton_iters_per_outer}" + (f" max_error={report['max_error']:.3e}" if "max_error" in report else ""))
    return EXIT_OK


def cmd_convergence(cfg: RunConfig) -> int:
    prob = _problem(cfg)
    mu = _single_mu(cfg, prob)
    if not cfg.grids:
        raise ConfigError("grids: required, e.g. --grids 15,31,65")
    tcfg, ncfg = _configs(cfg)
    out = _outdir(cfg)
    _write_config(cfg, out)
    rows = bench.convergence_study(prob, mu, cfg.grids, tcfg, ncfg)
    _write_table(cfg, out, "convergence", [asdict(r) for r in rows], bench.CONVERGENCE_COLUMNS + ("status",), ("wall_time",), "grid_n")
    for r in rows:
        order = "" if r.order is None else f"{r.order:.2f}"
        print(f"{r.grid_n:5d} {r.max_error:.3e} {order:>6} {r.outer_iters:4d} {r.status}")
    return EXIT_OK


def _transport_for_model(cfg: RunConfig, model):
    if cfg.problem is not None and cfg.problem != model.problem_name:
        raise ModelMismatch(f"model trained for {model.problem_name!r}, --problem is {cfg.problem!r}")
    if cfg.grid_n is not None and tuple(cfg.grid_n) != model.grid.n_per_dim:
        raise ModelMismatch(f"model grid is {model.grid.n_per_dim}, config asks for {tuple(cfg.grid_n)}")
    cfg.problem = model.problem_name
    cfg.grid_n = list(model.grid.n_per_dim)
    prob = builtin(model.problem_name).with_stab(model.stab)
    cfg.alpha, cfg.beta = model.stab.alpha, model.stab.beta
    return prob


def _load(cfg: RunConfig, restricted_only: bool):
    if not cfg.model:
        raise ConfigError("model: required")
    try:
        return load_model(cfg.model, restricted_only=restricted_only)
    except OSError as exc:
        raise ConfigError(f"model: cannot read {cfg.model}: {exc}") from exc


def cmd_train(cfg: RunConfig) -> int:
    prob = _problem(cfg, "transport")
    grid = _grid(cfg, prob, default=63)
    if not cfg.xi:
        cfg.xi = list(prob.xi_train)
    if len(cfg.xi) != prob.param_dim:
        raise ConfigError(f"xi: problem {prob.name} needs {prob.param_dim} range(s), got {len(cfg.xi)}")
    try:
        xi = parameter_set(cfg.xi)
    except ValueError as exc:
        raise ConfigError(f"xi: {exc}") from exc
    out = _outdir(cfg)
    if cfg.model is None:
        cfg.model = str(out / f"{prob.name}.model")
    tcfg, ncfg = _configs(cfg)
    train_cfg = TrainConfig(cfg.nmax, xi, cfg.epsilon, cfg.K, cfg.seed, cfg.B, tcfg, ncfg)
    _write_config(cfg, out)
    model = train(prob, grid, train_cfg, progress=lambda h: log.info("round %d: mu=%s indicator=%.3e", h["round"], h["selected_mu"], h["indicator_max"]))
    save_model(model, cfg.model)
    rows = [dict(h) for h in model.history]
    _write_table(cfg, out, "history", rows, ("round", "selected_mu", "indicator_max"), ("truth_time", "sweep_time"), "round")
    print(f"trained {prob.name}: n={model.n} m={model.m} -> {cfg.model}")
    return EXIT_OK


def cmd_online(cfg: RunConfig) -> int:
    model = _load(cfg, restricted_only=True)
    prob = _transport_for_model(cfg, model)
    for m in cfg.mu:
        if len(m) != prob.param_dim:
            raise ModelMismatch(f"mu {m} has {len(m)} entries, problem {prob.name} expects {prob.param_dim}")
    out = _outdir(cfg)
    _write_config(cfg, out)
    ocfg = OnlineConfig(cfg.epsilon, cfg.K)
    mcols = _mu_columns(prob.param_dim)
    rows = []
    for m in cfg.mu:
        rs = online_solve(model, m, prob, ocfg)
        row = dict(zip(mcols, m))
        row.update(sigma=rs.sigma, K_n=rs.iterations, indicator=rs.indicator, converged=rs.converged, online_time=rs.wall_time)
        rows.append(row)
    _write_table(cfg, out, "results", rows, mcols + ["sigma", "K_n", "indicator", "converged"], ("online_time",), None)
    for r in rows:
        print(" ".join(f"{r[c]:.6g}" for c in mcols), f"sigma={r['sigma']:.10g} K={r['K_n']} indicator={r['indicator']:.3e}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    model = _load(cfg, restricted_only=False)
    prob = _transport_for_model(cfg, model)
    if not cfg.xi_test:
        cfg.xi_test = list(prob.xi_test)
    try:
        xt = parameter_set(cfg.xi_test)
    except ValueError as exc:
        raise ConfigError(f"xi_test: {exc}") from exc
    out = _outdir(cfg)
    _write_config(cfg, out)
    tcfg, ncfg = _configs(cfg)
    truths = bench.truth_cache(prob, model.grid, xt, tcfg, ncfg)
    rows = bench.rb_sweep(model, xt, prob, truths, cfg=OnlineConfig(cfg.epsilon, cfg.K))
    _write_table(cfg, out, "sweep", [asdict(r) for r in rows], bench.SWEEP_COLUMNS, ("online_time",), "n_basis")
    for r in rows:
        print(f"{r.n_basis:3d} {r.E:.3e} failures={r.failures}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    model = _load(cfg, restricted_only=False)
    prob = _transport_for_model(cfg, model)
    mu = np.asarray(cfg.mu[0], float) if cfg.mu else None
    out = _outdir(cfg)
    _write_config(cfg, out)
    rep = bench.timing_report(
        model, prob, model.grid, range(1, cfg.nrun + 1), mu, cfg.offline_time, cfg.online_time, cfg.fdm_time
    )
    rows = [{"n_run": k, "rb_cumulative": a, "fdm_cumulative": b} for k, a, b in rep.rows]
    _write_table(cfg, out, "bench", rows, ("n_run", "rb_cumulative", "fdm_cumulative"))
    bench.write_json(out / "bench.json", {
        "offline_time": rep.offline_time, "online_time": rep.online_time, "fdm_time": rep.fdm_time, "break_even": rep.break_even,
    })
    print(f"offline={rep.offline_time:.4g}s online={rep.online_time:.4g}s fdm={rep.fdm_time:.4g}s break_even={rep.break_even}")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "dirichlet": cmd_dirichlet,
    "convergence": cmd_convergence,
    "train": cmd_train,
    "online": cmd_online,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ChecksumMismatch, FormatVersionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelMismatch, GridMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except SingularInterpolation as exc:
        print(f"error: singular interpolation in round {exc.round_number}: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except OuterNotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUTER
    except (NewtonDiverged, TruthSolveFailed, OnlineDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NEWTON


if __name__ == "__main__":
    sys.exit(main())
