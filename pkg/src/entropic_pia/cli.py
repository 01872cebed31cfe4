"""Batch experiment runner.

    entropic-pia run CONFIG [--output-dir D] [--seed S]
    entropic-pia list-problems

A config is a YAML mapping validated before any computation; unknown keys
are rejected. Exit codes: 0 all embedded checks passed, 1 a check failed,
2 the config is invalid, 3 a numerical failure (solver breakdown,
non-convergence). ``ENTROPIC_PIA_OUTPUT_DIR`` and ``ENTROPIC_PIA_WORKERS``
override the output directory and the Monte Carlo worker count.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, TextIO, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .feynman_kac import DEFAULT_BIAS_CONSTANT, compare_with_grid
from .hamiltonian import problem_quadrature
from .model import Boundary, ControlProblem, Grid1D, Mode, TimeGrid, ValueField, norms
from .pde import PdeSolveError
from .pia import (ConvergenceError, IterationError, IterationReport, PiaConfig, RateClass, fit_rate,
                  frozen_coefficients, reference_solution, run_pia)
from .problems import (DEFAULT_REGISTRY, ProblemSpec, audit_problem, counterexample_oracle, counterexample_picard,
                       get_problem, tail_gap)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

Experiment = Literal["pia_finite", "pia_infinite", "pia_diffusion", "counterexample", "mc_validate", "audit"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemRef(_Strict):
    name: str
    params: Dict[str, Optional[float]] = Field(default_factory=dict)


class GridConfig(_Strict):
    x_lo: Optional[float] = None
    x_hi: Optional[float] = None
    n_nodes: Optional[int] = Field(None, ge=3)
    boundary: Optional[Literal["periodic", "linear_extrapolation", "reflecting"]] = None


class TimeGridConfig(_Strict):
    n_steps: Optional[int] = Field(None, ge=1)


class QuadratureConfig(_Strict):
    nodes: Optional[int] = Field(None, ge=1)
    panels: int = Field(1, ge=1)


class PiaSection(_Strict):
    max_iter: int = Field(50, ge=1)
    stop_tol: float = Field(1e-10, gt=0)
    reference_tol: float = Field(1e-12, gt=0)
    record_policies: bool = False
    rho_big: float = Field(20.0, gt=0)

    @model_validator(mode="after")
    def _tols(self):
        if self.reference_tol > self.stop_tol:
            raise ValueError("reference_tol must not exceed stop_tol")
        return self


class McSection(_Strict):
    n_paths: int = Field(10000, ge=2)
    dt_sim: float = Field(2e-3, gt=0)
    t_max: Optional[float] = Field(None, gt=0)
    seed: int = 0
    probe_points: List[float] = Field(default_factory=lambda: [-2.0, -1.0, 0.0, 1.0, 2.0])
    chunk: int = Field(2000, ge=2)
    bias_constant: float = Field(DEFAULT_BIAS_CONSTANT, ge=0)


class CounterexampleSection(_Strict):
    n_iter: int = Field(9, ge=4)


class ExperimentConfig(_Strict):
    experiment: Experiment
    problem: Union[str, ProblemRef]
    rho: Optional[float] = Field(None, gt=0)
    T: Optional[float] = Field(None, gt=0)
    lambda_: Optional[float] = Field(None, gt=0, alias="lambda")
    grid: GridConfig = Field(default_factory=GridConfig)
    tgrid: TimeGridConfig = Field(default_factory=TimeGridConfig)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    pia: PiaSection = Field(default_factory=PiaSection)
    mc: McSection = Field(default_factory=McSection)
    counterexample: CounterexampleSection = Field(default_factory=CounterexampleSection)
    output_dir: Optional[str] = None
    record_timings: bool = False

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @model_validator(mode="after")
    def _horizon(self):
        if self.rho is not None and self.T is not None:
            raise ValueError("set at most one of rho and T")
        if self.experiment == "pia_finite" and self.T is None:
            raise ValueError("pia_finite needs T")
        if self.experiment in ("pia_infinite", "pia_diffusion", "mc_validate", "counterexample") and self.T is not None:
            raise ValueError(f"{self.experiment} is an infinite-horizon experiment; T is not allowed")
        return self


class ConfigError(Exception):
    pass


# config loading


def _line_of(root, loc) -> Optional[int]:
    """1-based YAML line of the deepest existing key along ``loc``."""
    node, line = root, None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == str(key):
                    line = k.start_mark.line + 1
                    node = v
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = [p for p in err["loc"] if p not in ("str", "ProblemRef")]
            where = ".".join(str(p) for p in loc) or "<root>"
            line = _line_of(root, loc)
            prefix = f"{path}:{line}" if line else str(path)
            msgs.append(f"{prefix}: {where}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None


@dataclass
class Resolved:
    """Everything a run uses, with defaults filled in."""

    config: ExperimentConfig
    spec: ProblemSpec
    params: Dict[str, Any]
    problem: ControlProblem
    grid: Grid1D
    tgrid: Optional[TimeGrid]
    quad_nodes: int
    output_dir: Path
    workers: int

    def echo(self) -> dict:
        cfg = self.config.model_dump(by_alias=True)
        cfg["problem"] = {"name": self.spec.name, "params": dict(self.params)}
        cfg["grid"] = {"x_lo": self.grid.x_lo, "x_hi": self.grid.x_hi, "n_nodes": self.grid.n_nodes,
                       "boundary": self.grid.boundary.value, "spacing": self.grid.spacing}
        cfg["tgrid"] = {"n_steps": self.tgrid.n_steps if self.tgrid else None,
                        "dt": self.tgrid.dt if self.tgrid else None}
        cfg["quadrature"] = {"nodes": self.quad_nodes, "panels": self.config.quadrature.panels}
        cfg["output_dir"] = str(self.output_dir)
        cfg["workers"] = self.workers
        return cfg


def resolve(cfg: ExperimentConfig, output_dir: Optional[str] = None, seed: Optional[int] = None,
            registry: Optional[Mapping[str, ProblemSpec]] = None) -> Resolved:
    ref = cfg.problem if isinstance(cfg.problem, ProblemRef) else ProblemRef(name=cfg.problem)
    try:
        spec = get_problem(ref.name, registry)
    except KeyError as exc:
        raise ConfigError(f"problem: {exc.args[0]}") from None
    params = dict(spec.defaults)
    overrides = dict(ref.params)
    for key, value in (("discount", cfg.rho), ("horizon", cfg.T), ("temperature", cfg.lambda_)):
        if value is not None:
            overrides[key] = value
    unknown = set(overrides) - set(params)
    if unknown:
        raise ConfigError(f"problem.params: {spec.name} has no parameters {sorted(unknown)}")
    params.update(overrides)
    try:
        problem = spec.builder(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from None
    if problem.is_finite_horizon:
        params["discount"] = None

    g = cfg.grid
    try:
        grid = Grid1D(spec.grid.x_lo if g.x_lo is None else g.x_lo,
                      spec.grid.x_hi if g.x_hi is None else g.x_hi,
                      spec.grid.n_nodes if g.n_nodes is None else g.n_nodes,
                      spec.grid.boundary if g.boundary is None else Boundary(g.boundary))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None
    tgrid = None
    if problem.is_finite_horizon:
        tgrid = TimeGrid(problem.horizon, cfg.tgrid.n_steps or spec.time_steps)

    exp = cfg.experiment
    if exp == "pia_diffusion" and problem.mode is not Mode.DIFFUSION_CONTROL_1D:
        raise ConfigError(f"experiment: pia_diffusion needs a diffusion-control problem, {spec.name} is not")
    if exp in ("pia_finite", "pia_infinite", "mc_validate") and problem.mode is not Mode.DRIFT_CONTROL:
        raise ConfigError(f"experiment: {exp} needs a drift-control problem, {spec.name} is not")
    if exp == "counterexample" and spec.name != "counterexample":
        raise ConfigError("experiment: the counterexample experiment runs only the counterexample problem")
    if exp == "counterexample" and grid.boundary is not Boundary.PERIODIC:
        raise ConfigError("grid: the counterexample needs a periodic grid")

    if seed is not None:
        cfg = cfg.model_copy(update={"mc": cfg.mc.model_copy(update={"seed": seed})})
    out = output_dir or os.environ.get("ENTROPIC_PIA_OUTPUT_DIR") or cfg.output_dir or f"runs/{exp}"
    try:
        workers = int(os.environ.get("ENTROPIC_PIA_WORKERS", "1"))
    except ValueError:
        raise ConfigError("ENTROPIC_PIA_WORKERS must be an integer") from None
    return Resolved(cfg, spec, params, problem, grid, tgrid, cfg.quadrature.nodes or spec.quad_nodes,
                    Path(out), max(1, workers))


# reports


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


@dataclass
class Outcome:
    report: Optional[IterationReport] = None
    checks: List[Check] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)
    extra_columns: Dict[str, List[float]] = field(default_factory=dict)

    def check(self, name: str, passed: bool, detail: str):
        self.checks.append(Check(name, bool(passed), detail))


def _fmt(x) -> str:
    """Shortest round-trip decimal; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def iterations_csv(report: Optional[IterationReport], extra_columns: Mapping[str, List[float]] = (),
                   record_timings: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    extra_columns = dict(extra_columns)
    writer.writerow(list(IterationReport.COLUMNS) + list(extra_columns))
    if report is not None:
        for k in range(len(report)):
            row = []
            for name in IterationReport.COLUMNS:
                if name == "seconds" and not record_timings:
                    row.append("")
                else:
                    row.append(_fmt(getattr(report, name)[k]))
            row += [_fmt(col[k]) for col in extra_columns.values()]
            writer.writerow(row)
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# experiments


def _exp_pia(res: Resolved) -> Outcome:
    p, grid, cfg = res.problem, res.grid, res.config
    quad = problem_quadrature(p, res.quad_nodes, cfg.quadrature.panels)
    pcfg = PiaConfig(**cfg.pia.model_dump())
    ref = reference_solution(p, grid, res.tgrid, quad, pcfg)
    run = run_pia(p, grid, quad, res.tgrid, pcfg, reference=ref.field)
    rep = run.report
    out = Outcome(rep)
    out.extra["reference"] = {"iterations": ref.iterations, "hjb_residual": ref.hjb_residual,
                              "termination": ref.termination}

    mono = rep.min_monotonicity
    out.check("monotone_improvement", not mono < -1e-8, f"min(v^n - v^(n-1)) = {mono:.3e} >= -1e-8")
    bound = rep.max_bound_violation
    out.check("a_priori_bound", bound <= 1e-8, f"max(v^n - bound) = {bound:.3e} <= 1e-8")
    limit = 100 * pcfg.reference_tol
    out.check("reference_residual", ref.hjb_residual <= limit,
              f"discrete HJB residual {ref.hjb_residual:.3e} <= {limit:.1e}")
    for key, fit in rep.rates.items():
        out.check(f"{key}_not_divergent", fit.classification is not RateClass.DIVERGENT,
                  f"{key} classified {fit.classification.value}")
    if p.mode is Mode.DIFFUSION_CONTROL_1D:
        worst = max(v for v in rep.vxx_identity if not math.isnan(v)) if len(rep) > 1 else 0.0
        out.check("vxx_identity", worst <= 1e-9, f"max explicit v_xx residual {worst:.3e} <= 1e-9")
    elif not p.is_finite_horizon and p.discount >= pcfg.rho_big:
        floor = 10 * grid.spacing**2
        e = rep.eps1
        ok = all(e[n] <= 0.5 * min(e[n - 1], e[n - 1] ** 2) + floor for n in range(1, len(e)))
        out.check("large_rho_contraction", ok, f"eps1^n <= 1/2 I(eps1^(n-1)) + {floor:.3e} for every n")
    return out


def _exp_counterexample(res: Resolved) -> Outcome:
    rho = res.problem.discount
    n_iter = res.config.counterexample.n_iter
    grid = res.grid
    iterates = counterexample_picard(rho, grid, n_iter)
    i0 = int(np.argmin(np.abs(grid.nodes)))
    if abs(grid.nodes[i0]) > 1e-12:
        raise ConfigError("grid: the counterexample grid must contain x = 0")
    zero = ValueField.from_values(grid, np.zeros(grid.n_nodes))
    rep = IterationReport("picard")
    vx0, oracle = [], []
    for n, v in enumerate(iterates):
        d = norms(v, zero)
        row = dict(n=n, eps0=d.c0, eps1=d.c1, eps2=d.c2)
        if n > 0:
            dd = norms(v, iterates[n - 1])
            row.update(delta0=dd.c0, delta1=dd.c1, delta2=dd.c2,
                       monotonicity_violation=float(np.min(v.values - iterates[n - 1].values)))
        rep.append(**row)
        vx0.append(float(v.dx[i0]))
        oracle.append(counterexample_oracle(rho, n))
    rep.termination = "n_iter"
    out = Outcome(rep, extra_columns={"vx0": vx0, "oracle": oracle})

    worst_rel, worst_even = 0.0, 0.0
    for n in range(1, n_iter + 1):
        if n % 2:
            worst_rel = max(worst_rel, abs(vx0[n] - oracle[n]) / abs(oracle[n]))
        else:
            worst_even = max(worst_even, abs(vx0[n]))
    out.check("oracle_odd", worst_rel <= 0.02, f"max relative error of v_x^n(0), odd n: {worst_rel:.3e} <= 0.02")
    out.check("oracle_even", worst_even <= 1e-3, f"max |v_x^n(0)|, even n: {worst_even:.3e} <= 1e-3")

    odd = [n for n in range(1, n_iter + 1) if n % 2]
    fit = fit_rate([abs(vx0[n]) for n in odd], steps=odd)
    out.extra["rate"] = fit.to_dict()
    out.extra["rate_input"] = "|v_x^n(0)| over odd n"
    if rho < 0.5:
        out.check("divergence_detected", fit.classification is RateClass.DIVERGENT,
                  f"classified {fit.classification.value}, expected Divergent for rho < 1/2")
    else:
        eta = 1.0 / (rho + 0.5)
        ok = fit.classification is RateClass.EXPONENTIAL and abs(fit.eta - eta) <= 0.02
        out.check("exponential_rate", ok, f"classified {fit.classification.value} with eta {fit.eta}, "
                                          f"expected Exponential with eta {eta:.4f} +- 0.02")
    return out


def _exp_mc(res: Resolved) -> Outcome:
    p, grid, cfg = res.problem, res.grid, res.config
    quad = problem_quadrature(p, res.quad_nodes, cfg.quadrature.panels)
    pcfg = PiaConfig(**cfg.pia.model_dump())
    run = run_pia(p, grid, quad, None, pcfg)
    if len(run.values) < 2:
        raise ConfigError("pia: need at least one iteration to validate")
    coeffs = frozen_coefficients(p, grid, quad, run.values[-2])
    mc = cfg.mc
    probes = compare_with_grid(run.values[-1], coeffs.first_order, np.sqrt(2 * coeffs.second_order),
                               coeffs.source, p.discount, mc.probe_points, mc.n_paths, mc.dt_sim, mc.t_max,
                               mc.seed, mc.chunk, mc.bias_constant, res.workers)
    out = Outcome(run.report)
    out.extra["iterate"] = len(run.values) - 1
    out.extra["probes"] = [c.to_dict() for c in probes]
    for c in probes:
        out.check(f"mc_{c.quantity}_x{c.x0:+.4f}", c.passed,
                  f"|mc - grid| = {c.error:.3e} <= {c.budget:.3e} (3 SE + tail + C(dt + h^2))")
    return out


def _exp_audit(res: Resolved) -> Outcome:
    p = res.problem
    out = Outcome(None)
    audit = audit_problem(p)
    out.extra["audit"] = {"checks": audit.checks, "failures": list(audit.failures)}
    out.check("assumption_audit", audit.passed,
              "all sampled bounds hold" if audit.passed else f"failed: {', '.join(audit.failures)}")
    if p.mode is Mode.DIFFUSION_CONTROL_1D:
        xs = np.array([0.0, 5.0, 10.0, 20.0])
        gap = tail_gap(p, xs)
        out.extra["tail_gap"] = dict(zip([str(x) for x in xs], gap.tolist()))
        out.check("tail_limit", bool(gap[-1] < 1e-6 and np.all(np.diff(gap) <= 0)),
                  f"sup_a |sigma(x,a) - sigma(x,0)| at x = {xs.tolist()}: {gap.tolist()}")
    return out


_EXPERIMENTS = {
    "pia_finite": _exp_pia,
    "pia_infinite": _exp_pia,
    "pia_diffusion": _exp_pia,
    "counterexample": _exp_counterexample,
    "mc_validate": _exp_mc,
    "audit": _exp_audit,
}


def execute(res: Resolved) -> tuple[int, dict]:
    """Run the experiment, write report.json and iterations.csv, return (exit code, report)."""
    t0 = time.perf_counter()
    outcome = _EXPERIMENTS[res.config.experiment](res)
    elapsed = time.perf_counter() - t0
    res.output_dir.mkdir(parents=True, exist_ok=True)
    report_path = res.output_dir / "report.json"
    csv_path = res.output_dir / "iterations.csv"
    csv_path.write_text(iterations_csv(outcome.report, outcome.extra_columns, res.config.record_timings))

    passed = all(c.passed for c in outcome.checks)
    report = {
        "version": __version__,
        "experiment": res.config.experiment,
        "config": res.echo(),
        "passed": passed,
        "checks": [c.to_dict() for c in outcome.checks],
        "iterations": outcome.report.to_dict() if outcome.report is not None else None,
        **outcome.extra,
        "artifacts": {"report": str(report_path), "iterations": str(csv_path)},
    }
    report = _clean(report)
    if res.config.record_timings:
        report["timings"] = _clean({"total_seconds": elapsed,
                                    "iteration_seconds": outcome.report.seconds if outcome.report else []})
    report_path.write_text(json.dumps(report, indent=2, allow_nan=False) + "\n")
    return (EXIT_OK if passed else EXIT_CHECK), report


def cmd_run(config_path: str, output_dir: Optional[str] = None, seed: Optional[int] = None,
            stdout: Optional[TextIO] = None, stderr: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        cfg = load_config(config_path)
        res = resolve(cfg, output_dir, seed)
        code, report = execute(res)
    except ConfigError as exc:
        print(f"config error: {exc}", file=stderr)
        return EXIT_CONFIG
    except IterationError as exc:
        print(f"numeric failure at iteration {exc.iteration}: {exc}", file=stderr)
        return EXIT_NUMERIC
    except ConvergenceError as exc:
        last = exc.deltas[-1] if exc.deltas else float("nan")
        print(f"numeric failure at iteration {len(exc.deltas)}: {exc} (last delta {last:.3e})", file=stderr)
        return EXIT_NUMERIC
    except (PdeSolveError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=stderr)
        return EXIT_NUMERIC
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}", file=stdout)
    if code == EXIT_CHECK:
        failed = [c["name"] for c in report["checks"] if not c["passed"]]
        print(f"failed checks: {', '.join(failed)}", file=stderr)
    print(f"wrote {report['artifacts']['report']} and {report['artifacts']['iterations']}", file=stdout)
    return code


def list_problems(registry: Optional[Mapping[str, ProblemSpec]] = None, stdout: Optional[TextIO] = None) -> int:
    """Print the registry with the assumption-audit status of each default problem."""
    stdout = stdout or sys.stdout
    registry = DEFAULT_REGISTRY if registry is None else registry
    print(f"{'name':<22}{'mode':<22}{'horizon':<12}{'audit':<8}description", file=stdout)
    for name in sorted(registry):
        spec = registry[name]
        try:
            problem = spec.build()
            audit = audit_problem(problem)
            status = "ok" if audit.passed else "FAILED"
            mode = problem.mode.value
            horizon = f"T={problem.horizon:g}" if problem.is_finite_horizon else f"rho={problem.discount:g}"
            note = "" if audit.passed else f"  [audit failed: {', '.join(audit.failures)}]"
        except Exception as exc:  # listing is informational; a broken entry is flagged, not fatal
            status, mode, horizon, note = "FAILED", "?", "?", f"  [build failed: {exc}]"
        print(f"{name:<22}{mode:<22}{horizon:<12}{status:<8}{spec.description}{note}", file=stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entropic-pia", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a YAML config")
    run.add_argument("config_path")
    run.add_argument("--output-dir", default=None)
    run.add_argument("--seed", type=int, default=None, help="override mc.seed")
    sub.add_parser("list-problems", help="list registered problems and their audit status")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list-problems":
        return list_problems()
    return cmd_run(args.config_path, args.output_dir, args.seed)


if __name__ == "__main__":
    sys.exit(main())
