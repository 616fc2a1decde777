"""Command line entry point: mesh utilities, inequality audits and HDG experiments."""
import logging
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import click

from .config import load_settings
from .fields import HybridSpace
from .hdg import (
    EXPERIMENT_COLUMNS,
    ExperimentRow,
    StabilityPolicy,
    converge,
    energy_check,
    get_problem,
    level_mesh,
    residuals,
    solution_errors,
    solve_problem,
    stability_energy,
    stability_sweep,
    PROBLEMS,
)
from .inequalities import AUDIT_COLUMNS, INEQUALITIES, MODES, VerdictPolicy, verdict_ok
from .mesh import TAG_RULES, build_structured, check_regularity, load_mesh, save_mesh
from .parallel import ParallelSweepRunner
from .reports import render_csv, write_atomic
from .rich_utils import (
    print_error,
    print_experiment_table,
    print_info,
    print_success,
    print_warning,
)
from .svg import loglog_plot
from .utils import EigenCrossCheckError, HdgAuditError, MeshError, configure_logging

logger = logging.getLogger(__name__)

MAX_K = 4
MAX_LEVELS = 7
INVARIANT_TOL = 1e-8

EXIT_OK, EXIT_VERDICT, EXIT_USAGE = 0, 1, 2


@dataclass
class RunConfig:
    """Parsed and range-checked parameters of one CLI run."""
    subcommand: str
    k: int = 1
    levels: int = 4
    samples: int = 0
    seed: Optional[int] = None
    tau: float = 1.0
    inequalities: List[str] = field(default_factory=list)
    out: Optional[str] = None
    svg: Optional[str] = None
    mode: str = "eigen"
    max_ratio: float = 4.0
    max_slope: float = 0.2

    def validate(self) -> "RunConfig":
        if not 0 <= self.k <= MAX_K:
            raise click.UsageError(f"--k must lie in [0, {MAX_K}], got {self.k}")
        if not 1 <= self.levels <= MAX_LEVELS:
            raise click.UsageError(f"--levels must lie in [1, {MAX_LEVELS}], got {self.levels}")
        if self.mode == "sample":
            if self.seed is None:
                raise click.UsageError("--seed is required in sample mode")
            if self.samples <= 0:
                raise click.UsageError("--samples must be positive in sample mode")
        if self.samples < 0:
            raise click.UsageError("--samples must be non-negative")
        if self.tau <= 0:
            raise click.UsageError(f"--tau must be positive, got {self.tau}")
        return self


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        write_atomic(out, text)
        print_success(f"Wrote {out}")
    else:
        click.echo(text, nl=False)


def _emit_svg(path: Optional[str], series, title: str, ylabel: str) -> None:
    if path:
        write_atomic(path, loglog_plot(series, title, "h_max", ylabel))
        print_success(f"Wrote {path}")


@click.group()
@click.option('--log-level', default=None, help='Logging level (DEBUG, INFO, WARNING, ERROR); default from HDG_AUDIT_LOG_LEVEL or INFO')
@click.pass_context
def main(ctx, log_level):
    """Audit discrete Poincare and trace inequalities of the HDG method and run HDG experiments."""
    settings = load_settings()
    configure_logging(log_level or settings.log_level)
    ctx.obj = settings


@main.group()
def mesh():
    """Generate and check meshes of the unit square."""


@mesh.command("gen")
@click.option('--n', 'n', default=2, show_default=True, help='Subdivisions per side')
@click.option('--tags', default='all-dirichlet', show_default=True, type=click.Choice(list(TAG_RULES)), help='Boundary tagging rule')
@click.option('--out', default=None, help='Output mesh file (stdout if omitted)')
def mesh_gen(n, tags, out):
    """Write the structured n x n triangulation in the text mesh format."""
    if n < 1:
        raise click.UsageError(f"--n must be positive, got {n}")
    _emit(save_mesh(build_structured(n, tags)), out)


@mesh.command("check")
@click.argument('path', type=click.Path(exists=True, dir_okay=False))
def mesh_check(path):
    """Parse a mesh file and report its shape regularity."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            parsed = load_mesh(f.read())
    except MeshError as e:
        print_error(f"{path}: {e}")
        sys.exit(EXIT_USAGE)
    report = check_regularity(parsed)
    print_info(
        f"{parsed.n_vertices} vertices, {parsed.n_cells} cells, {parsed.n_faces} faces; "
        f"kappa={report.kappa:.6g} theta={report.theta:.6g} min_angle={report.min_angle:.6g} "
        f"hanging_node_free={report.hanging_node_free}"
    )
    if not report.valid:
        print_error("mesh violates the regularity assumptions")
        sys.exit(EXIT_VERDICT)
    print_success(f"{path} is a valid mesh")


@main.command()
@click.option('--ineq', 'ineqs', multiple=True, help='Inequality id (repeatable)')
@click.option('--all', 'run_all', is_flag=True, help='Audit every registered inequality')
@click.option('--list', 'list_ids', is_flag=True, help='List the registered inequality ids and exit')
@click.option('--k', default=1, show_default=True, help='Polynomial degree')
@click.option('--levels', default=4, show_default=True, help='Refinement levels (n = 2, 4, 8, ...)')
@click.option('--mode', default='eigen', show_default=True, type=click.Choice(MODES), help='Sharp constant or random sampling')
@click.option('--samples', default=0, show_default=True, help='Random draws per level (also a dominance check in eigen mode)')
@click.option('--seed', default=None, type=int, help='Random seed, required in sample mode')
@click.option('--gamma', default='left', show_default=True, help='Boundary subset for boundary-integral terms')
@click.option('--max-ratio', default=4.0, show_default=True, help='Verdict: max/min of the constant over levels')
@click.option('--max-slope', default=0.2, show_default=True, help='Verdict: |log-log slope| of the constant against h')
@click.option('--null-tol', default=None, type=float, help='Relative null-space threshold (default from HDG_AUDIT_NULL_TOL)')
@click.option('--out', default=None, help='CSV output file (stdout if omitted)')
@click.option('--svg', default=None, help='SVG log-log plot of the constant against h')
@click.option('--cache-dir', default=None, help='Directory for cache files')
@click.option('--no-cache', is_flag=True, help='Do not read or write cached results')
@click.option('--clear-cache', is_flag=True, help='Clear the cache before auditing')
@click.option('--max-workers', default=None, type=int, help='Maximum number of parallel audit workers')
@click.pass_obj
def audit(settings, ineqs, run_all, list_ids, k, levels, mode, samples, seed, gamma, max_ratio, max_slope,
          null_tol, out, svg, cache_dir, no_cache, clear_cache, max_workers):
    """Sweep inequality audits over uniform refinements and judge boundedness."""
    if list_ids:
        for inequality_id, defn in INEQUALITIES.items():
            click.echo(f"{inequality_id}\t{defn.description}")
        return
    ids = list(INEQUALITIES) if run_all else list(ineqs)
    if not ids:
        raise click.UsageError("give at least one --ineq ID or --all")
    unknown = [i for i in ids if i not in INEQUALITIES]
    if unknown:
        raise click.UsageError(
            f"unknown inequality {', '.join(unknown)}; valid ids: {', '.join(INEQUALITIES)}"
        )
    config = RunConfig(
        "audit", k=k, levels=levels, samples=samples, seed=seed, inequalities=ids,
        out=out, svg=svg, mode=mode, max_ratio=max_ratio, max_slope=max_slope,
    ).validate()
    null_tol = settings.null_tol if null_tol is None else null_tol
    seed = 0 if config.seed is None else config.seed

    runner = ParallelSweepRunner(
        cache_dir=cache_dir or settings.cache_dir,
        cache_duration=settings.cache_duration,
        max_workers=max_workers or settings.max_workers,
        use_cache=not no_cache,
    )
    if clear_cache:
        runner.clear_cache()
    try:
        sweeps = runner.run(
            ids, config.k, config.levels, config.mode, config.samples, seed, gamma,
            VerdictPolicy(config.max_ratio, config.max_slope), null_tol,
        )
    except EigenCrossCheckError as e:
        print_error(str(e))
        sys.exit(EXIT_VERDICT)
    except HdgAuditError as e:
        print_error(str(e))
        sys.exit(EXIT_USAGE)

    comments = {
        "tool": "hdg-audit audit",
        "k": config.k,
        "levels": config.levels,
        "mode": config.mode,
        "samples": config.samples,
        "seed": seed,
        "gamma": gamma,
        "null_tol": null_tol,
        "max_ratio": config.max_ratio,
        "max_slope": config.max_slope,
        "h": "h_max",
    }
    rows = [r.to_row() for s in sweeps for r in s.results]
    _emit(render_csv(comments, AUDIT_COLUMNS, rows), config.out)
    _emit_svg(
        config.svg,
        {
            s.inequality: (
                [r.h_max for r in s.results],
                [r.lambda_max if r.mode == "eigen" else r.sample_max for r in s.results],
            )
            for s in sweeps
        },
        f"Sharp constants, k={config.k}",
        "lambda",
    )

    failed = [s.inequality for s in sweeps if not verdict_ok(s.verdict)]
    if failed:
        print_error(f"Verdict failed for: {', '.join(failed)}")
        sys.exit(EXIT_VERDICT)


def _hdg_options(func):
    options = [
        click.option('--problem', 'problem_name', default='manufactured-sine', show_default=True,
                     type=click.Choice(list(PROBLEMS)), help='Problem from the registry'),
        click.option('--k', default=1, show_default=True, help='Polynomial degree'),
        click.option('--levels', default=4, show_default=True, help='Refinement levels (n = 2, 4, 8, ...)'),
        click.option('--tau', default=1.0, show_default=True, help='Stabilization parameter'),
        click.option('--out', default=None, help='CSV output file (stdout if omitted)'),
        click.option('--svg', default=None, help='SVG log-log plot against h'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@main.group()
def hdg():
    """Solve the HDG Poisson problem and run convergence and stability experiments."""


def _experiment_csv(config: RunConfig, problem: str, rows: List[ExperimentRow], extra: Optional[dict] = None) -> None:
    comments = {
        "tool": f"hdg-audit hdg {config.subcommand}",
        "problem": problem,
        "k": config.k,
        "levels": config.levels,
        "tau": config.tau,
    }
    comments.update(extra or {})
    table = [r.as_row() for r in rows]
    print_experiment_table(f"HDG {config.subcommand}: {problem}", EXPERIMENT_COLUMNS, table)
    _emit(render_csv(comments, EXPERIMENT_COLUMNS, table), config.out)


def _solve_with_checks(problem_name: str, k: int, levels: int, tau: float) -> Tuple[ExperimentRow, List[str]]:
    problem = get_problem(problem_name)
    mesh_ = level_mesh(problem.tag_rule, levels - 1)
    space = HybridSpace(mesh_, k)
    solution = solve_problem(space, problem.data(tau), problem.gauge)
    report = residuals(solution)
    energy = energy_check(solution)
    row = ExperimentRow(
        experiment="solve",
        k=k,
        level=levels - 1,
        h_max=mesh_.h_max,
        n_dof=int(solution.system.free_dofs.size),
        energy=stability_energy(solution),
        residual=report.max_relative,
    )
    if problem.exact_u is not None:
        row.err_u, row.err_p = solution_errors(solution, problem.exact_u, problem.exact_grad)
    failures = []
    if report.max_relative > INVARIANT_TOL:
        failures.append(f"relative residual {report.max_relative:.3e}")
    if abs(energy.lhs - energy.generalized_rhs) > INVARIANT_TOL * max(1.0, energy.lhs):
        failures.append(f"energy identity {energy.lhs:.12e} vs {energy.generalized_rhs:.12e}")
    if abs(energy.rhs - energy.generalized_rhs) > INVARIANT_TOL * max(1.0, energy.lhs):
        print_warning("nonzero Dirichlet data: energy identity verified with the boundary work term")
    return row, failures


@hdg.command("solve")
@_hdg_options
def hdg_solve(problem_name, k, levels, tau, out, svg):
    """Solve one problem on the finest level and check residuals and the energy identity."""
    config = RunConfig("solve", k=k, levels=levels, tau=tau, out=out, svg=svg).validate()
    try:
        row, failures = _solve_with_checks(problem_name, config.k, config.levels, config.tau)
    except HdgAuditError as e:
        print_error(str(e))
        sys.exit(EXIT_USAGE)
    _experiment_csv(config, problem_name, [row])
    _emit_svg(config.svg, {"energy": ([row.h_max], [row.energy])}, f"HDG solve: {problem_name}", "energy")
    if failures:
        print_error(f"Invariant check failed: {'; '.join(failures)}")
        sys.exit(EXIT_VERDICT)


@hdg.command("converge")
@_hdg_options
@click.option('--min-order', default=None, type=float, help='Required order of u at the last level (default k + 0.8)')
def hdg_converge(problem_name, k, levels, tau, out, svg, min_order):
    """Error table with observed convergence orders."""
    config = RunConfig("converge", k=k, levels=levels, tau=tau, out=out, svg=svg).validate()
    try:
        rows = converge(get_problem(problem_name), config.k, config.levels, config.tau)
    except HdgAuditError as e:
        print_error(str(e))
        sys.exit(EXIT_USAGE)
    required = config.k + 0.8 if min_order is None else min_order
    _experiment_csv(config, problem_name, rows, {"min_order": required})
    _emit_svg(
        config.svg,
        {"err_u": ([r.h_max for r in rows], [r.err_u for r in rows]),
         "err_p": ([r.h_max for r in rows], [r.err_p for r in rows])},
        f"HDG convergence: {problem_name}, k={config.k}",
        "L2 error",
    )
    last = rows[-1]
    # errors at round-off level have no meaningful order
    if len(rows) > 1 and last.err_u > 1e-10 and not last.order_u >= required:
        print_error(f"Observed order {last.order_u:.3f} below {required:.3f}")
        sys.exit(EXIT_VERDICT)


@hdg.command("stability")
@_hdg_options
@click.option('--tau-rule', default='constant', show_default=True, type=click.Choice(['constant', 'mesh']),
              help="'mesh' sets tau = h_max on every level")
@click.option('--max-ratio', default=2.0, show_default=True, help='Verdict: max/min energy over levels')
@click.option('--max-slope', default=0.1, show_default=True, help='Verdict: |log-log slope| of the energy against h')
def hdg_stability(problem_name, k, levels, tau, out, svg, tau_rule, max_ratio, max_slope):
    """Energy of the discrete solution across refinements under rough data."""
    config = RunConfig(
        "stability", k=k, levels=levels, tau=tau, out=out, svg=svg, max_ratio=max_ratio, max_slope=max_slope,
    ).validate()
    try:
        result = stability_sweep(
            get_problem(problem_name), config.k, config.levels, config.tau,
            StabilityPolicy(config.max_ratio, config.max_slope), tau_rule,
        )
    except HdgAuditError as e:
        print_error(str(e))
        sys.exit(EXIT_USAGE)
    _experiment_csv(config, problem_name, result.rows, {
        "tau_rule": tau_rule, "max_ratio": config.max_ratio, "max_slope": config.max_slope,
        "ratio": result.ratio, "slope": result.slope,
    })
    _emit_svg(
        config.svg,
        {"energy": ([r.h_max for r in result.rows], [r.energy for r in result.rows])},
        f"HDG stability: {problem_name}, k={config.k}",
        "energy",
    )
    if tau_rule == "mesh":
        print_info(f"tau = h_max regime: ratio {result.ratio:.3f}, slope {result.slope:.3f} (not judged)")
        return
    if not result.passed:
        print_error(f"Stability verdict failed: ratio {result.ratio:.3f}, slope {result.slope:.3f}")
        sys.exit(EXIT_VERDICT)
    print_success(f"Stability verdict passed: ratio {result.ratio:.3f}, slope {result.slope:.3f}")


if __name__ == "__main__":
    main()
