"""Command-line front end: config files, runs, comparisons, benchmark suites.

Config files are YAML with four sections (``problem``, ``discretization``,
``solver``, ``linear``, ``output`` — the last three optional).  Unknown keys
are rejected with a spelling suggestion; all validation problems of one file
are reported together.  Artifacts of a run:

* convergence CSV (``iter,energy,residual,lambda_1..lambda_p,inner_matvecs,
  wall_ms``; ``%.16e`` reals; row ``iter=0`` is the starting state before any
  update step),
* field dump (``# dim=<d> p=<p> n=<n> h=<h>`` header, then one line per mesh
  node: coordinates followed by the component values, in mesh node order),
* plain-text summary.

With one config and one seed the CSV is byte-identical across runs except for
the ``wall_ms`` column.

Exit codes: 0 converged, 2 not converged (iteration budget, Newton breakdown,
or another optimizer-level failure), 3 configuration error, 4 linear-algebra
failure (inner solver or metric breakdown).
"""

from __future__ import annotations

import dataclasses
import difflib
import importlib.resources
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .fem import FemError, build_space
from .linalg import LinearSolverError, MatvecCounter
from .manifold import ManifoldError, MetricKind, feasibility_error, retract
from .model import ModelError, PotentialSpec, ProblemSpec
from .operators import Discretization
from .optimizers import (
    OptimizerError,
    SolverOptions,
    alternating_rgd_run,
    initialize,
    newton_run,
    rgd_run,
    solve as solve_run,
)

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3
EXIT_LINALG = 4

_SECTION_KEYS = {
    "problem": ("dimension", "domain", "components", "masses", "kappa", "bc",
                "potential", "potentials"),
    "discretization": ("h", "order"),
    "solver": ("method", "alternating", "tau", "omega", "tol", "max_outer",
               "init_target", "init_max_sweeps", "hybrid", "line_search"),
    "linear": ("precond", "tolerance_policy", "clamp"),
    "output": ("directory", "csv", "field", "summary"),
}
_POTENTIAL_KEYS = ("kind", "harmonic", "lattice_amplitude", "lattice_frequency",
                   "cell_size", "value_high", "probability", "seed", "path",
                   "trap_strength", "trap_power")
_BUILTIN_CLAMP = (1e-14, 1e-1)


class ConfigError(Exception):
    """One or more problems with a run configuration."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


@dataclasses.dataclass
class RunConfig:
    """A fully validated run: model, mesh, solver, and output locations."""

    label: str
    problem: ProblemSpec
    h: object
    order: int
    solver: SolverOptions
    precond: str
    outdir: Path
    csv_path: Path
    field_path: Path
    summary_path: Path
    shared_sections: dict

    def build(self) -> Discretization:
        space = build_space(self.problem.domain, self.h, bc=self.problem.bc)
        return Discretization(self.problem, space, precond=self.precond)


def _suggest(key: str, known) -> str:
    close = difflib.get_close_matches(key, known, n=1, cutoff=0.6)
    return f"; did you mean {close[0]!r}?" if close else ""


def _check_keys(section: str, data: dict, errors: list) -> None:
    for key in data:
        if key not in _SECTION_KEYS[section]:
            errors.append(
                f"{section}: unknown key {key!r}"
                + _suggest(str(key), _SECTION_KEYS[section])
            )


def _potential_from(entry, errors: list, where: str):
    if not isinstance(entry, dict):
        errors.append(f"{where} must be a mapping of potential fields")
        return None
    bad = False
    for key in entry:
        if key not in _POTENTIAL_KEYS:
            errors.append(
                f"{where}: unknown key {key!r}" + _suggest(str(key), _POTENTIAL_KEYS)
            )
            bad = True
    if bad:
        return None
    try:
        return PotentialSpec(**entry)
    except (ModelError, TypeError) as exc:
        errors.append(f"{where}: {exc}")
        return None


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    """Load and validate one YAML run configuration.

    ``overrides`` may carry ``tol``/``tau``/``method``/``seed`` values from
    command-line flags; they are applied on top of the file before
    validation.  All problems found are raised together as one
    :class:`ConfigError`.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")

    errors: list = []
    for section in data:
        if section not in _SECTION_KEYS:
            errors.append(
                f"unknown section {section!r}" + _suggest(str(section), _SECTION_KEYS)
            )
    sections = {}
    for name in _SECTION_KEYS:
        raw = data.get(name, {})
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            errors.append(f"section {name!r} must be a mapping")
            raw = {}
        sections[name] = dict(raw)
    if errors:
        raise ConfigError(errors)

    overrides = overrides or {}
    for key in ("tol", "tau", "method"):
        if overrides.get(key) is not None:
            sections["solver"][key] = overrides[key]

    prob = sections["problem"]
    disc_sec = sections["discretization"]
    solver_sec = sections["solver"]
    linear = sections["linear"]
    output = sections["output"]
    for name in ("problem", "discretization", "solver", "linear", "output"):
        _check_keys(name, sections[name], errors)

    for key in ("domain", "masses", "kappa"):
        if key not in prob:
            errors.append(f"problem: missing required key {key!r}")
    if "h" not in disc_sec:
        errors.append("discretization: missing required key 'h'")

    # potentials: one shared spec or a per-component list
    potentials = None
    if "potential" in prob and "potentials" in prob:
        errors.append("problem: give either 'potential' or 'potentials', not both")
    elif "potential" in prob:
        one = _potential_from(prob["potential"], errors, "problem.potential")
        masses = prob.get("masses") or ()
        potentials = None if one is None else tuple(
            one for _ in range(max(len(masses), 1))
        )
    elif "potentials" in prob:
        entries = prob["potentials"]
        if not isinstance(entries, list):
            errors.append("problem.potentials must be a list of potential mappings")
        else:
            specs = [
                _potential_from(e, errors, f"problem.potentials[{i}]")
                for i, e in enumerate(entries)
            ]
            if all(s is not None for s in specs):
                potentials = tuple(specs)
    else:
        errors.append("problem: missing required key 'potential' (or 'potentials')")

    if overrides.get("seed") is not None and potentials is not None:
        potentials = tuple(
            dataclasses.replace(p, seed=int(overrides["seed"])) for p in potentials
        )

    problem = None
    if not errors:
        try:
            problem = ProblemSpec(
                domain=prob["domain"],
                masses=tuple(prob["masses"]),
                interaction=prob["kappa"],
                potentials=potentials,
                bc=prob.get("bc", "natural"),
            )
        except (ModelError, TypeError, ValueError) as exc:
            errors.append(f"problem: {exc}")
    if problem is not None:
        if "dimension" in prob and int(prob["dimension"]) != problem.dim:
            errors.append(
                f"problem: dimension {prob['dimension']} does not match the "
                f"{problem.dim}D domain"
            )
        if "components" in prob and int(prob["components"]) != problem.p:
            errors.append(
                f"problem: components {prob['components']} does not match "
                f"{problem.p} masses/kappa columns"
            )

    order = int(disc_sec.get("order", 2))
    if order != 2:
        errors.append("discretization: only order=2 (quadratic elements) is supported")

    precond = linear.get("precond", "ilu0")
    if precond not in ("ilu0", "jacobi"):
        errors.append(
            f"linear: unknown precond {precond!r}; choose 'ilu0' or 'jacobi'"
        )
    policy = linear.get("tolerance_policy", "adaptive-absolute")
    clamp = linear.get("clamp")
    if clamp is not None and tuple(float(c) for c in clamp) != _BUILTIN_CLAMP:
        errors.append(
            "linear: the inner-tolerance clamp is fixed at [1e-14, 0.1] "
            "in this implementation"
        )

    options = None
    try:
        options = SolverOptions(
            method=str(solver_sec.get("method", "ea-rgd")),
            alternating=bool(solver_sec.get("alternating", False)),
            tau=float(solver_sec.get("tau", 1.0)),
            omega=(None if solver_sec.get("omega") is None
                   else float(solver_sec["omega"])),
            tol=float(solver_sec.get("tol", 1e-8)),
            max_outer=int(solver_sec.get("max_outer", 20000)),
            hybrid=bool(solver_sec.get("hybrid", False)),
            line_search=bool(solver_sec.get("line_search", False)),
            init_target=(None if solver_sec.get("init_target") is None
                         else float(solver_sec["init_target"])),
            init_max_sweeps=int(solver_sec.get("init_max_sweeps", 10000)),
            inner_policy=str(policy),
        )
    except (OptimizerError, TypeError, ValueError) as exc:
        errors.append(f"solver: {exc}")

    if errors:
        raise ConfigError([f"{path}: {msg}" for msg in errors])

    label = path.stem
    outdir = Path(output.get("directory", f"{label}_out"))
    shared = {
        "problem": sections["problem"],
        "discretization": sections["discretization"],
    }
    return RunConfig(
        label=label,
        problem=problem,
        h=disc_sec["h"],
        order=order,
        solver=options,
        precond=precond,
        outdir=outdir,
        csv_path=outdir / output.get("csv", "convergence.csv"),
        field_path=outdir / output.get("field", "field.dat"),
        summary_path=outdir / output.get("summary", "summary.txt"),
        shared_sections=shared,
    )


# ------------------------------------------------------------------ artifacts
def write_csv(path: Path, report, p: int) -> None:
    columns = ["iter", "energy", "residual"]
    columns += [f"lambda_{j + 1}" for j in range(p)]
    columns += ["inner_matvecs", "wall_ms"]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in report.rows:
            cells = [str(row.k), f"{row.energy:.16e}", f"{row.residual:.16e}"]
            cells += [f"{s:.16e}" for s in row.sigma]
            cells += [str(row.inner_matvecs), f"{row.wall_ms:.16e}"]
            fh.write(",".join(cells) + "\n")


def write_field(path: Path, disc: Discretization, Phi: np.ndarray) -> None:
    space = disc.space
    full = disc.expand_state(Phi)
    h_label = ",".join(f"{h:.10g}" for h in space.h)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# dim={space.dim} p={disc.p} n={space.n} h={h_label}\n")
        for i in range(space.n):
            cells = [f"{c:.16e}" for c in space.nodes[i]]
            cells += [f"{v:.16e}" for v in full[i]]
            fh.write(" ".join(cells) + "\n")


def write_summary(path: Path, config: RunConfig, disc: Discretization,
                  report) -> None:
    lines = [
        f"config: {config.label}",
        f"method: {report.method}",
        f"alternating: {config.solver.alternating}",
        f"converged: {report.converged}",
        f"reason: {report.reason}",
        f"iterations: {report.iterations}",
        f"init_sweeps: {report.init_sweeps}",
        f"energy: {report.energy:.16e}",
        f"residual: {report.residual:.16e}",
        f"matvecs: {report.matvecs}",
        f"matvecs_per_iteration: {report.matvecs / max(report.iterations, 1):.4f}",
        f"wall_ms: {report.wall_ms:.3f}",
        f"nodes: {disc.n}",
        f"components: {disc.p}",
        f"feasibility: {feasibility_error(report.Phi, disc.M, disc.masses):.3e}",
    ]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def run(config: RunConfig) -> int:
    """Execute one configured run and write its artifacts."""
    disc = config.build()
    report = solve_run(disc, config.solver)
    config.outdir.mkdir(parents=True, exist_ok=True)
    write_csv(config.csv_path, report, disc.p)
    write_field(config.field_path, disc, report.Phi)
    write_summary(config.summary_path, config, disc, report)
    status = "converged" if report.converged else report.reason
    click.echo(
        f"{config.label}: {report.method} "
        f"{'alt ' if config.solver.alternating else ''}-> {status}; "
        f"iterations={report.iterations} energy={report.energy:.10f} "
        f"residual={report.residual:.3e}"
    )
    click.echo(f"artifacts: {config.csv_path} {config.field_path} "
               f"{config.summary_path}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


# ------------------------------------------------------------------- compare
def _method_label(options: SolverOptions) -> str:
    return options.method + (" alt" if options.alternating else "")


def compare(configs: list[RunConfig]) -> int:
    """Run several solver configurations on one shared problem and tabulate."""
    first = configs[0].shared_sections
    for cfg in configs[1:]:
        if cfg.shared_sections != first:
            raise ConfigError(
                f"{cfg.label}: problem/discretization sections differ from "
                f"{configs[0].label}; compare requires one shared problem"
            )
    disc_cache: dict = {}
    init_cache: dict = {}
    rows = []
    for cfg in configs:
        if cfg.precond not in disc_cache:
            disc_cache[cfg.precond] = cfg.build()
        disc = disc_cache[cfg.precond]
        key = (cfg.precond, cfg.solver.init_target)
        if key not in init_cache:
            init_cache[key] = initialize(
                disc, MatvecCounter(), target=cfg.solver.init_target,
                max_sweeps=cfg.solver.init_max_sweeps,
            )
        Phi0, sweeps = init_cache[key]
        counter = MatvecCounter()
        t0 = time.perf_counter()
        if cfg.solver.is_newton:
            report = newton_run(disc, Phi0, cfg.solver, counter, sweeps)
        elif cfg.solver.alternating:
            report = alternating_rgd_run(disc, Phi0, cfg.solver, counter, sweeps)
        else:
            report = rgd_run(disc, Phi0, cfg.solver, counter, sweeps)
        cpu = time.perf_counter() - t0
        rows.append((_method_label(cfg.solver), report, cpu))
    rows.sort(key=lambda item: item[0])

    disc = next(iter(disc_cache.values()))
    dom = " x ".join(f"[{lo:g}, {hi:g}]" for lo, hi in disc.problem.domain)
    click.echo(f"problem: {dom}, p={disc.p}, n={disc.n}, "
               f"h={','.join(f'{h:g}' for h in disc.space.h)}, "
               f"tol={configs[0].solver.tol:g}")
    header = (f"{'method':<14}{'iters':>8}{'mv/iter':>10}{'cpu_s':>9}"
              f"{'energy':>20}{'residual':>12}")
    click.echo(header)
    click.echo("-" * len(header))
    all_ok = True
    for label, report, cpu in rows:
        if report.converged:
            iters = f"{report.iterations:>8d}"
            avg = f"{report.matvecs / max(report.iterations, 1):>10.1f}"
        else:
            all_ok = False
            iters = f"{'-':>8}"
            avg = f"{'-':>10}"
        click.echo(
            f"{label:<14}{iters}{avg}{cpu:>9.2f}"
            f"{report.energy:>20.10f}{report.residual:>12.3e}"
        )
    for label, report, _ in rows:
        if not report.converged:
            click.echo(f"note: {label}: {report.reason}")
    return EXIT_OK if all_ok else EXIT_NOT_CONVERGED


# ------------------------------------------------------------------ checking
def check() -> int:
    """Fast self-check: geometry, energies, gradients, and one tiny solve
    are verified against the brute-force oracles."""
    from .oracles import dense_ground_state, dense_quadrature_energy, fd_gradient_check

    problem = ProblemSpec(
        domain=(-4.0, 4.0),
        masses=(1.0, 0.5),
        interaction=[[2.0, 1.0], [1.0, 2.0]],
        potentials=(
            PotentialSpec(kind="expression", harmonic=1.0, lattice_amplitude=4.0),
        ) * 2,
    )
    disc = Discretization(problem, build_space(problem.domain, 0.25))
    rng = np.random.default_rng(0)
    failures = []

    def report(name: str, ok: bool, detail: str) -> None:
        click.echo(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failures.append(name)

    worst = 0.0
    for _ in range(200):
        Phi = retract(rng.standard_normal((disc.n, disc.p)), disc.M, disc.masses)
        worst = max(worst, feasibility_error(Phi, disc.M, disc.masses))
    report("retraction feasibility", worst <= 1e-12, f"max error {worst:.2e}")

    worst = 0.0
    for _ in range(5):
        Phi = retract(rng.standard_normal((disc.n, disc.p)), disc.M, disc.masses)
        prod = disc.energy(Phi)
        dense = dense_quadrature_energy(problem, disc.space, Phi)
        worst = max(worst, abs(prod - dense) / max(1.0, abs(dense)))
    report("energy vs dense quadrature", worst <= 1e-11, f"max rel diff {worst:.2e}")

    # the Lagrangian metric is only definite near a minimizer, so the
    # gradient checks run at the standard initialization state
    Phi, _ = initialize(disc)
    for metric in (MetricKind.l2(), MetricKind.energy_adaptive(),
                   MetricKind.lagrangian(1.0)):
        fd = fd_gradient_check(disc, Phi, metric, trials=2, seed=7)
        ok = fd.worst_errors[1] <= 1e-6 and 1.8 <= fd.order <= 2.2
        report(
            f"gradient check ({metric.kind})", ok,
            f"rel err {fd.worst_errors[1]:.2e}, order {fd.order:.2f}",
        )

    oracle = dense_ground_state(problem, disc.space)
    run_report = solve_run(disc, SolverOptions(method="ea-rgd", tol=1e-10))
    rel = abs(run_report.energy - oracle.energy) / abs(oracle.energy)
    report(
        "solver vs dense ground state",
        run_report.converged and rel <= 1e-9,
        f"rel energy diff {rel:.2e}",
    )

    click.echo("all checks passed" if not failures
               else f"{len(failures)} check(s) failed")
    return EXIT_OK if not failures else 1


# ------------------------------------------------------------------- suites
_SUITES = {
    "1d-beta10": ["bench1d_beta10", "bench1d_beta10_lgr", "bench1d_beta10_rn",
                  "bench1d_beta10_regrn"],
    "1d-beta100": ["bench1d_beta100", "bench1d_beta100_lgr", "bench1d_beta100_rn",
                   "bench1d_beta100_regrn"],
    "1d-beta1000": ["bench1d_beta1000", "bench1d_beta1000_lgr",
                    "bench1d_beta1000_rn", "bench1d_beta1000_regrn"],
    "2d-periodic": ["bench2d_periodic", "bench2d_periodic_lgr",
                    "bench2d_periodic_rn", "bench2d_periodic_regrn"],
    "2d-random": ["bench2d_random"],
}


def bundled_config(name: str) -> Path:
    """Filesystem path of a packaged benchmark configuration."""
    resource = importlib.resources.files("gpeopt") / "configs" / f"{name}.yaml"
    with importlib.resources.as_file(resource) as concrete:
        return Path(concrete)


# ----------------------------------------------------------------------- CLI
def _apply_thread_env() -> None:
    value = os.environ.get("GPEOPT_THREADS")
    if not value:
        return
    try:
        threads = int(value)
        if threads < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(
            f"GPEOPT_THREADS must be a positive integer, got {value!r}"
        ) from None
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)
    try:
        import numba

        numba.set_num_threads(threads)
    except (ImportError, ValueError):  # pragma: no cover - numba always present
        pass


def _run_command(body) -> None:
    try:
        _apply_thread_env()
        code = body()
    except ConfigError as exc:
        for message in exc.messages:
            click.echo(f"config error: {message}", err=True)
        code = EXIT_CONFIG
    except (ModelError, FemError) as exc:
        click.echo(f"config error: {exc}", err=True)
        code = EXIT_CONFIG
    except (LinearSolverError, ManifoldError) as exc:
        click.echo(f"linear-algebra failure: {exc}", err=True)
        code = EXIT_LINALG
    except OptimizerError as exc:
        click.echo(f"run failed: {exc}", err=True)
        code = EXIT_NOT_CONVERGED
    sys.exit(code)


_OVERRIDE_OPTIONS = [
    click.option("--tol", type=float, default=None,
                 help="Override the outer residual tolerance."),
    click.option("--tau", type=float, default=None,
                 help="Override the constant step size."),
    click.option("--method", type=str, default=None,
                 help="Override the solver method id."),
    click.option("--seed", type=int, default=None,
                 help="Override the random-potential seed."),
]


def _with_overrides(fn):
    for option in reversed(_OVERRIDE_OPTIONS):
        fn = option(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="gpeopt")
def main() -> None:
    """Ground states of coupled Gross-Pitaevskii systems by Riemannian descent
    and Newton iterations on quadratic finite elements.

    The environment variable GPEOPT_THREADS caps the thread count used by the
    compiled kernels and any threaded BLAS.
    """


@main.command("solve")
@click.argument("config", type=click.Path())
@_with_overrides
def solve_command(config, tol, tau, method, seed) -> None:
    """Run one configuration and write CSV/field/summary artifacts."""

    def body() -> int:
        cfg = parse_config(
            config, {"tol": tol, "tau": tau, "method": method, "seed": seed}
        )
        return run(cfg)

    _run_command(body)


@main.command("compare")
@click.argument("configs", nargs=-1, required=True, type=click.Path())
@_with_overrides
def compare_command(configs, tol, tau, method, seed) -> None:
    """Run several configs on one shared problem and print a summary table."""

    def body() -> int:
        overrides = {"tol": tol, "tau": tau, "method": method, "seed": seed}
        parsed = [parse_config(path, overrides) for path in configs]
        return compare(parsed)

    _run_command(body)


@main.command("check")
def check_command() -> None:
    """Verify the installation against the brute-force oracles (seconds)."""
    _run_command(check)


@main.command("bench")
@click.argument("suite", type=str)
@_with_overrides
def bench_command(suite, tol, tau, method, seed) -> None:
    """Run a named benchmark suite (see --help for names).

    Suites: 1d-beta10 (seconds), 1d-beta100 / 1d-beta1000 (minutes;
    thousands of descent iterations), 2d-periodic (minutes), 2d-random.
    """

    def body() -> int:
        if suite not in _SUITES:
            raise ConfigError(
                f"unknown suite {suite!r}; available: {', '.join(sorted(_SUITES))}"
            )
        overrides = {"tol": tol, "tau": tau, "method": method, "seed": seed}
        parsed = [
            parse_config(bundled_config(name), overrides)
            for name in _SUITES[suite]
        ]
        return compare(parsed)

    _run_command(body)


if __name__ == "__main__":  # pragma: no cover
    main()
