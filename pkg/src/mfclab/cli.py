"""Experiment driver: config parsing, subcommands, deterministic CSV artifacts.

Configs are flat text files of dotted keys, one ``section.key = value`` per
line with ``#`` comments; values parse as JSON scalars or lists.  All
randomness flows from the config's master seed, and every output file starts
with comment lines recording the config hash and artifact version, so a rerun
with the same config is byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .measure import (
    EmpiricalMeasure,
    GridMeasure1D,
    LinearConstraint,
    mean_level_constraint,
    soft_abs_constraint,
    wasserstein_1d,
    wasserstein_assignment,
)
from .model import (
    LegendreError,
    LinearCost,
    ModelSpec,
    ZeroCost,
    legendre_check,
    quadratic_hamiltonian,
    quadratic_lagrangian,
    tanh_attraction_drift,
    zero_drift,
)
from .mfsolver import (
    CFLError,
    MfControl,
    NumericalError,
    SpaceTimeGrid,
    heat_apply,
    load_control,
    save_control,
    solve_mfoc,
    stability_sweep,
)
from .particle import GaussianInitial, FixedInitial, SimConfig, mc_batch, simulate, run_rng
from .freeze import PreconditionError, freeze_cost_bound, transfer_batch
from .ldp import ldp_compare

__all__ = ["main", "parse_config", "apply_overrides", "config_hash", "build_model",
           "build_grid", "build_mu0", "build_sim_config", "ConfigError"]


class ConfigError(ValueError):
    """Unusable experiment configuration."""


# ---------------------------------------------------------------------------
# config file handling


def parse_config(path: str | Path) -> dict[str, Any]:
    cfg: dict[str, Any] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        try:
            cfg[key] = json.loads(value)
        except json.JSONDecodeError:
            cfg[key] = value
    return cfg


def apply_overrides(cfg: dict[str, Any], sets: Sequence[str]) -> dict[str, Any]:
    out = dict(cfg)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def config_hash(cfg: dict[str, Any]) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _get(cfg: dict[str, Any], key: str, default=None, required: bool = False):
    if key in cfg:
        return cfg[key]
    if required:
        raise ConfigError(f"missing config key {key!r}")
    return default


# ---------------------------------------------------------------------------
# builders


def build_grid(cfg: dict[str, Any]) -> SpaceTimeGrid:
    return SpaceTimeGrid(
        x_min=float(_get(cfg, "grid.x_min", required=True)),
        x_max=float(_get(cfg, "grid.x_max", required=True)),
        n_cells=int(_get(cfg, "grid.n_cells", required=True)),
        t0=float(_get(cfg, "model.t0", 0.0)),
        T=float(_get(cfg, "model.T", required=True)),
        n_steps=int(_get(cfg, "grid.n_steps", required=True)),
    )


def build_constraint(cfg: dict[str, Any]) -> LinearConstraint:
    kind = _get(cfg, "constraint.kind", "soft_abs")
    if kind == "soft_abs":
        return soft_abs_constraint(
            kappa=float(_get(cfg, "constraint.kappa", required=True)),
            smoothing=float(_get(cfg, "constraint.smoothing", 0.1)),
            c_psi=float(_get(cfg, "constraint.c_psi", 1.0)),
        )
    if kind == "mean_level":
        return mean_level_constraint(kappa=float(_get(cfg, "constraint.kappa", required=True)))
    raise ConfigError(f"unknown constraint.kind {kind!r}")


def build_model(cfg: dict[str, Any]) -> ModelSpec:
    ham_kind = _get(cfg, "model.hamiltonian", "quadratic")
    if ham_kind != "quadratic":
        raise ConfigError(f"unknown model.hamiltonian {ham_kind!r} (plug-ins are code-level)")
    hamiltonian = quadratic_hamiltonian()
    lagrangian = quadratic_lagrangian()
    gap = legendre_check(hamiltonian, lagrangian, samples=8,
                         dim=int(_get(cfg, "particle.dim", 1)))
    if gap > 1e-6:
        raise ConfigError(f"Hamiltonian/Lagrangian pair fails the duality gate: gap {gap:.2e}")

    drift_kind = _get(cfg, "drift.kind", "zero")
    if drift_kind == "zero":
        drift = zero_drift()
    elif drift_kind == "tanh":
        drift = tanh_attraction_drift(
            strength=float(_get(cfg, "drift.strength", 0.5)),
            scale=float(_get(cfg, "drift.scale", 1.0)),
        )
    else:
        raise ConfigError(f"unknown drift.kind {drift_kind!r}")

    def build_cost(prefix: str):
        kind = _get(cfg, f"{prefix}.kind", "zero")
        if kind == "zero":
            return ZeroCost()
        if kind == "linear_tanh":
            scale = float(_get(cfg, f"{prefix}.scale", 1.0))
            return LinearCost(lambda x: scale * np.tanh(x[:, 0]))
        raise ConfigError(f"unknown {prefix}.kind {kind!r}")

    return ModelSpec(
        hamiltonian=hamiltonian,
        lagrangian=lagrangian,
        drift=drift,
        running_cost=build_cost("running_cost"),
        terminal_cost=build_cost("terminal_cost"),
        constraint=build_constraint(cfg),
        t0=float(_get(cfg, "model.t0", 0.0)),
        T=float(_get(cfg, "model.T", required=True)),
    )


def build_mu0(cfg: dict[str, Any], grid: SpaceTimeGrid) -> GridMeasure1D:
    return GridMeasure1D.gaussian(
        grid.x_min, grid.x_max, grid.n_cells,
        mean=float(_get(cfg, "mu0.mean", 0.0)),
        std=float(_get(cfg, "mu0.std", required=True)),
    )


def build_sim_config(cfg: dict[str, Any], n_particles: int,
                     mu0: GridMeasure1D | None = None) -> SimConfig:
    dim = int(_get(cfg, "particle.dim", 1))
    init_kind = _get(cfg, "particle.initial", "quantile")
    if init_kind == "quantile":
        if mu0 is None or dim != 1:
            raise ConfigError("quantile initialization needs a 1D mu0 grid measure")
        initial = FixedInitial(mu0.quantile_points(n_particles))
    elif init_kind == "gaussian":
        initial = GaussianInitial(
            mean=float(_get(cfg, "mu0.mean", 0.0)),
            std=float(_get(cfg, "mu0.std", required=True)),
        )
    else:
        raise ConfigError(f"unknown particle.initial {init_kind!r}")
    seed = _get(cfg, "particle.seed", None)
    if seed is None:
        raise ConfigError("particle.seed is required (no wall-clock default)")
    return SimConfig(
        n_particles=n_particles,
        dim=dim,
        dt=float(_get(cfg, "particle.dt", required=True)),
        t0=float(_get(cfg, "model.t0", 0.0)),
        T=float(_get(cfg, "model.T", required=True)),
        seed=int(seed),
        initial=initial,
    )


def build_policy(cfg: dict[str, Any], out_dir: Path) -> Callable:
    name = _get(cfg, "policy.kind", "zero")
    if name == "zero":
        return lambda t, mu: np.zeros_like(mu.points)
    if name == "constant":
        vec = np.asarray(_get(cfg, "policy.vector", required=True), dtype=float)
        return lambda t, mu: np.tile(vec, (mu.n, 1))
    if name == "mf-control":
        path = Path(_get(cfg, "policy.control_file", required=True))
        if not path.is_absolute():
            path = out_dir / path
        ctrl = load_control(path)
        return lambda t, mu: ctrl(t, mu.points)
    raise ConfigError(f"unknown policy.kind {name!r}")


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, cfg: dict[str, Any], columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# mfclab {__version__}\n")
        fh.write(f"# config {config_hash(cfg)}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _solver_kw(cfg: dict[str, Any]) -> dict[str, Any]:
    kw = {}
    if "solver.omega" in cfg:
        kw["omega"] = float(cfg["solver.omega"])
    if "solver.tol_fp" in cfg:
        kw["tol_fp"] = float(cfg["solver.tol_fp"])
    if "solver.k_max" in cfg:
        kw["k_max"] = int(cfg["solver.k_max"])
    return kw


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve_mf(cfg: dict[str, Any], out_dir: Path) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    mu0 = build_mu0(cfg, grid)
    delta = float(_get(cfg, "solver.delta", required=True))
    eps = float(_get(cfg, "solver.eps", 5e-4))
    sol = solve_mfoc(model, mu0, -delta, eps, grid, **_solver_kw(cfg))
    write_csv(out_dir / "mf_summary.csv", cfg,
              ["delta", "U", "iterations", "converged", "fixed_point_gap", "exclusion_gap",
               "terminal_exclusion", "constraint_max", "boundary_mass", "alpha_sup", "alpha_lip"],
              [[delta, sol.value, sol.iterations, int(sol.converged),
                sol.residuals["fixed_point_gap"], sol.residuals["exclusion_gap"],
                sol.residuals["terminal_exclusion"], sol.residuals["constraint_max"],
                sol.residuals["boundary_mass"], sol.residuals["alpha_sup"],
                sol.residuals["alpha_lip"]]])
    ctrl = MfControl.from_solution(sol)
    save_control(out_dir / "mf_control.csv", ctrl,
                 header_lines=[f"mfclab {__version__}", f"config {config_hash(cfg)}"])
    every = int(_get(cfg, "output.slice_every", 10))
    rows = []
    for k in range(0, grid.n_steps + 1, every):
        t = grid.times[k]
        nu_k = sol.value_field.nu[k]
        for j, x in enumerate(grid.centers):
            rows.append([t, x, sol.value_field.u[k, j], sol.value_field.du[k, j],
                         sol.flow[k, j], sol.alpha[k, j], nu_k])
    write_csv(out_dir / "mf_solution.csv", cfg,
              ["t", "x", "u", "du", "density", "alpha", "nu"], rows)
    return 0 if sol.converged else 2


def cmd_stability(cfg: dict[str, Any], out_dir: Path) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    mu0 = build_mu0(cfg, grid)
    deltas = [float(d) for d in _get(cfg, "solver.deltas", required=True)]
    eps = float(_get(cfg, "solver.eps", 5e-4))
    rows, _sols = stability_sweep(model, mu0, deltas, eps, grid, **_solver_kw(cfg))
    write_csv(out_dir / "stability.csv", cfg,
              ["delta", "U", "converged", "iterations", "exclusion_gap", "constraint_max"],
              [[r.delta, r.value, int(r.converged), r.iterations, r.exclusion_gap,
                r.constraint_max] for r in rows])
    return 0 if all(r.converged for r in rows) else 2


def cmd_simulate(cfg: dict[str, Any], out_dir: Path, dump_trajectories: bool) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    mu0 = build_mu0(cfg, grid) if int(_get(cfg, "particle.dim", 1)) == 1 else None
    n = int(_get(cfg, "particle.n", required=True))
    runs = int(_get(cfg, "particle.runs", required=True))
    config = build_sim_config(cfg, n, mu0)
    policy = build_policy(cfg, out_dir)
    threshold = _get(cfg, "particle.stop_threshold", None)
    threshold = float(threshold) if threshold is not None else None
    result = mc_batch(config, model, policy, runs, stop_threshold=threshold)
    write_csv(out_dir / "simulate_summary.csv", cfg,
              ["runs", "mean_cost", "se_cost", "violations", "aborted"],
              [[runs, result.mean_cost, result.se_cost, result.violation_count,
                len(result.aborted_runs)]])
    write_csv(out_dir / "simulate_runs.csv", cfg,
              ["run", "total_cost", "tau_index", "tau_time", "violated", "aborted"],
              [[s.run, s.total_cost, -1 if s.tau_index is None else s.tau_index,
                float("nan") if s.tau_time is None else s.tau_time,
                int(s.violated), int(s.aborted)] for s in result.summaries])
    if dump_trajectories:
        _dump_trajectories(cfg, out_dir, config, model, policy, runs, threshold)
    return 0


def _dump_trajectories(cfg, out_dir: Path, config: SimConfig, model, policy, runs, threshold):
    """One record per step per run, line-delimited JSON."""
    path = out_dir / "trajectories.ndjson"
    with open(path, "w") as fh:
        fh.write(json.dumps({"mfclab": __version__, "config": config_hash(cfg)}) + "\n")
        for run in range(runs):
            rec = simulate(config, model, policy, threshold, rng=run_rng(config.seed, run),
                           record_cost_path=True)
            for step, t in enumerate(rec.times):
                fh.write(json.dumps({
                    "run": run, "step": step, "time": float(t),
                    "psi": float(rec.psi_path[step]),
                    "cost_so_far": float(rec.cost_path[step]),
                }) + "\n")


def cmd_transfer(cfg: dict[str, Any], out_dir: Path) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    mu0 = build_mu0(cfg, grid)
    delta = float(_get(cfg, "solver.delta", required=True))
    eps = float(_get(cfg, "solver.eps", 5e-4))
    control_src = _get(cfg, "transfer.control", "auto")
    if control_src == "auto":
        sol = solve_mfoc(model, mu0, -delta, eps, grid, **_solver_kw(cfg))
        if not sol.converged:
            print("mean-field solve did not converge", file=sys.stderr)
            return 2
        u_delta = sol.value
        ctrl = MfControl.from_solution(sol)
    else:
        path = Path(control_src)
        ctrl = load_control(path if path.is_absolute() else out_dir / path)
        u_delta = float(_get(cfg, "transfer.u_delta", required=True))
    alpha = lambda t, pts: ctrl(t, pts)
    runs = int(_get(cfg, "particle.runs", required=True))
    n_list = [int(n) for n in _get(cfg, "particle.n_list", required=True)]
    rows = []
    diag_rows = []
    for n in n_list:
        config = build_sim_config(cfg, n, mu0)
        batch = transfer_batch(config, model, alpha, delta, runs)
        gap = abs(batch.mean_cost - u_delta)
        rows.append([n, batch.mean_cost, batch.se_cost, batch.mean_tau_gap, u_delta, gap])
        for run, rec in enumerate(batch.records):
            diag_rows.append([
                n, run, float("nan") if rec.tau_time is None else rec.tau_time,
                rec.max_ratio, -rec.max_psi, rec.post_tau_energy,
                freeze_cost_bound(rec, config, model.drift.bound),
            ])
    write_csv(out_dir / "transfer.csv", cfg,
              ["N", "mean_J", "se", "E_tau_gap", "U_delta", "gap"], rows)
    write_csv(out_dir / "freeze_diagnostics.csv", cfg,
              ["N", "run", "tau", "max_ratio", "min_margin", "post_tau_energy", "bound"],
              diag_rows)
    return 0


def cmd_ldp(cfg: dict[str, Any], out_dir: Path) -> int:
    grid = build_grid(cfg)
    model = build_model(cfg)
    mu0 = build_mu0(cfg, grid)
    n_list = [int(n) for n in _get(cfg, "ldp.n_list", required=True)]
    report = ldp_compare(
        model, mu0, grid,
        n_list=n_list,
        master_seed=int(_get(cfg, "particle.seed", required=True)),
        dt=float(_get(cfg, "particle.dt", required=True)),
        ref_deltas=[float(d) for d in _get(cfg, "solver.deltas", required=True)],
        penalty_eps=float(_get(cfg, "solver.eps", 5e-4)),
        pilot_runs=int(_get(cfg, "ldp.pilot_runs", 400)),
        target_successes=int(_get(cfg, "ldp.target_successes", 100)),
        max_runs=int(_get(cfg, "ldp.max_runs", 200000)),
        **_solver_kw(cfg),
    )
    write_csv(out_dir / "ldp.csv", cfg,
              ["N", "M", "v_hat", "ci_lo", "ci_hi", "rate", "rate_lo", "rate_hi", "U_ref", "gap"],
              [[r.n_particles, r.runs, r.v_hat, r.ci_lo, r.ci_hi, r.rate, r.rate_lo,
                r.rate_hi, r.u_ref, r.gap] for r in report.rows])
    write_csv(out_dir / "ldp_sweep.csv", cfg,
              ["delta", "U", "converged", "iterations", "exclusion_gap", "constraint_max"],
              [[r.delta, r.value, int(r.converged), r.iterations, r.exclusion_gap,
                r.constraint_max] for r in report.sweep])
    return 0


def cmd_selftest(cfg: dict[str, Any], out_dir: Path) -> int:
    """Quick oracle suite; prints one line per check."""
    failures = 0
    rng = np.random.default_rng(int(_get(cfg, "particle.seed", 1234)))

    def check(name: str, ok: bool):
        nonlocal failures
        print(f"[selftest] {name}: {'PASS' if ok else 'FAIL'}")
        failures += 0 if ok else 1

    gap = legendre_check(quadratic_hamiltonian(), quadratic_lagrangian(), 32, dim=2)
    check("legendre duality gap < 1e-12", gap < 1e-12)

    from scipy.optimize import linear_sum_assignment
    worst = 0.0
    for _ in range(50):
        x, y = rng.normal(size=8), rng.normal(size=8)
        cost = np.abs(x[:, None] - y[None, :])
        r_, c_ = linear_sum_assignment(cost)
        worst = max(worst, abs(wasserstein_1d(x, y, 1) - cost[r_, c_].sum() / 8))
    check("1D quantile distance vs assignment LP < 1e-9", worst < 1e-9)

    pts = rng.normal(size=(6, 2))
    shift = wasserstein_assignment(EmpiricalMeasure(pts), EmpiricalMeasure(pts + [1.0, 2.0]), 2)
    check("matching distance of a translation", abs(shift - np.hypot(1.0, 2.0)) < 1e-12)

    dx = 12.0 / 400
    x = -6.0 + (np.arange(400) + 0.5) * dx
    out = heat_apply(x**2, 0.1, dx)
    check("heat semigroup moment oracle", np.abs(out[100:300] - (x[100:300]**2 + 0.2)).max() < 1e-6)

    from .mfsolver import fp_forward
    g100 = SpaceTimeGrid(-6, 6, 400, 0.0, 0.1, 100)
    mu = GridMeasure1D.gaussian(-6, 6, 400, 0.0, 0.5)
    res = fp_forward(mu, np.zeros((100, 400)), g100)
    mass_err = abs(res.densities[-1].sum() * g100.dx - 1.0)
    check("conservative transport mass error < 1e-12", mass_err < 1e-12)
    var = GridMeasure1D(-6, 6, res.densities[-1]).variance()
    check("diffusion variance growth oracle", abs(var - (0.25 + 0.2)) / (0.25 + 0.2) < 1e-3)

    return 0 if failures == 0 else 2


COMMANDS = {
    "solve-mf": cmd_solve_mf,
    "stability": cmd_stability,
    "simulate": cmd_simulate,
    "transfer": cmd_transfer,
    "ldp": cmd_ldp,
    "selftest": cmd_selftest,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mfclab",
                                     description="constrained mean-field control laboratory")
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("config", help="experiment config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
    parser.add_argument("--out-dir", default=None, help="output directory")
    parser.add_argument("--dump-trajectories", action="store_true",
                        help="write per-step trajectory records (simulate)")
    args = parser.parse_args(argv)

    try:
        cfg = apply_overrides(parse_config(args.config), args.set)
        out_dir = Path(args.out_dir or _get(cfg, "output.dir", "out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.subcommand == "simulate":
            return cmd_simulate(cfg, out_dir, args.dump_trajectories)
        return COMMANDS[args.subcommand](cfg, out_dir)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, CFLError, PreconditionError, LegendreError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
