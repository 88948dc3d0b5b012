"""Euler-Maruyama simulation of the controlled N-particle system.

The dynamics are dX_i = (b(X_i, mu_hat) + a_i) dt + sqrt(2) dB_i with the
empirical measure mu_hat re-read before each step (simultaneous update).
Running costs use the left-endpoint rule, constraint values are monitored at
grid times only, and every run draws its noise from an RNG seeded by
(master_seed, run_index) so batches are reproducible regardless of worker
count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .measure import EmpiricalMeasure
from .model import ModelSpec

__all__ = [
    "SimulationError",
    "FixedInitial",
    "GaussianInitial",
    "SimConfig",
    "TrajectoryRecord",
    "RunSummary",
    "BatchResult",
    "em_step",
    "simulate",
    "mc_batch",
    "run_rng",
    "worker_count",
]

Policy = Callable[[float, EmpiricalMeasure], np.ndarray]

WORKERS_ENV = "MFCLAB_WORKERS"


class SimulationError(RuntimeError):
    """A run produced a non-finite state; carries the failing step index."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass(frozen=True)
class FixedInitial:
    """Deterministic initial positions shared by every run."""

    points: np.ndarray

    def sample(self, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape != (n, dim):
            raise ValueError(f"initial points shape {pts.shape} != ({n}, {dim})")
        return pts.copy()


@dataclass(frozen=True)
class GaussianInitial:
    """Initial positions drawn i.i.d. N(mean, std^2 I) from the per-run RNG."""

    mean: float = 0.0
    std: float = 1.0

    def sample(self, rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, dim))


InitialState = Union[FixedInitial, GaussianInitial]


@dataclass(frozen=True)
class SimConfig:
    """Particle-simulation parameters; the time grid must align with dt."""

    n_particles: int
    dim: int
    dt: float
    t0: float
    T: float
    seed: int
    initial: InitialState

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        span = self.T - self.t0
        if span <= 0:
            raise ValueError("need t0 < T")
        steps = span / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError(f"(T - t0)/dt = {steps} does not align with the grid")

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def run_rng(master_seed: int, run_index: int) -> np.random.Generator:
    """Independent per-run generator keyed by (master_seed, run_index)."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, run_index)))


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


@dataclass
class TrajectoryRecord:
    """Per-run output: constraint path, stopping index, and cost accounting."""

    times: np.ndarray
    psi_path: np.ndarray
    tau_index: int | None
    running_cost: float
    terminal_cost: float
    control_energy: float
    snapshots: list[tuple[int, EmpiricalMeasure]] = field(default_factory=list)
    max_step_displacement: float = 0.0
    cost_path: np.ndarray | None = None  # accumulated running cost per grid time

    @property
    def total_cost(self) -> float:
        return self.running_cost + self.terminal_cost

    @property
    def tau_time(self) -> float | None:
        if self.tau_index is None:
            return None
        return float(self.times[self.tau_index])


def em_step(state: EmpiricalMeasure, control: np.ndarray, drift, dt: float,
            noise: np.ndarray) -> EmpiricalMeasure:
    """One explicit Euler-Maruyama step; drift sees the pre-step measure."""
    new_pts = _em_step_raw(state.points, control, drift, dt, noise, state, step=0)
    return EmpiricalMeasure(new_pts)


def _em_step_raw(points: np.ndarray, control: np.ndarray, drift, dt: float,
                 noise: np.ndarray, measure, step: int) -> np.ndarray:
    control = np.asarray(control, dtype=float)
    if control.shape != points.shape:
        raise ValueError(f"control shape {control.shape} != state shape {points.shape}")
    b = drift(points, measure) if drift is not None and not getattr(drift, "is_zero", False) else 0.0
    new_pts = points + (b + control) * dt + np.sqrt(2.0 * dt) * noise
    if not np.isfinite(new_pts).all():
        raise SimulationError(step, "non-finite state after step, aborting run")
    return new_pts


def simulate(config: SimConfig, model: ModelSpec, policy: Policy,
             stop_threshold: float | None = None, rng: np.random.Generator | None = None,
             snapshot_every: int | None = None, record_cost_path: bool = False) -> TrajectoryRecord:
    """Simulate one run under a feedback policy, recording costs and crossings.

    The stopping time is recorded (first grid time with Psi >= stop_threshold,
    the initial state included) but the simulation runs to the horizon.
    """
    if rng is None:
        rng = run_rng(config.seed, 0)
    pts = config.initial.sample(rng, config.n_particles, config.dim)
    noise = rng.standard_normal((config.n_steps, config.n_particles, config.dim))
    return _simulate_with_noise(config, model, policy, pts, noise, stop_threshold,
                                snapshot_every, record_cost_path)


def _simulate_with_noise(config: SimConfig, model: ModelSpec, policy: Policy,
                         pts: np.ndarray, noise: np.ndarray,
                         stop_threshold: float | None,
                         snapshot_every: int | None,
                         record_cost_path: bool = False) -> TrajectoryRecord:
    n_steps = config.n_steps
    times = config.times
    psi_path = np.empty(n_steps + 1)
    snapshots: list[tuple[int, EmpiricalMeasure]] = []
    mu = EmpiricalMeasure(pts)
    psi_path[0] = model.constraint.value(mu)
    tau_index = None
    if stop_threshold is not None and psi_path[0] >= stop_threshold:
        tau_index = 0
    if snapshot_every:
        snapshots.append((0, mu))
    run_cost = 0.0
    energy = 0.0
    max_disp = 0.0
    dt = config.dt
    cost_path = np.zeros(n_steps + 1) if record_cost_path else None
    for k in range(n_steps):
        ctrl = np.asarray(policy(float(times[k]), mu), dtype=float)
        lvals = model.lagrangian.l(mu.points, ctrl)
        run_cost += (float(lvals.mean()) + model.running_cost.value(mu)) * dt
        energy += float((ctrl**2).sum(axis=1).mean()) * dt
        new_pts = _em_step_raw(mu.points, ctrl, model.drift, dt, noise[k], mu, step=k)
        step_disp = float(np.sqrt(((new_pts - mu.points) ** 2).sum(axis=1)).mean())
        max_disp = max(max_disp, step_disp)
        mu = EmpiricalMeasure(new_pts)
        psi_path[k + 1] = model.constraint.value(mu)
        if cost_path is not None:
            cost_path[k + 1] = run_cost
        if tau_index is None and stop_threshold is not None and psi_path[k + 1] >= stop_threshold:
            tau_index = k + 1
        if snapshot_every and (k + 1) % snapshot_every == 0:
            snapshots.append((k + 1, mu))
    terminal = model.terminal_cost.value(mu)
    return TrajectoryRecord(
        times=times,
        psi_path=psi_path,
        tau_index=tau_index,
        running_cost=run_cost,
        terminal_cost=terminal,
        control_energy=energy,
        snapshots=snapshots,
        max_step_displacement=max_disp,
        cost_path=cost_path,
    )


@dataclass(frozen=True)
class RunSummary:
    run: int
    total_cost: float
    tau_index: int | None
    tau_time: float | None
    violated: bool
    aborted: bool


@dataclass(frozen=True)
class BatchResult:
    summaries: tuple[RunSummary, ...]
    mean_cost: float
    se_cost: float
    violation_count: int
    aborted_runs: tuple[int, ...]

    @property
    def n_completed(self) -> int:
        return len(self.summaries) - len(self.aborted_runs)


def mc_batch(config: SimConfig, model: ModelSpec, policy: Policy, runs: int,
             stop_threshold: float | None = None, workers: int | None = None,
             keep_records: bool = False) -> BatchResult | tuple[BatchResult, list]:
    """Seeded Monte Carlo batch; aggregation is a fold over run-index order.

    Aborted (non-finite) runs are reported and excluded from the aggregates
    rather than silently resampled.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")

    def one(run: int):
        rng = run_rng(config.seed, run)
        try:
            rec = simulate(config, model, policy, stop_threshold, rng=rng)
        except SimulationError:
            return run, None
        return run, rec

    nw = worker_count(workers)
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(one, range(runs)))
    else:
        results = [one(r) for r in range(runs)]
    results.sort(key=lambda t: t[0])

    summaries = []
    records = []
    costs = []
    aborted = []
    violations = 0
    for run, rec in results:
        if rec is None:
            aborted.append(run)
            summaries.append(RunSummary(run, float("nan"), None, None, False, True))
            continue
        violated = rec.tau_index is not None
        violations += int(violated)
        costs.append(rec.total_cost)
        summaries.append(RunSummary(run, rec.total_cost, rec.tau_index, rec.tau_time, violated, False))
        if keep_records:
            records.append(rec)
    costs = np.asarray(costs)
    mean = float(costs.mean()) if costs.size else float("nan")
    se = float(costs.std(ddof=1) / np.sqrt(costs.size)) if costs.size > 1 else 0.0
    result = BatchResult(
        summaries=tuple(summaries),
        mean_cost=mean,
        se_cost=se,
        violation_count=violations,
        aborted_runs=tuple(aborted),
    )
    if keep_records:
        return result, records
    return result
