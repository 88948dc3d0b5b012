"""Confinement feedback control and the admissible-control transfer construction.

Once the empirical constraint value reaches -delta/2 the controller freezes
the cloud near its state at the stopping time tau: every particle switches to
the feedback

    beta_i = 4 (X_i - A_i) / (sum_j |X_j - A_j|^2 - r^2 N)
             - (2 d / r^2) (X_i - A_i) - b(X_i, mu_hat),

with anchor A = X_tau and radius r = delta / (4 C_Psi).  The denominator is
negative strictly inside the confinement ball, so the first term is a log
barrier pushing back toward the anchor.  The expected control energy spent
after tau admits the explicit bound evaluated by :func:`freeze_cost_bound`.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measure import EmpiricalMeasure
from .model import ModelSpec
from .particle import SimConfig, TrajectoryRecord, _em_step_raw, run_rng, worker_count

__all__ = [
    "ConfinementError",
    "PreconditionError",
    "FreezeParams",
    "TransferRecord",
    "TransferBatch",
    "freeze_feedback",
    "transfer_control",
    "transfer_batch",
    "freeze_cost_bound",
    "batch_cost_bound",
]

RATIO_GUARD = 1.0 - 1e-9


class ConfinementError(RuntimeError):
    """Confinement ball left entirely (denominator >= 0); carries the ratio."""

    def __init__(self, ratio: float):
        self.ratio = ratio
        super().__init__(f"confinement violated: (1/N) sum |X - anchor|^2 / r^2 = {ratio:.6f} >= 1")


class PreconditionError(ValueError):
    """Initial state does not satisfy the strict constraint margin."""


@dataclass
class FreezeParams:
    """Margin delta, Lipschitz constant C_Psi, radius r = delta/(4 C_Psi), anchor.

    The anchor is per-run mutable state captured exactly once, at the first
    grid time where Psi(mu_hat) >= -delta/2 (post-step state).  clamp_count
    tracks near-boundary radial clamps applied before evaluating the feedback.
    """

    delta: float
    c_psi: float
    anchor: np.ndarray | None = None
    clamp_count: int = 0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.c_psi <= 0:
            raise ValueError("c_psi must be positive")

    @property
    def r(self) -> float:
        return self.delta / (4.0 * self.c_psi)

    def set_anchor(self, points: np.ndarray) -> None:
        if self.anchor is not None:
            raise RuntimeError("anchor already captured")
        self.anchor = np.array(points, dtype=float, copy=True)


HARD_VIOLATION_RATIO = 1.25


def freeze_feedback(state: EmpiricalMeasure, params: FreezeParams, drift) -> np.ndarray:
    """Evaluate the confinement feedback at the current state.

    Requires the cloud strictly inside the ball sum_j |X_j - A_j|^2 < r^2 N;
    the boundary itself is a hard error.  Within the guard layer below the
    boundary the displacement is clamped radially before evaluation (the
    continuous-time dynamics never reach the boundary; the discretized ones
    can graze it) and the event is counted.
    """
    if params.anchor is None:
        raise RuntimeError("freeze_feedback called before the anchor was captured")
    return _freeze_feedback_raw(state.points, state, params, drift, RATIO_GUARD, strict=True)


def _freeze_feedback_raw(points: np.ndarray, measure, params: FreezeParams, drift,
                         guard_ratio: float, strict: bool) -> np.ndarray:
    n, d = points.shape
    r = params.r
    disp = points - params.anchor
    s = float((disp * disp).sum())
    cap = r * r * n
    ratio = s / cap
    if ratio >= (1.0 if strict else HARD_VIOLATION_RATIO):
        raise ConfinementError(ratio)
    if ratio > guard_ratio:
        # a single Gaussian step can cross the log barrier no matter how small
        # dt is; evaluating beta at the clamped radius keeps the restoring
        # kick strong but bounded, and recovers the continuum guard as dt -> 0
        disp = disp * np.sqrt(guard_ratio / ratio)
        s = float((disp * disp).sum())
        params.clamp_count += 1
    beta = 4.0 * disp / (s - cap) - (2.0 * d / (r * r)) * disp
    if drift is not None and not getattr(drift, "is_zero", False):
        beta = beta - drift(points, measure)
    if not np.isfinite(beta).all():
        raise ConfinementError(ratio)
    return beta


@dataclass
class TransferRecord:
    """One transfer run: trajectory plus confinement diagnostics."""

    trajectory: TrajectoryRecord
    delta: float
    r: float
    tau_index: int | None
    tau_time: float | None
    max_ratio: float
    max_psi: float
    post_tau_energy: float
    overshoot: float
    clamp_count: int
    slack: float  # max over steps of the mean single-step displacement, a d_1 bound

    @property
    def total_cost(self) -> float:
        return self.trajectory.total_cost

    def tau_gap(self, T: float) -> float:
        """T - T /\\ tau, the length of the frozen tail."""
        if self.tau_time is None:
            return 0.0
        return T - min(T, self.tau_time)


def transfer_control(config: SimConfig, model: ModelSpec,
                     alpha: Callable[[float, np.ndarray], np.ndarray], delta: float,
                     rng: np.random.Generator | None = None) -> TransferRecord:
    """Run the admissible-control construction: alpha until tau, freeze after.

    tau is the first grid time with Psi(mu_hat) >= -delta/2.  The anchor is
    the post-step state at the crossing step.  Requires Psi(mu_hat_0) < -delta
    strictly.
    """
    if rng is None:
        rng = run_rng(config.seed, 0)
    pts = config.initial.sample(rng, config.n_particles, config.dim)
    noise = rng.standard_normal((config.n_steps, config.n_particles, config.dim))
    return _transfer_with_noise(config, model, alpha, delta, pts, noise)


def _transfer_with_noise(config: SimConfig, model: ModelSpec, alpha, delta: float,
                         pts: np.ndarray, noise: np.ndarray) -> TransferRecord:
    constraint = model.constraint
    params = FreezeParams(delta=delta, c_psi=constraint.c_psi)
    # dt-aware guard: thick enough that the clamped barrier kick stays a
    # bounded fraction of the displacement over one step
    guard = 1.0 - max(1e-9, 8.0 * config.dt / (params.r**2 * config.n_particles))
    n_steps = config.n_steps
    times = config.times
    dt = config.dt
    mu = EmpiricalMeasure(pts)
    psi_path = np.empty(n_steps + 1)
    psi_path[0] = constraint.value(mu)
    if not psi_path[0] < -delta:
        raise PreconditionError(
            f"need Psi(mu_0) < -delta, got Psi = {psi_path[0]:.6f}, -delta = {-delta:.6f}")
    run_cost = 0.0
    energy = 0.0
    post_energy = 0.0
    max_disp = 0.0
    max_ratio = 0.0
    overshoot = 0.0
    tau_index: int | None = None
    lag = model.lagrangian
    for k in range(n_steps):
        frozen = tau_index is not None
        if frozen:
            ctrl = _freeze_feedback_raw(mu.points, mu, params, model.drift, guard, strict=False)
        else:
            ctrl = np.asarray(alpha(float(times[k]), mu.points), dtype=float)
        run_cost += (float(lag.l(mu.points, ctrl).mean()) + model.running_cost.value(mu)) * dt
        step_energy = float((ctrl**2).sum(axis=1).mean()) * dt
        energy += step_energy
        if frozen:
            post_energy += step_energy
        new_pts = _em_step_raw(mu.points, ctrl, model.drift, dt, noise[k], mu, step=k)
        max_disp = max(max_disp, float(np.sqrt(((new_pts - mu.points) ** 2).sum(axis=1)).mean()))
        mu = EmpiricalMeasure(new_pts)
        psi_path[k + 1] = constraint.value(mu)
        if tau_index is None:
            if psi_path[k + 1] >= -delta / 2.0:
                tau_index = k + 1
                params.set_anchor(mu.points)
                # a discrete step can jump past -delta/2; the run is treated as
                # stopped here and the overshoot reported
                overshoot = psi_path[k + 1] + delta / 2.0
        else:
            disp = mu.points - params.anchor
            ratio = float((disp * disp).sum()) / (params.r**2 * config.n_particles)
            max_ratio = max(max_ratio, ratio)
    terminal = model.terminal_cost.value(mu)
    traj = TrajectoryRecord(
        times=times,
        psi_path=psi_path,
        tau_index=tau_index,
        running_cost=run_cost,
        terminal_cost=terminal,
        control_energy=energy,
        max_step_displacement=max_disp,
    )
    return TransferRecord(
        trajectory=traj,
        delta=delta,
        r=params.r,
        tau_index=tau_index,
        tau_time=None if tau_index is None else float(times[tau_index]),
        max_ratio=max_ratio,
        max_psi=float(psi_path.max()),
        post_tau_energy=post_energy,
        overshoot=overshoot,
        clamp_count=params.clamp_count,
        slack=max_disp,
    )


@dataclass(frozen=True)
class TransferBatch:
    records: tuple[TransferRecord, ...]
    mean_cost: float
    se_cost: float
    mean_tau_gap: float
    worst_ratio: float
    max_psi: float
    stop_count: int

    @property
    def runs(self) -> int:
        return len(self.records)


def transfer_batch(config: SimConfig, model: ModelSpec, alpha, delta: float, runs: int,
                   workers: int | None = None) -> TransferBatch:
    """Seeded batch of transfer runs with order-independent aggregation."""

    def one(run: int):
        rng = run_rng(config.seed, run)
        return run, transfer_control(config, model, alpha, delta, rng=rng)

    nw = worker_count(workers)
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            results = list(pool.map(one, range(runs)))
    else:
        results = [one(r) for r in range(runs)]
    results.sort(key=lambda t: t[0])
    records = tuple(rec for _, rec in results)
    costs = np.array([rec.total_cost for rec in records])
    gaps = np.array([rec.tau_gap(config.T) for rec in records])
    return TransferBatch(
        records=records,
        mean_cost=float(costs.mean()),
        se_cost=float(costs.std(ddof=1) / np.sqrt(costs.size)) if costs.size > 1 else 0.0,
        mean_tau_gap=float(gaps.mean()),
        worst_ratio=max((rec.max_ratio for rec in records), default=0.0),
        max_psi=max(rec.max_psi for rec in records),
        stop_count=sum(rec.tau_index is not None for rec in records),
    )


def freeze_cost_bound(record: TransferRecord, config: SimConfig, b_bound: float) -> float:
    """Explicit bound on the post-tau control energy for one run.

    Evaluates 32 d e^s / (r^2 N) + (16 d^2 / r^2 + 2 ||b||_inf^2) s with
    s = T - T /\\ tau.  Runs that never stop spend nothing after tau and
    contribute a zero bound.
    """
    s = record.tau_gap(config.T)
    if s <= 0.0:
        return 0.0
    d = config.dim
    n = config.n_particles
    r = record.r
    return (32.0 * d * np.exp(s) / (r * r * n)
            + (16.0 * d * d / (r * r) + 2.0 * b_bound**2) * s)


def batch_cost_bound(records: Sequence[TransferRecord], config: SimConfig, b_bound: float) -> float:
    """Batch-average bound, the Monte Carlo analog of the expectation bound."""
    return float(np.mean([freeze_cost_bound(rec, config, b_bound) for rec in records]))
