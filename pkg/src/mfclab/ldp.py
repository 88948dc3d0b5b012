"""Rare-event survival estimation and the exit-rate identity.

For the uncontrolled particle system, v^N(t) is the probability that the
empirical constraint value stays strictly negative at every grid time up to
t.  The logarithmic transform -(2/N) log v^N equals the value of the
quadratic-cost constrained control problem, so the Monte Carlo rate estimate
can be compared with the mean-field value from the grid solver at a vanishing
constraint margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .measure import ConstraintFunctional, EmpiricalMeasure, GridMeasure1D, LinearConstraint
from .model import DriftField, ModelSpec
from .mfsolver import SpaceTimeGrid, stability_sweep
from .particle import SimConfig

__all__ = [
    "SurvivalEstimate",
    "RateEstimate",
    "LdpRow",
    "LdpReport",
    "wilson_interval",
    "estimate_survival",
    "rate_estimate",
    "pilot_sized_runs",
    "ldp_compare",
]

CHUNK = 2048  # fixed batching unit so estimates do not depend on memory limits


def wilson_interval(successes: int, runs: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    p = successes / runs
    denom = 1.0 + z * z / runs
    center = (p + z * z / (2 * runs)) / denom
    half = z * math.sqrt(p * (1.0 - p) / runs + z * z / (4 * runs * runs)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == runs else min(1.0, center + half)
    return lo, hi


@dataclass(frozen=True)
class SurvivalEstimate:
    v_hat: float
    ci_lo: float
    ci_hi: float
    successes: int
    runs: int

    @property
    def rate_estimable(self) -> bool:
        return self.successes > 0


def _psi_values(psi: ConstraintFunctional, points: np.ndarray) -> np.ndarray:
    """Psi(mu_hat) for a batch of clouds, shape (batch, N, d) -> (batch,)."""
    if isinstance(psi, LinearConstraint):
        b, n, d = points.shape
        vals = psi.psi(points.reshape(b * n, d)).reshape(b, n)
        return vals.mean(axis=1) - psi.kappa
    return np.array([psi.value(EmpiricalMeasure(cloud)) for cloud in points])


def estimate_survival(config: SimConfig, drift: DriftField, psi: ConstraintFunctional,
                      horizon: float, runs: int) -> SurvivalEstimate:
    """Monte Carlo survival probability of the uncontrolled system.

    A run survives if Psi(mu_hat) < 0 at every grid time in [t0, horizon],
    the initial state included.  Runs are simulated in fixed-size chunks with
    chunk-indexed RNG streams, so the estimate depends only on the master
    seed.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    span = horizon - config.t0
    if span <= 0 or span > config.T + 1e-12:
        raise ValueError("horizon must lie in (t0, T]")
    n_steps = int(round(span / config.dt))
    n, d = config.n_particles, config.dim
    root = math.sqrt(2.0 * config.dt)
    successes = 0
    done = 0
    chunk_index = 0
    zero_drift = getattr(drift, "is_zero", False)
    while done < runs:
        b = min(CHUNK, runs - done)
        # stream tag 7 separates survival chunks from per-run simulation streams
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 7, chunk_index)))
        pts = np.stack([config.initial.sample(rng, n, d) for _ in range(b)])
        psi0 = _psi_values(psi, pts)
        if not (psi0 < 0.0).all():
            raise ValueError(f"need Psi(mu_hat_0) < 0 in every run, worst {psi0.max():.6f}")
        alive = np.ones(b, dtype=bool)
        for _ in range(n_steps):
            noise = rng.standard_normal((b, n, d))
            if zero_drift:
                pts = pts + root * noise
            else:
                bvals = np.stack([drift(pts[i], EmpiricalMeasure(pts[i])) for i in range(b)])
                pts = pts + bvals * config.dt + root * noise
            alive &= _psi_values(psi, pts) < 0.0
        successes += int(alive.sum())
        done += b
        chunk_index += 1
    lo, hi = wilson_interval(successes, runs)
    return SurvivalEstimate(v_hat=successes / runs, ci_lo=lo, ci_hi=hi,
                            successes=successes, runs=runs)


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    rate_lo: float
    rate_hi: float


def rate_estimate(survival: SurvivalEstimate | float, n_particles: int,
                  interval: tuple[float, float] | None = None) -> RateEstimate:
    """Exit-rate estimate -(2/N) log v_hat with the interval mapped monotonically."""
    if isinstance(survival, SurvivalEstimate):
        v = survival.v_hat
        interval = (survival.ci_lo, survival.ci_hi)
    else:
        v = float(survival)
    if v <= 0.0:
        raise ValueError("rate undefined: v_hat = 0; increase runs or decrease N")
    scale = -2.0 / n_particles
    rate = scale * math.log(v)
    if interval is None:
        return RateEstimate(rate, rate, rate)
    lo, hi = interval
    rate_hi = scale * math.log(lo) if lo > 0.0 else float("inf")
    rate_lo = scale * math.log(hi) if hi > 0.0 else float("inf")
    return RateEstimate(rate=rate, rate_lo=rate_lo, rate_hi=rate_hi)


def pilot_sized_runs(config: SimConfig, drift: DriftField, psi: ConstraintFunctional,
                     horizon: float, pilot_runs: int = 400, target_successes: int = 100,
                     max_runs: int = 200_000) -> int:
    """Size the main batch so roughly target_successes survivals are expected."""
    pilot = estimate_survival(config, drift, psi, horizon, pilot_runs)
    v_prior = max(pilot.v_hat, 2.0 / pilot_runs)
    return int(np.clip(math.ceil(target_successes / v_prior), pilot_runs, max_runs))


@dataclass(frozen=True)
class LdpRow:
    n_particles: int
    runs: int
    v_hat: float
    ci_lo: float
    ci_hi: float
    rate: float
    rate_lo: float
    rate_hi: float
    u_ref: float
    gap: float


@dataclass(frozen=True)
class LdpReport:
    rows: tuple[LdpRow, ...]
    u_ref: float
    ref_delta: float
    sweep: tuple


def _check_specialization(model: ModelSpec) -> None:
    """The rate identity needs L = |q|^2/2 and zero mean-field costs."""
    probe_x = np.zeros((3, 1))
    probe_q = np.array([[0.5], [-1.0], [2.0]])
    lvals = model.lagrangian.l(probe_x, probe_q)
    if not np.allclose(lvals, 0.5 * probe_q[:, 0] ** 2, atol=1e-12):
        raise ValueError("rate identity requires the quadratic Lagrangian |q|^2/2")
    mu_probe = EmpiricalMeasure(np.array([[0.0], [1.0]]))
    if model.running_cost.value(mu_probe) != 0.0 or model.terminal_cost.value(mu_probe) != 0.0:
        raise ValueError("rate identity requires zero mean-field costs F = G = 0")


def ldp_compare(model: ModelSpec, mu0: GridMeasure1D, grid: SpaceTimeGrid,
                n_list: Sequence[int], master_seed: int, dt: float,
                ref_deltas: Sequence[float], penalty_eps: float,
                pilot_runs: int = 400, target_successes: int = 100,
                max_runs: int = 200_000, fixed_runs: int | None = None,
                **solver_kw) -> LdpReport:
    """Compare Monte Carlo exit rates against the mean-field value.

    The reference value U is taken at the smallest margin delta for which the
    grid solver converges (the stability sweep is attached to the report);
    per N, the batch is sized by pilot runs unless fixed_runs is given.
    """
    _check_specialization(model)
    psi = model.constraint
    rows_sweep, sols = stability_sweep(model, mu0, ref_deltas, penalty_eps, grid, **solver_kw)
    converged = [r for r in rows_sweep if r.converged]
    if not converged:
        raise RuntimeError("no converged reference solve in the stability sweep")
    ref = min(converged, key=lambda r: r.delta)
    u_ref = ref.value

    rows = []
    for n in n_list:
        points = mu0.quantile_points(n)
        config = SimConfig(n_particles=n, dim=1, dt=dt, t0=grid.t0, T=grid.T,
                           seed=master_seed + n, initial=_fixed(points))
        runs = fixed_runs or pilot_sized_runs(config, model.drift, psi, grid.T,
                                              pilot_runs, target_successes, max_runs)
        est = estimate_survival(config, model.drift, psi, grid.T, runs)
        if est.successes == 0:
            raise RuntimeError(
                f"rate not estimable at N={n}: no surviving runs; increase runs or decrease N")
        rt = rate_estimate(est, n)
        rows.append(LdpRow(
            n_particles=n, runs=runs, v_hat=est.v_hat, ci_lo=est.ci_lo, ci_hi=est.ci_hi,
            rate=rt.rate, rate_lo=rt.rate_lo, rate_hi=rt.rate_hi,
            u_ref=u_ref, gap=abs(rt.rate - u_ref),
        ))
    return LdpReport(rows=tuple(rows), u_ref=u_ref, ref_delta=ref.delta,
                     sweep=tuple(rows_sweep))


def _fixed(points: np.ndarray):
    from .particle import FixedInitial

    return FixedInitial(points)
