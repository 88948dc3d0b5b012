"""Problem specification: Hamiltonian/Lagrangian pair, mean-field drift and costs.

All callables are vectorized over a leading batch axis: positions and momenta
arrive as (n, d) arrays and values as (n,) or (n, d).  The shipped default is
the quadratic pair H = |p|^2/2, L = |q|^2/2; user-supplied pairs should be
gated through :func:`legendre_check` at load time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .measure import ConstraintFunctional, EmpiricalMeasure, MeasureLike, integrate, measure_mean

__all__ = [
    "Hamiltonian",
    "Lagrangian",
    "DriftField",
    "MeanFieldCost",
    "ZeroCost",
    "LinearCost",
    "ModelSpec",
    "quadratic_hamiltonian",
    "quadratic_lagrangian",
    "zero_drift",
    "tanh_attraction_drift",
    "legendre_check",
    "LegendreError",
    "particle_running_cost",
    "hessian_pp_eigs",
]


@dataclass(frozen=True)
class Hamiltonian:
    """H(x, p) with its p- and x-gradients and convexity modulus bounds.

    mu_lo and mu_hi bound the eigenvalues of D^2_pp H; mu_lo > 0 is required
    so the Legendre dual is single-valued.
    """

    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dp_h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dx_h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    mu_lo: float = 1.0
    mu_hi: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.mu_lo <= self.mu_hi):
            raise ValueError("need 0 < mu_lo <= mu_hi")


@dataclass(frozen=True)
class Lagrangian:
    l: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dq_l: Callable[[np.ndarray, np.ndarray], np.ndarray]


def quadratic_hamiltonian(shift: float = 0.0) -> Hamiltonian:
    """H(x, p) = |p|^2 / 2 + shift."""
    return Hamiltonian(
        h=lambda x, p: 0.5 * (p**2).sum(axis=1) + shift,
        dp_h=lambda x, p: p,
        dx_h=lambda x, p: np.zeros_like(x),
        mu_lo=1.0,
        mu_hi=1.0,
    )


def quadratic_lagrangian(shift: float = 0.0) -> Lagrangian:
    """L(x, q) = |q|^2 / 2 + shift, the Legendre dual of the quadratic Hamiltonian."""
    return Lagrangian(
        l=lambda x, q: 0.5 * (q**2).sum(axis=1) + shift,
        dq_l=lambda x, q: q,
    )


@dataclass(frozen=True)
class DriftField:
    """Bounded Lipschitz mean-field drift b(x, m).

    fn maps ((n, d) points, measure) -> (n, d).  db_dm is the optional flat
    derivative (y_pts (n, 1), m, x_pts (k, 1)) -> (n, k); it is only consumed
    by the mean-field optimality system and defaults to no measure coupling.
    """

    fn: Callable[[np.ndarray, MeasureLike], np.ndarray]
    bound: float
    lip_x: float = 0.0
    lip_m: float = 0.0
    db_dm: Callable[[np.ndarray, MeasureLike, np.ndarray], np.ndarray] | None = None
    is_zero: bool = False

    def __call__(self, x: np.ndarray, m: MeasureLike) -> np.ndarray:
        return self.fn(x, m)


def zero_drift() -> DriftField:
    return DriftField(fn=lambda x, m: np.zeros_like(x), bound=0.0, is_zero=True)


def tanh_attraction_drift(strength: float = 0.5, scale: float = 1.0) -> DriftField:
    """b(x, m) = strength * tanh((mean(m) - x) / scale); bounded by strength,
    Lipschitz with constant strength/scale in x and in d_1 through the mean."""

    def fn(x: np.ndarray, m: MeasureLike) -> np.ndarray:
        mean = measure_mean(m)
        return strength * np.tanh((mean[None, :] - x) / scale)

    def db_dm(y: np.ndarray, m: MeasureLike, x: np.ndarray) -> np.ndarray:
        mean = measure_mean(m)
        sech2 = 1.0 / np.cosh((mean[None, :] - y) / scale) ** 2
        return (strength / scale) * sech2[:, 0:1] * (x[:, 0] - mean[0])[None, :]

    return DriftField(fn=fn, bound=strength, lip_x=strength / scale,
                      lip_m=strength / scale, db_dm=db_dm)


class MeanFieldCost:
    """Mean-field cost with its flat derivative, normalized to zero mean."""

    def value(self, m: MeasureLike) -> float:
        raise NotImplementedError

    def flat_derivative(self, m: MeasureLike, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ZeroCost(MeanFieldCost):
    def value(self, m: MeasureLike) -> float:
        return 0.0

    def flat_derivative(self, m: MeasureLike, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.zeros(x.shape[0])


@dataclass(frozen=True)
class LinearCost(MeanFieldCost):
    """F(m) = int g dm; flat derivative g(x) - int g dm."""

    g: Callable[[np.ndarray], np.ndarray]

    def value(self, m: MeasureLike) -> float:
        return integrate(self.g, m)

    def flat_derivative(self, m: MeasureLike, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.g(x) - integrate(self.g, m)


@dataclass(frozen=True)
class ModelSpec:
    """One problem instance: dynamics, costs, constraint, and horizon."""

    hamiltonian: Hamiltonian
    lagrangian: Lagrangian
    drift: DriftField
    running_cost: MeanFieldCost
    terminal_cost: MeanFieldCost
    constraint: ConstraintFunctional
    t0: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.t0 < self.T):
            raise ValueError(f"need 0 <= t0 < T, got t0={self.t0}, T={self.T}")


class LegendreError(RuntimeError):
    """Inner Legendre maximization failed to converge; carries the bad sample."""

    def __init__(self, x, q, iterations):
        self.sample = (x, q)
        super().__init__(f"Newton did not converge in {iterations} iterations at x={x}, q={q}")


def _dual_value(h: Hamiltonian, x: np.ndarray, q: np.ndarray, max_iter: int = 100) -> float:
    """sup_p { -p.q - H(x, p) } by damped Newton with finite-difference Hessian."""
    d = x.size
    xb = x[None, :]
    p = -q.copy()  # exact for the quadratic pair, good start in general

    def grad(pv):
        return -(q + h.dp_h(xb, pv[None, :])[0])

    def val(pv):
        return float(-(pv * q).sum() - h.h(xb, pv[None, :])[0])

    g = grad(p)
    fd = 1e-6
    for _ in range(max_iter):
        if np.linalg.norm(g) < 1e-11:
            return val(p)
        hess = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd
            hess[:, j] = (h.dp_h(xb, (p + e)[None, :])[0] - h.dp_h(xb, (p - e)[None, :])[0]) / (2 * fd)
        try:
            step = np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = g / h.mu_hi
        # backtracking on the concave objective
        v0 = val(p)
        lam = 1.0
        for _ in range(40):
            cand = p + lam * step
            if val(cand) >= v0 - 1e-15:
                p = cand
                break
            lam *= 0.5
        else:
            break
        g = grad(p)
    if np.linalg.norm(g) < 1e-8:
        return val(p)
    raise LegendreError(x, q, max_iter)


def legendre_check(h: Hamiltonian, lag: Lagrangian, samples: int = 64, dim: int = 1,
                   radius: float = 2.0, seed: int = 0) -> float:
    """Max duality gap |L(x,q) - sup_p {-p.q - H(x,p)}| over sampled (x, q).

    A consistent pair keeps the gap below 1e-6; run this gate on any
    user-supplied Hamiltonian/Lagrangian plug-in.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-radius, radius, size=(samples, dim))
    qs = rng.uniform(-radius, radius, size=(samples, dim))
    gap = 0.0
    for x, q in zip(xs, qs):
        dual = _dual_value(h, x, q)
        lval = float(lag.l(x[None, :], q[None, :])[0])
        gap = max(gap, abs(lval - dual))
    return gap


def particle_running_cost(state: EmpiricalMeasure, controls: np.ndarray, model: ModelSpec) -> float:
    """Instantaneous N-particle running cost (1/N) sum L(x_i, a_i) + F(mu_hat)."""
    controls = np.asarray(controls, dtype=float)
    if controls.shape != state.points.shape:
        raise ValueError(f"controls shape {controls.shape} != points shape {state.points.shape}")
    lvals = model.lagrangian.l(state.points, controls)
    out = float(lvals.mean()) + model.running_cost.value(state)
    if not np.isfinite(out):
        raise ValueError("running cost is not finite")
    return out


def hessian_pp_eigs(h: Hamiltonian, x: np.ndarray, p: np.ndarray, fd: float = 1e-4) -> np.ndarray:
    """Eigenvalues of the finite-difference D^2_pp H at one (x, p) sample."""
    d = p.size
    xb = x[None, :]
    hess = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = fd
        hess[:, j] = (h.dp_h(xb, (p + e)[None, :])[0] - h.dp_h(xb, (p - e)[None, :])[0]) / (2 * fd)
    hess = 0.5 * (hess + hess.T)
    return np.linalg.eigvalsh(hess)
