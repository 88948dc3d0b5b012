"""Probability-measure carriers and exact transport distances.

Two measure representations are used throughout:

* :class:`EmpiricalMeasure` -- N uniformly-weighted point masses in R^d,
  the state of the interacting-particle system.
* :class:`GridMeasure1D` -- a piecewise-constant probability density on a
  truncated interval, the state of the 1D mean-field solver.

On top of these live the constraint functionals (linear and cylindrical),
their flat derivatives normalized to integrate to zero against the base
measure, and exact Wasserstein distances: quantile coupling in 1D and
minimum-cost matching for equal-size clouds in any dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "MeasureError",
    "EmpiricalMeasure",
    "GridMeasure1D",
    "ConstraintFunctional",
    "LinearConstraint",
    "CylindricalConstraint",
    "soft_abs_constraint",
    "mean_level_constraint",
    "integrate",
    "measure_mean",
    "eval_constraint",
    "flat_derivative",
    "wasserstein_1d",
    "wasserstein_assignment",
    "d1_grid_flows",
    "gradient_sup_on_grid",
]

MASS_TOL = 1e-10

MeasureLike = Union["EmpiricalMeasure", "GridMeasure1D", np.ndarray]


class MeasureError(ValueError):
    """Invalid measure construction or incompatible measure arguments."""


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform probability measure (1/N) sum of Diracs on N points in R^d.

    Immutable after construction; the point array is write-protected so the
    object can be shared read-only across workers.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise MeasureError("points must be a nonempty (N, d) array")
        if not np.isfinite(pts).all():
            raise MeasureError("points contain non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def second_moment(self) -> float:
        return float((self.points**2).sum(axis=1).mean())


@dataclass(frozen=True)
class GridMeasure1D:
    """Probability density, constant per cell, on [x_min, x_max].

    Total mass must equal one to within ``MASS_TOL``; densities must be
    nonnegative (negative round-off below 1e-12 is clipped on construction).
    """

    x_min: float
    x_max: float
    density: np.ndarray

    def __post_init__(self):
        rho = np.array(self.density, dtype=float, copy=True)
        if rho.ndim != 1 or rho.size < 1:
            raise MeasureError("density must be a 1D array")
        if not (self.x_max > self.x_min):
            raise MeasureError("x_max must exceed x_min")
        if not np.isfinite(rho).all():
            raise MeasureError("density contains non-finite values")
        if rho.min() < -1e-12:
            raise MeasureError(f"negative density {rho.min():.3e}")
        rho[rho < 0.0] = 0.0
        mass = rho.sum() * (self.x_max - self.x_min) / rho.size
        if abs(mass - 1.0) > MASS_TOL:
            raise MeasureError(f"total mass {mass!r} is not 1 within {MASS_TOL}")
        rho.setflags(write=False)
        object.__setattr__(self, "density", rho)

    @property
    def n_cells(self) -> int:
        return self.density.size

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.dx

    @property
    def edges(self) -> np.ndarray:
        return self.x_min + np.arange(self.n_cells + 1) * self.dx

    def mean(self) -> float:
        return float((self.centers * self.density).sum() * self.dx)

    def second_moment(self) -> float:
        return float((self.centers**2 * self.density).sum() * self.dx)

    def variance(self) -> float:
        m = self.mean()
        return self.second_moment() - m * m

    @classmethod
    def from_unnormalized(cls, x_min: float, x_max: float, values: np.ndarray) -> "GridMeasure1D":
        values = np.clip(np.asarray(values, dtype=float), 0.0, None)
        dx = (x_max - x_min) / values.size
        mass = values.sum() * dx
        if mass <= 0.0:
            raise MeasureError("cannot normalize a zero measure")
        return cls(x_min, x_max, values / mass)

    @classmethod
    def gaussian(cls, x_min: float, x_max: float, n_cells: int, mean: float, std: float) -> "GridMeasure1D":
        """Cell-averaged Gaussian density, renormalized on the truncated domain."""
        from scipy.stats import norm

        edges = x_min + np.arange(n_cells + 1) * (x_max - x_min) / n_cells
        cdf = norm.cdf(edges, loc=mean, scale=std)
        return cls.from_unnormalized(x_min, x_max, np.diff(cdf))

    def quantile_points(self, n: int) -> np.ndarray:
        """Deterministic n-point cloud at mass levels (i - 1/2)/n, shape (n, 1)."""
        s = (np.arange(n) + 0.5) / n
        lo, hi, xlo, xhi = _segments(self)
        idx = np.clip(np.searchsorted(hi, s, side="left"), 0, lo.size - 1)
        frac = (s - lo[idx]) / (hi[idx] - lo[idx])
        return (xlo[idx] + frac * (xhi[idx] - xlo[idx]))[:, None]


# ---------------------------------------------------------------------------
# functional evaluation against measures


def _as_points(m: MeasureLike) -> np.ndarray | None:
    """Return (N, d) points if m is point-based, else None."""
    if isinstance(m, EmpiricalMeasure):
        return m.points
    if isinstance(m, np.ndarray):
        pts = m if m.ndim == 2 else m[:, None]
        return pts
    return None


def integrate(fn: Callable[[np.ndarray], np.ndarray], m: MeasureLike) -> float:
    """Integral of a vectorized function fn((n, d)) -> (n,) against m.

    Point measures use the exact average; grid measures use the midpoint rule,
    which preserves mass identities exactly for piecewise-constant densities.
    """
    pts = _as_points(m)
    if pts is not None:
        return float(np.mean(fn(pts)))
    if isinstance(m, GridMeasure1D):
        vals = fn(m.centers[:, None])
        return float((vals * m.density).sum() * m.dx)
    raise MeasureError(f"unsupported measure type {type(m)!r}")


def measure_mean(m: MeasureLike) -> np.ndarray:
    pts = _as_points(m)
    if pts is not None:
        return pts.mean(axis=0)
    if isinstance(m, GridMeasure1D):
        return np.array([m.mean()])
    raise MeasureError(f"unsupported measure type {type(m)!r}")


# ---------------------------------------------------------------------------
# constraint functionals


class ConstraintFunctional:
    """Common surface of the constraint Psi: value, flat derivative, Lipschitz constant."""

    kind: str
    c_psi: float

    def value(self, m: MeasureLike) -> float:
        raise NotImplementedError

    def flat_derivative(self, m: MeasureLike, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class LinearConstraint(ConstraintFunctional):
    """Psi(m) = int psi dm - kappa with flat derivative psi(x) - int psi dm."""

    psi: Callable[[np.ndarray], np.ndarray]
    kappa: float
    c_psi: float
    psi_grad: Callable[[np.ndarray], np.ndarray] | None = None
    kind: str = field(default="linear", init=False)

    def value(self, m: MeasureLike) -> float:
        return integrate(self.psi, m) - self.kappa

    def flat_derivative(self, m: MeasureLike, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.psi(x) - integrate(self.psi, m)


@dataclass(frozen=True)
class CylindricalConstraint(ConstraintFunctional):
    """Psi(m) = F(int f_1 dm, ..., int f_k dm).

    The d_1-Lipschitz constant has no constructive bound for general F, so it
    must be supplied by the caller.
    """

    outer: Callable[[np.ndarray], float]
    outer_grad: Callable[[np.ndarray], np.ndarray]
    inners: Sequence[Callable[[np.ndarray], np.ndarray]]
    c_psi: float
    inner_grads: Sequence[Callable[[np.ndarray], np.ndarray]] | None = None
    kind: str = field(default="cylindrical", init=False)

    def _inner_integrals(self, m: MeasureLike) -> np.ndarray:
        return np.array([integrate(f, m) for f in self.inners])

    def value(self, m: MeasureLike) -> float:
        return float(self.outer(self._inner_integrals(m)))

    def flat_derivative(self, m: MeasureLike, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ivals = self._inner_integrals(m)
        grad = np.asarray(self.outer_grad(ivals), dtype=float)
        out = np.zeros(x.shape[0])
        for gj, fj, ij in zip(grad, self.inners, ivals):
            out += gj * (fj(x) - ij)
        return out


def soft_abs_constraint(kappa: float, smoothing: float = 0.1, center: np.ndarray | None = None,
                        c_psi: float = 1.0) -> LinearConstraint:
    """Confinement constraint int (sqrt(|x - x0|^2 + s^2) - s) dm - kappa.

    The integrand is a smooth version of |x - x0|; its gradient has norm
    strictly below 1 everywhere, so c_psi = 1 is a valid Lipschitz constant.
    """
    s2 = float(smoothing) ** 2

    def psi(x: np.ndarray) -> np.ndarray:
        y = x if center is None else x - np.asarray(center, dtype=float)
        return np.sqrt((y**2).sum(axis=1) + s2) - smoothing

    def psi_grad(x: np.ndarray) -> np.ndarray:
        y = x if center is None else x - np.asarray(center, dtype=float)
        return y / np.sqrt((y**2).sum(axis=1) + s2)[:, None]

    return LinearConstraint(psi=psi, kappa=kappa, c_psi=c_psi, psi_grad=psi_grad)


def mean_level_constraint(kappa: float) -> LinearConstraint:
    """1D expectation constraint int x dm - kappa (survival of the mean below kappa)."""
    return LinearConstraint(
        psi=lambda x: x[:, 0],
        kappa=kappa,
        c_psi=1.0,
        psi_grad=lambda x: np.ones_like(x),
    )


def eval_constraint(psi: ConstraintFunctional, m: MeasureLike) -> float:
    return psi.value(m)


def flat_derivative(psi: ConstraintFunctional, m: MeasureLike, x: np.ndarray) -> np.ndarray:
    return psi.flat_derivative(m, x)


def gradient_sup_on_grid(grad_fn: Callable[[np.ndarray], np.ndarray], x_min: float, x_max: float,
                         n: int = 4001) -> float:
    """Sup-norm of a 1D gradient field sampled on a fine grid (Lipschitz estimate)."""
    x = np.linspace(x_min, x_max, n)[:, None]
    return float(np.abs(grad_fn(x)).max())


# ---------------------------------------------------------------------------
# Wasserstein distances


def _segments(m: MeasureLike) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Quantile function of a 1D measure as linear pieces over mass intervals.

    Returns (s_lo, s_hi, x_lo, x_hi): on [s_lo[i], s_hi[i]] the quantile runs
    linearly from x_lo[i] to x_hi[i]. The pieces tile [0, 1] exactly.
    """
    pts = _as_points(m)
    if pts is not None:
        if pts.shape[1] != 1:
            raise MeasureError(f"1D quantile coupling needs dim 1, got dim {pts.shape[1]}")
        x = np.sort(pts[:, 0])
        n = x.size
        s = np.arange(n + 1) / n
        return s[:-1], s[1:], x, x
    if isinstance(m, GridMeasure1D):
        mass = m.density * m.dx
        keep = mass > 0.0
        mass = mass[keep]
        cum = np.concatenate([[0.0], np.cumsum(mass)])
        cum /= cum[-1]
        edges = m.edges
        return cum[:-1], cum[1:], edges[:-1][keep], edges[1:][keep]
    raise MeasureError(f"unsupported measure type {type(m)!r}")


def _quantile_at(s: np.ndarray, seg: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]) -> np.ndarray:
    lo, hi, xlo, xhi = seg
    # midpoint-based lookup so breakpoints shared by both measures resolve consistently
    idx = np.clip(np.searchsorted(hi, s, side="left"), 0, lo.size - 1)
    width = hi[idx] - lo[idx]
    frac = np.where(width > 0, (s - lo[idx]) / np.where(width > 0, width, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    return xlo[idx] + frac * (xhi[idx] - xlo[idx])


def wasserstein_1d(a: MeasureLike, b: MeasureLike, p: int = 1) -> float:
    """Exact p-Wasserstein distance between 1D measures via quantile coupling.

    Accepts empirical measures, grid measures, or raw sample arrays.  Both
    quantile functions are piecewise linear over mass intervals, so the
    coupling integral int_0^1 |Q_a - Q_b|^p ds is computed in closed form on
    each merged interval (with sign-change splitting for p = 1).
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    pa, pb = _as_points(a), _as_points(b)
    if pa is not None and pb is not None and pa.shape[0] != pb.shape[0]:
        raise MeasureError(f"empirical inputs need equal sample counts, got {pa.shape[0]} and {pb.shape[0]}")
    seg_a, seg_b = _segments(a), _segments(b)
    breaks = np.unique(np.concatenate([seg_a[0], seg_a[1], seg_b[0], seg_b[1]]))
    s0, s1 = breaks[:-1], breaks[1:]
    width = s1 - s0
    ok = width > 0
    s0, s1, width = s0[ok], s1[ok], width[ok]
    # evaluate interior of each merged interval to pick the right piece at shared breakpoints
    d0 = _quantile_at(s0 + 0.25 * width, seg_a) - _quantile_at(s0 + 0.25 * width, seg_b)
    d1 = _quantile_at(s1 - 0.25 * width, seg_a) - _quantile_at(s1 - 0.25 * width, seg_b)
    # d0, d1 sampled at 1/4 and 3/4 of the interval; extrapolate linearly to endpoints
    dd = d1 - d0
    e0 = d0 - 0.5 * dd
    e1 = d1 + 0.5 * dd
    if p == 2:
        total = (width * (e0 * e0 + e0 * e1 + e1 * e1) / 3.0).sum()
        return float(math.sqrt(max(total, 0.0)))
    same = e0 * e1 >= 0.0
    area = np.where(
        same,
        0.5 * (np.abs(e0) + np.abs(e1)) * width,
        0.5 * (e0 * e0 + e1 * e1) / np.maximum(np.abs(e1 - e0), 1e-300) * width,
    )
    return float(area.sum())


def wasserstein_assignment(a: EmpiricalMeasure, b: EmpiricalMeasure, p: int = 2,
                           max_points: int = 4096) -> float:
    """Exact p-Wasserstein distance between equal-size uniform clouds in R^d.

    Solved as a minimum-cost perfect matching, which is exact for uniform
    empirical measures of equal size.  O(N^3); refuses above ``max_points``.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if a.n != b.n:
        raise MeasureError(f"size mismatch: {a.n} vs {b.n}")
    if a.dim != b.dim:
        raise MeasureError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.n > max_points:
        raise MeasureError(f"N = {a.n} exceeds matching limit {max_points}")
    diff = a.points[:, None, :] - b.points[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    cost = dist if p == 1 else dist**2
    rows, cols = linear_sum_assignment(cost)
    total = cost[rows, cols].sum() / a.n
    return float(total if p == 1 else math.sqrt(total))


def d1_grid_flows(flow_a: np.ndarray, flow_b: np.ndarray, dx: float) -> np.ndarray:
    """Exact d_1 between rows of two density flows on a common grid.

    Uses d_1 = int |F_a - F_b| dx with piecewise-linear CDFs; the integral on
    each cell is evaluated in closed form including sign changes.  Vectorized
    over time slices: inputs are (n_times, n_cells).
    """
    flow_a = np.atleast_2d(flow_a)
    flow_b = np.atleast_2d(flow_b)
    diff_cdf = np.cumsum(flow_a - flow_b, axis=1) * dx
    left = np.concatenate([np.zeros((diff_cdf.shape[0], 1)), diff_cdf[:, :-1]], axis=1)
    right = diff_cdf
    same = left * right >= 0.0
    cell = np.where(
        same,
        0.5 * (np.abs(left) + np.abs(right)),
        0.5 * (left**2 + right**2) / np.maximum(np.abs(right - left), 1e-300),
    )
    return cell.sum(axis=1) * dx
