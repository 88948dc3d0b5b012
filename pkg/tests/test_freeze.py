import math

import numpy as np
import pytest

from mfclab.measure import EmpiricalMeasure, soft_abs_constraint
from mfclab.model import (
    ModelSpec,
    ZeroCost,
    quadratic_hamiltonian,
    quadratic_lagrangian,
    tanh_attraction_drift,
    zero_drift,
)
from mfclab.particle import FixedInitial, GaussianInitial, SimConfig, run_rng, simulate
from mfclab.freeze import (
    ConfinementError,
    FreezeParams,
    PreconditionError,
    batch_cost_bound,
    freeze_cost_bound,
    freeze_feedback,
    transfer_batch,
    transfer_control,
)


def make_model(kappa, drift=None, T=1.0, c_psi=1.0):
    return ModelSpec(
        hamiltonian=quadratic_hamiltonian(),
        lagrangian=quadratic_lagrangian(),
        drift=drift or zero_drift(),
        running_cost=ZeroCost(),
        terminal_cost=ZeroCost(),
        constraint=soft_abs_constraint(kappa=kappa, c_psi=c_psi),
        t0=0.0,
        T=T,
    )


class TestFreezeParams:
    def test_radius_formula(self):
        p = FreezeParams(delta=0.8, c_psi=2.0)
        assert p.r == 0.8 / (4.0 * 2.0)

    def test_anchor_set_once(self):
        p = FreezeParams(delta=1.0, c_psi=1.0)
        p.set_anchor(np.zeros((2, 1)))
        with pytest.raises(RuntimeError):
            p.set_anchor(np.zeros((2, 1)))

    def test_positivity(self):
        with pytest.raises(ValueError):
            FreezeParams(delta=0.0, c_psi=1.0)


class TestFreezeFeedback:
    def test_zero_displacement_returns_minus_drift(self):
        drift = tanh_attraction_drift(0.5, 1.0)
        pts = np.array([[0.3, -0.2], [1.0, 0.5]])
        params = FreezeParams(delta=4.0, c_psi=1.0)
        params.set_anchor(pts)
        m = EmpiricalMeasure(pts)
        beta = freeze_feedback(m, params, drift)
        assert np.allclose(beta, -drift(pts, m), atol=1e-15)

    def test_scalar_reference_formula(self):
        # N = 1, d = 1, r = 1, b = 0: beta = 4 y / (y^2 - 1) - 2 y
        params = FreezeParams(delta=4.0, c_psi=1.0)
        params.set_anchor(np.array([[0.0]]))
        for y in (0.1, -0.45, 0.9):
            beta = freeze_feedback(EmpiricalMeasure(np.array([[y]])), params, None)
            assert beta[0, 0] == 4 * y / (y * y - 1) - 2 * y

    def test_antisymmetric_in_displacement(self):
        params = FreezeParams(delta=4.0, c_psi=1.0)
        anchor = np.zeros((2, 1))
        params.set_anchor(anchor)
        y = 0.31
        beta = freeze_feedback(EmpiricalMeasure(np.array([[y], [-y]])), params, None)
        assert beta[0, 0] == pytest.approx(-beta[1, 0], abs=0.0)

    def test_matches_independent_evaluation_bitwise(self):
        # scalar re-implementation with the documented arithmetic order:
        # S as the numpy sum of squared displacements, then
        # 4*disp/(S - r*r*N) - (2*d/r**2)*disp per particle
        rng = np.random.default_rng(1234)
        for _ in range(100):
            n, d = rng.integers(1, 9), rng.integers(1, 4)
            r = float(rng.uniform(0.5, 2.0))
            params = FreezeParams(delta=4.0 * r, c_psi=1.0)
            anchor = rng.normal(size=(n, d))
            params.set_anchor(anchor)
            disp = rng.normal(size=(n, d))
            disp *= 0.5 * r * math.sqrt(n) / max(np.linalg.norm(disp), 1e-9)
            pts = anchor + disp
            got = freeze_feedback(EmpiricalMeasure(pts), params, None)
            s = np.sum((pts - anchor) ** 2)
            expected = np.empty((n, d))
            for i in range(n):
                expected[i] = 4.0 * (pts[i] - anchor[i]) / (s - r * r * n) \
                    - (2.0 * d / (r * r)) * (pts[i] - anchor[i])
            assert np.array_equal(got, expected)

    def test_outside_ball_raises(self):
        params = FreezeParams(delta=4.0, c_psi=1.0)  # r = 1
        params.set_anchor(np.zeros((1, 1)))
        with pytest.raises(ConfinementError) as exc:
            freeze_feedback(EmpiricalMeasure(np.array([[1.5]])), params, None)
        assert exc.value.ratio == pytest.approx(2.25)

    def test_near_boundary_clamp_counts(self):
        params = FreezeParams(delta=4.0, c_psi=1.0)
        params.set_anchor(np.zeros((1, 1)))
        y = math.sqrt(1.0 - 1e-12)
        beta = freeze_feedback(EmpiricalMeasure(np.array([[y]])), params, None)
        assert np.isfinite(beta).all()
        assert params.clamp_count == 1

    def test_requires_anchor(self):
        params = FreezeParams(delta=1.0, c_psi=1.0)
        with pytest.raises(RuntimeError):
            freeze_feedback(EmpiricalMeasure(np.zeros((1, 1))), params, None)


def outward_policy(strength=3.0):
    def alpha(t, pts):
        nrm = np.sqrt((pts**2).sum(axis=1) + 0.01)
        return strength * pts / nrm[:, None]
    return alpha


class TestTransferControl:
    def test_unreachable_constraint_equals_plain_simulate(self):
        # with kappa huge the switch never fires and costs match the plain run
        cfg = SimConfig(n_particles=4, dim=1, dt=0.01, t0=0.0, T=0.5, seed=10,
                        initial=GaussianInitial(0.0, 0.3))
        model = make_model(kappa=100.0)
        alpha = lambda t, pts: 0.3 * np.ones_like(pts)
        rec = transfer_control(cfg, model, alpha, delta=1.0, rng=run_rng(cfg.seed, 0))
        policy = lambda t, mu: alpha(t, mu.points)
        plain = simulate(cfg, model, policy, rng=run_rng(cfg.seed, 0))
        assert rec.tau_index is None
        assert rec.total_cost == plain.total_cost
        assert rec.max_ratio == 0.0

    def test_precondition_rejected(self):
        cfg = SimConfig(n_particles=2, dim=1, dt=0.01, t0=0.0, T=0.5, seed=1,
                        initial=FixedInitial(np.zeros((2, 1))))
        model = make_model(kappa=0.3)  # Psi(mu_0) = -0.3, not < -0.5
        with pytest.raises(PreconditionError):
            transfer_control(cfg, model, outward_policy(), delta=0.5)

    def test_switch_confines_and_respects_margin(self):
        delta = 2.0
        cfg = SimConfig(n_particles=32, dim=2, dt=1e-3, t0=0.0, T=1.0, seed=99,
                        initial=GaussianInitial(0.0, 0.2))
        model = make_model(kappa=2.5)
        rec = transfer_control(cfg, model, outward_policy(), delta=delta,
                               rng=run_rng(cfg.seed, 0))
        assert rec.tau_index is not None
        assert rec.max_ratio <= 1.05
        slack = model.constraint.c_psi * rec.slack
        assert rec.max_psi <= -delta / 4.0 + slack
        assert rec.post_tau_energy > 0.0

    def test_overshoot_reported(self):
        delta = 2.0
        cfg = SimConfig(n_particles=16, dim=2, dt=1e-3, t0=0.0, T=0.5, seed=7,
                        initial=GaussianInitial(0.0, 0.2))
        rec = transfer_control(cfg, make_model(kappa=2.5), outward_policy(8.0), delta=delta,
                               rng=run_rng(cfg.seed, 0))
        assert rec.tau_index is not None
        assert rec.overshoot >= 0.0
        assert rec.trajectory.psi_path[rec.tau_index] == pytest.approx(
            rec.overshoot - delta / 2.0)


class TestCostBound:
    def make_record(self, tau_time, T=1.0, n=8, d=2, delta=2.0):
        cfg = SimConfig(n_particles=n, dim=d, dt=1e-2, t0=0.0, T=T, seed=0,
                        initial=GaussianInitial(0.0, 0.1))
        from mfclab.particle import TrajectoryRecord
        from mfclab.freeze import TransferRecord
        traj = TrajectoryRecord(times=cfg.times, psi_path=np.zeros(cfg.n_steps + 1),
                                tau_index=None, running_cost=0.0, terminal_cost=0.0,
                                control_energy=0.0)
        rec = TransferRecord(trajectory=traj, delta=delta, r=delta / 4.0,
                             tau_index=None if tau_time is None else 1,
                             tau_time=tau_time, max_ratio=0.0, max_psi=-1.0,
                             post_tau_energy=0.0, overshoot=0.0, clamp_count=0, slack=0.0)
        return rec, cfg

    def test_never_stopped_bound_zero(self):
        rec, cfg = self.make_record(None)
        assert freeze_cost_bound(rec, cfg, b_bound=1.0) == 0.0

    def test_single_run_formula(self):
        # direct substitution: 32 d e^s/(r^2 N) + (16 d^2/r^2 + 2 |b|^2) s
        tau = 0.4
        rec, cfg = self.make_record(tau)
        s = 1.0 - tau
        d, n, r, b = 2, 8, 0.5, 0.7
        expected = 32 * d * math.exp(s) / (r * r * n) + (16 * d * d / (r * r) + 2 * b * b) * s
        assert freeze_cost_bound(rec, cfg, b_bound=b) == pytest.approx(expected, rel=1e-12)

    def test_batch_energy_below_bound(self):
        delta = 2.0
        cfg = SimConfig(n_particles=24, dim=2, dt=1e-3, t0=0.0, T=1.0, seed=12,
                        initial=GaussianInitial(0.0, 0.2))
        model = make_model(kappa=2.5)
        batch = transfer_batch(cfg, model, outward_policy(), delta, runs=16)
        assert batch.stop_count > 0
        bound = batch_cost_bound(batch.records, cfg, model.drift.bound)
        measured = np.mean([r.post_tau_energy for r in batch.records])
        assert measured <= bound * 1.1

    def test_transfer_batch_deterministic(self):
        # radius must stay well above the per-step noise scale sqrt(2 d dt)
        cfg = SimConfig(n_particles=8, dim=1, dt=1e-3, t0=0.0, T=0.5, seed=4,
                        initial=GaussianInitial(0.0, 0.2))
        model = make_model(kappa=1.5)
        b1 = transfer_batch(cfg, model, outward_policy(), 1.0, runs=5)
        b2 = transfer_batch(cfg, model, outward_policy(), 1.0, runs=5, workers=3)
        assert b1.stop_count > 0
        assert b1.mean_cost == b2.mean_cost
        assert b1.worst_ratio == b2.worst_ratio
