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
from mfclab.particle import (
    FixedInitial,
    GaussianInitial,
    SimConfig,
    SimulationError,
    _simulate_with_noise,
    em_step,
    mc_batch,
    run_rng,
    simulate,
)


def make_model(kappa=50.0, drift=None, T=1.0):
    return ModelSpec(
        hamiltonian=quadratic_hamiltonian(),
        lagrangian=quadratic_lagrangian(),
        drift=drift or zero_drift(),
        running_cost=ZeroCost(),
        terminal_cost=ZeroCost(),
        constraint=soft_abs_constraint(kappa=kappa),
        t0=0.0,
        T=T,
    )


def make_config(n=4, dim=1, dt=0.01, T=1.0, seed=1, initial=None):
    return SimConfig(n_particles=n, dim=dim, dt=dt, t0=0.0, T=T, seed=seed,
                     initial=initial or GaussianInitial(0.0, 0.5))


zero_policy = lambda t, mu: np.zeros_like(mu.points)


class TestEmStep:
    def test_no_motion(self):
        m = EmpiricalMeasure(np.array([[0.5], [-0.5]]))
        out = em_step(m, np.zeros((2, 1)), zero_drift(), 0.01, np.zeros((2, 1)))
        assert np.array_equal(out.points, m.points)

    def test_rigid_translation(self):
        m = EmpiricalMeasure(np.zeros((3, 2)))
        v = np.array([2.0, -1.0])
        out = em_step(m, np.tile(v, (3, 1)), zero_drift(), 0.1, np.zeros((3, 2)))
        assert np.allclose(out.points, v * 0.1)

    def test_pre_step_measure_in_drift(self):
        # drift must see the measure before the step, not after
        seen = []

        def spy(x, m):
            seen.append(m.points.copy() if isinstance(m, EmpiricalMeasure) else None)
            return np.zeros_like(x)

        drift = zero_drift()
        object.__setattr__(drift, "fn", spy)
        object.__setattr__(drift, "is_zero", False)
        m = EmpiricalMeasure(np.array([[1.0]]))
        em_step(m, np.array([[5.0]]), drift, 0.1, np.zeros((1, 1)))
        assert np.array_equal(seen[0], m.points)

    def test_nonfinite_aborts(self):
        m = EmpiricalMeasure(np.array([[0.0]]))
        with pytest.raises(SimulationError):
            em_step(m, np.array([[np.inf]]), zero_drift(), 0.1, np.zeros((1, 1)))

    def test_brownian_variance(self):
        # Var X_dt = 2 dt per coordinate; with b = 0 and zero control the
        # particles are independent, so one em_step on a large cloud gives
        # 1e5 independent single-particle samples
        runs, dt = 100_000, 0.3
        rng = np.random.default_rng(42)
        m = EmpiricalMeasure(np.zeros((runs, 1)))
        out = em_step(m, np.zeros((runs, 1)), zero_drift(), dt, rng.standard_normal((runs, 1)))
        var = out.points[:, 0].var(ddof=1)
        se = var * np.sqrt(2.0 / (runs - 1))
        assert abs(var - 2 * dt) < 3 * se


class TestSimulate:
    def test_zero_policy_zero_cost(self):
        rec = simulate(make_config(), make_model(), zero_policy)
        assert rec.total_cost == 0.0
        assert rec.control_energy == 0.0
        assert rec.tau_index is None

    def test_constant_policy_cost_exact(self):
        # left rule is exact for a constant integrand
        v = np.array([0.4, -0.3])
        policy = lambda t, mu: np.tile(v, (mu.n, 1))
        rec = simulate(make_config(dim=2), make_model(), policy)
        assert rec.running_cost == pytest.approx(0.5 * (v**2).sum(), rel=1e-12)

    def test_immediate_stop(self):
        cfg = make_config(initial=FixedInitial(np.zeros((4, 1))))
        model = make_model(kappa=50.0)
        psi0 = model.constraint.value(EmpiricalMeasure(np.zeros((4, 1))))
        rec = simulate(cfg, model, zero_policy, stop_threshold=psi0)
        assert rec.tau_index == 0

    def test_psi_path_matches_snapshots(self):
        cfg = make_config(n=6, seed=9)
        model = make_model(kappa=2.0)
        rec = simulate(cfg, model, zero_policy, snapshot_every=10)
        for k, snap in rec.snapshots:
            assert rec.psi_path[k] == pytest.approx(model.constraint.value(snap), abs=1e-14)

    def test_tau_is_first_crossing(self):
        cfg = make_config(n=2, seed=3, T=2.0, dt=0.01)
        model = make_model(kappa=1.0)
        rec = simulate(cfg, model, zero_policy, stop_threshold=-0.5)
        assert rec.tau_index is not None
        assert np.all(rec.psi_path[:rec.tau_index] < -0.5)
        assert rec.psi_path[rec.tau_index] >= -0.5

    def test_permutation_equivariance(self):
        # permuting particles and their noise permutes paths; costs invariant
        cfg = make_config(n=5, dim=2, dt=0.05, T=0.5)
        model = make_model(kappa=2.0, drift=tanh_attraction_drift(0.5, 1.0))
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(5, 2))
        noise = rng.standard_normal((cfg.n_steps, 5, 2))
        policy = lambda t, mu: -0.2 * mu.points
        rec = _simulate_with_noise(cfg, model, policy, pts, noise, None, None)
        perm = np.array([3, 0, 4, 1, 2])
        rec_p = _simulate_with_noise(cfg, model, policy, pts[perm], noise[:, perm, :], None, None)
        assert np.allclose(rec.psi_path, rec_p.psi_path, atol=1e-12)
        assert rec.total_cost == pytest.approx(rec_p.total_cost, rel=1e-12)
        assert rec.control_energy == pytest.approx(rec_p.control_energy, rel=1e-12)

    def test_grid_alignment_enforced(self):
        with pytest.raises(ValueError):
            SimConfig(n_particles=1, dim=1, dt=0.3, t0=0.0, T=1.0, seed=0,
                      initial=GaussianInitial())


class TestMcBatch:
    def test_single_run_equals_simulate(self):
        cfg = make_config(seed=77)
        model = make_model()
        result = mc_batch(cfg, model, zero_policy, runs=1)
        rec = simulate(cfg, model, zero_policy, rng=run_rng(cfg.seed, 0))
        assert result.mean_cost == rec.total_cost
        assert result.n_completed == 1

    def test_determinism(self):
        cfg = make_config(n=3, seed=123)
        model = make_model(kappa=1.5)
        r1 = mc_batch(cfg, model, zero_policy, runs=8, stop_threshold=-0.2)
        r2 = mc_batch(cfg, model, zero_policy, runs=8, stop_threshold=-0.2)
        assert r1 == r2

    def test_workers_do_not_change_results(self):
        cfg = make_config(n=3, seed=55)
        model = make_model()
        serial = mc_batch(cfg, model, zero_policy, runs=6, workers=1)
        threaded = mc_batch(cfg, model, zero_policy, runs=6, workers=4)
        assert serial == threaded

    def test_second_moment_oracle(self):
        # E |X_T|^2 = m2(mu_0) + 2 d (T - t0) for b = 0, zero control
        runs, T, d = 10_000, 0.5, 1
        x0 = 0.3
        rng = np.random.default_rng(2024)
        x_T = x0 + np.sqrt(2 * T) * rng.standard_normal(runs)
        m2 = (x_T**2).mean()
        se = (x_T**2).std(ddof=1) / np.sqrt(runs)
        assert abs(m2 - (x0**2 + 2 * d * T)) < 3 * se

    def test_uncorrelated_particles(self):
        # with b = 0 and zero control, increments of distinct particles are
        # uncorrelated across runs
        runs = 3000
        cfg = make_config(n=2, dt=0.25, T=0.25, seed=31,
                          initial=FixedInitial(np.zeros((2, 1))))
        model = make_model()
        finals = np.empty((runs, 2))
        for r in range(runs):
            rec = simulate(cfg, model, zero_policy, rng=run_rng(cfg.seed, r),
                           snapshot_every=cfg.n_steps)
            finals[r] = rec.snapshots[-1][1].points[:, 0]
        corr = np.corrcoef(finals[:, 0], finals[:, 1])[0, 1]
        assert abs(corr) < 4.0 / np.sqrt(runs)

    def test_second_moment_oracle_through_mc_batch(self):
        # zero policy, terminal cost = second moment: mean batch cost estimates
        # E m2(mu_hat_T) = m2(mu_hat_0) + 2 d (T - t0)
        from mfclab.model import LinearCost

        n, T = 4, 0.25
        x0 = np.full((n, 1), 0.3)
        cfg = SimConfig(n_particles=n, dim=1, dt=0.025, t0=0.0, T=T, seed=812,
                        initial=FixedInitial(x0))
        model = ModelSpec(
            hamiltonian=quadratic_hamiltonian(), lagrangian=quadratic_lagrangian(),
            drift=zero_drift(), running_cost=ZeroCost(),
            terminal_cost=LinearCost(lambda x: (x**2).sum(axis=1)),
            constraint=soft_abs_constraint(kappa=50.0), t0=0.0, T=T)
        result = mc_batch(cfg, model, zero_policy, runs=4000)
        expected = 0.3**2 + 2 * 1 * T
        assert abs(result.mean_cost - expected) < 3 * result.se_cost

    def test_aborted_runs_reported(self):
        cfg = make_config(n=1, seed=5)
        model = make_model()
        blow_up = lambda t, mu: np.full_like(mu.points, np.inf) if t > 0.5 else np.zeros_like(mu.points)
        result = mc_batch(cfg, model, blow_up, runs=3)
        assert result.aborted_runs == (0, 1, 2)
        assert np.isnan(result.mean_cost)
