import numpy as np
import pytest

from smjls.filters import (
    estimate_paths,
    gains_from_cov,
    kbf_cov_paths,
    kbf_gain,
    lmmse_offline,
    markov_pi,
    quantized_cov_paths,
    run_kbf,
    run_lmmse,
    run_quantized,
    sample_batch,
    sample_noise,
    simulate_truth,
    truth_paths,
)
from smjls.model import Mode, SMJLSModel, SojournDistribution
from smjls.quantizer import QuantizationGrid
from smjls.riccati import build_branch_tree, integrate_phi
from smjls.semimarkov import STREAM_NOISE, Trajectory, derive_rng, sample_trajectory


def _static_model(A=None, E=None, D=None, x0_mean=None, n=2):
    A = np.zeros((n, n)) if A is None else np.asarray(A, dtype=float)
    E = np.zeros((n, n)) if E is None else np.asarray(E, dtype=float)
    D = np.eye(n) if D is None else np.asarray(D, dtype=float)
    mode = Mode(0, A=A, C=np.eye(n), D=D, E=E)
    return SMJLSModel(
        modes=(mode,), embedded=[[0.0]],
        sojourns=(SojournDistribution("exponential", rate=1.0),),
        init_mode_dist=[1.0],
        x0_mean=np.zeros(n) if x0_mean is None else x0_mean,
        x0_cov=np.zeros((n, n)),
    )


def _grid(mode, points):
    points = np.asarray(points, dtype=float)
    return QuantizationGrid(mode=mode, points=points,
                            weights=np.full(len(points), 1 / len(points)),
                            distortion=0.0)


class TestNoise:
    def test_moments(self, maglev):
        noise = sample_noise(maglev, 4000, 1e-4, rng=0)
        for arr, dim in ((noise.dw, 3), (noise.dv, 2)):
            n = arr.shape[0] * dim
            se_mean = np.sqrt(1e-4 / n)
            assert abs(arr.mean()) < 4 * se_mean
            se_var = 1e-4 * np.sqrt(2.0 / n)
            assert abs(arr.var() - 1e-4) < 4 * se_var


class TestMarkovPi:
    def test_zero_generator_constant(self):
        aux = markov_pi(np.zeros((2, 2)), [0.3, 0.7], 1e-2, 0.1)
        np.testing.assert_allclose(aux.pi_path, np.tile([0.3, 0.7], (11, 1)))

    def test_maglev_stationary_limit(self, maglev):
        # stationary distribution of the generator, from balance: pi1*20 = pi2*0.1
        aux = markov_pi(maglev.generator(), maglev.init_mode_dist, 0.5, 100.0)
        np.testing.assert_allclose(aux.pi_path[-1], [0.1 / 20.1, 20.0 / 20.1],
                                   atol=1e-9)

    def test_rows_sum_to_one(self, maglev):
        aux = markov_pi(maglev.generator(), maglev.init_mode_dist, 1e-4, 0.02)
        np.testing.assert_allclose(aux.pi_path.sum(axis=1), 1.0, atol=1e-10)
        assert aux.pi_path.min() >= -1e-12

    def test_invalid_generator(self):
        with pytest.raises(ValueError):
            markov_pi(np.array([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5], 0.1, 1.0)


class TestSimulateTruth:
    def test_degenerate_static(self):
        # E=0, D=0: noise-free paths, constant state, dy = C x dt per tick
        model = _static_model(D=np.zeros((2, 2)))
        traj = sample_trajectory(model, 0.1, seed=0)
        noise = sample_noise(model, 100, 1e-3, rng=1)
        x0 = np.array([1.0, -2.0])
        x, dy = simulate_truth(model, traj, noise, 1e-3, x0=x0)
        np.testing.assert_allclose(x, np.tile(x0, (101, 1)))
        np.testing.assert_allclose(dy, np.tile(x0 * 1e-3, (100, 1)))

    def test_stable_decay_matches_ode(self):
        model = _static_model(A=-np.eye(2))
        traj = sample_trajectory(model, 1.0, seed=0)
        noise = sample_noise(model, 1000, 1e-3, rng=1)
        x0 = np.array([1.0, 2.0])
        x, _ = simulate_truth(model, traj, noise, 1e-3, x0=x0)
        expected = np.exp(-1.0) * x0
        assert np.linalg.norm(x[-1] - expected) < 5e-3 * np.linalg.norm(x0)

    def test_initial_state_mean(self, maglev):
        batch = sample_batch(maglev, 0.001, 1e-4, 10_000, root_seed=123)
        se = batch.x0.std(axis=0) / 100.0
        assert np.all(np.abs(batch.x0.mean(axis=0) - maglev.x0_mean) < 3 * se)

    def test_wrong_noise_step(self, maglev):
        traj = sample_trajectory(maglev, 0.02, seed=0)
        noise = sample_noise(maglev, 200, 1e-3, rng=1)
        with pytest.raises(ValueError):
            simulate_truth(maglev, traj, noise, 1e-4)


class TestKbfGain:
    def test_zero_cov(self, maglev):
        assert np.all(kbf_gain(np.zeros((3, 3)), maglev.modes[0]) == 0.0)

    def test_identity_collapse(self):
        m = Mode(0, A=np.zeros((2, 2)), C=np.eye(2), D=np.eye(2), E=np.eye(2))
        P = np.array([[2.0, 0.1], [0.1, 1.0]])
        np.testing.assert_allclose(kbf_gain(P, m), P)

    def test_maglev_identity_cov(self, maglev):
        np.testing.assert_allclose(kbf_gain(np.eye(3), maglev.modes[0]),
                                   maglev.modes[0].C.T)


class TestRunKbf:
    def test_tracks_exactly_without_noise(self):
        # no process noise, start known exactly (p0 = 0): gain stays zero and
        # the estimate drift reproduces the truth drift
        start = np.array([1.0, 0.0])
        model = _static_model(A=[[0.0, 1.0], [-1.0, 0.0]], x0_mean=start)
        traj = sample_trajectory(model, 0.5, seed=0)
        noise = sample_noise(model, 500, 1e-3, rng=1)
        run = run_kbf(model, traj, noise, 1e-3, x0=start)
        np.testing.assert_allclose(run.x_hat, run.x_true, atol=1e-12)

    def test_stationary_riccati_residual(self):
        from smjls.riccati import riccati_rhs

        mode = Mode(0, A=-np.eye(2), C=np.eye(2), D=np.eye(2), E=np.eye(2))
        model = SMJLSModel(
            modes=(mode,), embedded=[[0.0]],
            sojourns=(SojournDistribution("exponential", rate=1.0),),
            init_mode_dist=[1.0], x0_mean=[0.0, 0.0], x0_cov=np.eye(2),
        )
        traj = sample_trajectory(model, 8.0, seed=0)
        noise = sample_noise(model, 800, 1e-2, rng=1)
        run = run_kbf(model, traj, noise, 1e-2)
        resid = np.linalg.norm(riccati_rhs(run.P_path[-1], mode), 2)
        assert resid < 1e-6

    def test_covariance_restarts_at_jumps(self, maglev):
        # covariance along a trajectory with one jump equals the manual
        # composition of the two frozen flows
        t1 = 0.00963
        traj = Trajectory(z=np.array([0, 1]), t_jump=np.array([0.0, t1]),
                          s=np.array([0.0, t1]), horizon=0.02, n_max=8)
        noise = sample_noise(maglev, 200, 1e-4, rng=2)
        run = run_kbf(maglev, traj, noise, 1e-4)
        first = integrate_phi(np.eye(3), maglev.modes[0], 0.0096, 1e-4, 1e-5)
        np.testing.assert_allclose(run.P_path[96], first.values[-1], atol=1e-12)
        assert not np.allclose(run.P_path[97], first.values[-1])


class TestQuantizedSelection:
    def test_jump_free_equals_kbf(self, maglev, small_tree):
        traj = Trajectory(z=np.array([0]), t_jump=np.array([0.0]),
                          s=np.array([0.0]), horizon=0.02, n_max=8)
        noise = sample_noise(maglev, 200, 1e-4, rng=3)
        q = run_quantized(maglev, small_tree, traj, noise, 1e-4)
        k = run_kbf(maglev, traj, noise, 1e-4)
        assert np.max(np.abs(q.P_path - k.P_path)) <= 1e-8

    def test_exact_codeword_hit_follows_stored_branch(self, maglev):
        # jump lands mid-tick; its rounded sojourn is exactly a codeword, so
        # the filter must follow the branch integrated from that codeword
        dt = 1e-4
        s_codeword = 50 * dt
        g0 = _grid(0, [s_codeword, 0.015])
        g1 = _grid(1, [5.0])
        tree = build_branch_tree(maglev, [g0, g1], horizon=0.02, dt=dt)
        t1 = s_codeword - 0.3 * dt
        traj = Trajectory(z=np.array([0, 1]), t_jump=np.array([0.0, t1]),
                          s=np.array([0.0, t1]), horizon=0.02, n_max=8)
        noise = sample_noise(maglev, 200, dt, rng=4)
        run = run_quantized(maglev, tree, traj, noise, dt)
        k, tk, ttil, s_til, s_hat, node = run.selection_log[0]
        assert (k, ttil, s_hat) == (1, 50 * dt, s_codeword)
        root = integrate_phi(np.eye(3), maglev.modes[0], 0.02, dt, 1e-5)
        child = integrate_phi(root.values[50], maglev.modes[1], 0.02, dt, 1e-5)
        np.testing.assert_allclose(run.P_path[50:], child.values[:151], atol=1e-12)

    def test_missing_child_holds_branch(self, maglev):
        # second jump cannot descend (no usable codeword): branch is held
        g0 = _grid(0, [0.005])
        g1 = _grid(1, [5.0])
        tree = build_branch_tree(maglev, [g0, g1], horizon=0.02, dt=1e-4)
        traj = Trajectory(
            z=np.array([0, 1, 0]), t_jump=np.array([0.0, 0.0049, 0.0121]),
            s=np.array([0.0, 0.0049, 0.0072]), horizon=0.02, n_max=8,
        )
        noise = sample_noise(maglev, 200, 1e-4, rng=5)
        run = run_quantized(maglev, tree, traj, noise, 1e-4)
        assert len(run.selection_log) == 2
        assert np.isnan(run.selection_log[1][4])

    def test_censored_when_jumps_exceed_depth(self, maglev, small_grids):
        tree = build_branch_tree(maglev, [small_grids[(0, 8)], small_grids[(1, 8)]],
                                 horizon=0.02, max_depth=1, dt=1e-4)
        traj = Trajectory(
            z=np.array([0, 1, 0]), t_jump=np.array([0.0, 0.004, 0.008]),
            s=np.array([0.0, 0.004, 0.004]), horizon=0.02, n_max=8,
        )
        noise = sample_noise(maglev, 200, 1e-4, rng=6)
        run = run_quantized(maglev, tree, traj, noise, 1e-4)
        assert run.censored

    def test_observation_delay_shifts_selection(self, maglev, small_tree):
        traj = Trajectory(z=np.array([0, 1]), t_jump=np.array([0.0, 0.00502]),
                          s=np.array([0.0, 0.00502]), horizon=0.02, n_max=8)
        noise = sample_noise(maglev, 200, 1e-4, rng=7)
        base = run_quantized(maglev, small_tree, traj, noise, 1e-4)
        from smjls.filters import _single_batch

        batch = _single_batch(maglev, traj, noise, 1e-4, None)
        P_delay, logs, _ = quantized_cov_paths(small_tree, batch, obs_delay=3e-4)
        assert base.selection_log[0][2] == pytest.approx(0.0051)
        assert logs[0][0][2] == pytest.approx(0.0054)


class TestLmmse:
    def test_initial_split_of_variance(self, maglev):
        gains, P_fc, aux, fin = lmmse_offline(maglev, 1e-4, 0.001)
        np.testing.assert_allclose(P_fc[0].sum(axis=0), maglev.x0_cov, atol=1e-15)
        np.testing.assert_allclose(P_fc[0, 0], 0.999 * np.eye(3))

    def test_requires_markov(self):
        mode = Mode(0, A=np.zeros((1, 1)), C=np.ones((1, 1)), D=np.ones((1, 1)),
                    E=np.ones((1, 1)))
        model = SMJLSModel(
            modes=(mode,), embedded=[[0.0]],
            sojourns=(SojournDistribution("uniform", a=0.1, b=0.2),),
            init_mode_dist=[1.0], x0_mean=[0.0], x0_cov=[[1.0]],
        )
        traj = sample_trajectory(model, 0.01, seed=0)
        noise = sample_noise(model, 10, 1e-3, rng=0)
        with pytest.raises(ValueError, match="exponential"):
            run_lmmse(model, traj, noise, 1e-3)

    def test_pi_floor_fails_loudly(self, maglev):
        with pytest.raises(RuntimeError, match="probability"):
            lmmse_offline(maglev, 1e-4, 0.001, pi_floor=0.5)


class TestBatchSingleConsistency:
    def test_batch_equals_single_runs(self, maglev, small_tree):
        root = 424242
        batch = sample_batch(maglev, 0.02, 1e-4, 3, root_seed=root)
        x, dy = truth_paths(batch)
        P = kbf_cov_paths(batch)
        xh = estimate_paths(batch, dy, gains_from_cov(batch, P))
        for r in range(3):
            traj = sample_trajectory(maglev, 0.02, n_max=256,
                                     seed=derive_rng(root, 0, r))
            noise_rng = derive_rng(root, STREAM_NOISE, r)
            noise = sample_noise(maglev, 200, 1e-4, rng=noise_rng)
            run = run_kbf(maglev, traj, noise, 1e-4, x0=batch.x0[r])
            np.testing.assert_array_equal(run.x_true, x[r])
            np.testing.assert_array_equal(run.x_hat, xh[r])
            np.testing.assert_array_equal(run.P_path, P[r])

    def test_gain_bound_over_runs(self, maglev, small_tree):
        batch = sample_batch(maglev, 0.02, 1e-4, 50, root_seed=5)
        P = kbf_cov_paths(batch)
        Pq, _, _ = quantized_cov_paths(small_tree, batch)
        bound_factor = max(
            np.linalg.norm(m.C.T @ m.ddt_inv, 2) for m in maglev.modes
        )
        pbar = max(np.linalg.norm(P.reshape(-1, 3, 3), 2, axis=(1, 2)).max(),
                   small_tree.max_path_norm())
        for cov in (P, Pq):
            K = gains_from_cov(batch, cov)
            assert np.all(np.isfinite(K))
            kmax = np.linalg.norm(K.reshape(-1, 3, 2), 2, axis=(1, 2)).max()
            assert kmax <= pbar * bound_factor * (1 + 1e-9)
