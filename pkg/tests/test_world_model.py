import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from antler.control_laws import data_independent_counterpart, gp_tracking, linear_feedback
from antler.datasets import PriorData
from antler.exceptions import DivergenceError, InvalidArgumentError
from antler.gp_core import KernelSpec, condition_append, empty_gp, posterior
from antler.world_model import (
    FAIL_DIVERGED,
    RolloutDraws,
    SystemSpec,
    additive_input,
    expected_state_estimate,
    one_step_sample,
    rollout_sample,
    simulate_batch,
    trajectories_csv,
)

ZERO_KERNEL = KernelSpec(0.0, 1.0)


def deterministic_spec(horizon=3, noise=0.0):
    return SystemSpec(1, 1, additive_input, noise, ZERO_KERNEL, horizon)


def gain_law(box=(-1.0, 2.0)):
    return linear_feedback(1, 1, [box])


def prior_data(n=15, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.5, 1.5, n)
    u = -x
    return PriorData(np.column_stack([x, u]), (np.sin(2 * x) + 0.1 * rng.standard_normal(n))[:, None])


def learning_spec(horizon=8, active_dims=(0,), world_uses_prior=True, prior=True):
    return SystemSpec(1, 1, additive_input, 0.1, KernelSpec(1.5, 0.8, active_dims), horizon,
                      prior_data() if prior else None, world_uses_prior)


class TestOneStepSample:
    def test_degenerate_kernel_no_noise(self):
        spec = deterministic_spec()
        nxt, g = one_step_sample(spec.world_gps(), spec, [1.0, -1.0], [0.7], [0.3])
        assert nxt[0] == 0.0 and g[0] == 0.0

    def test_prior_draw(self):
        spec = SystemSpec(1, 1, additive_input, 0.0, KernelSpec(1.0, 1.0), 3)
        nxt, g = one_step_sample(spec.world_gps(), spec, [0.5, 0.25], [1.0], [0.0])
        assert g[0] == pytest.approx(1.0, abs=1e-12)
        assert nxt[0] == pytest.approx(1.75, abs=1e-12)

    def test_noise_enters_additively(self):
        spec = SystemSpec(1, 1, additive_input, 0.3, ZERO_KERNEL, 3)
        nxt, _ = one_step_sample(spec.world_gps(), spec, [1.0, 0.5], [0.0], [2.0])
        assert nxt[0] == pytest.approx(1.5 + 0.6)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-4, 4), st.floats(-4, 4))
    def test_revisit_is_zeta_invariant(self, x, u, z1, z2):
        spec = SystemSpec(1, 1, additive_input, 0.0, KernelSpec(2.0, 0.5), 3)
        gps = spec.world_gps()
        _, g = one_step_sample(gps, spec, [x, u], [0.8], [0.0])
        gps = [condition_append(gp, [x, u], g[0]) for gp in gps]
        _, g1 = one_step_sample(gps, spec, [x, u], [z1], [0.0])
        _, g2 = one_step_sample(gps, spec, [x, u], [z2], [0.0])
        assert abs(g1[0] - g[0]) <= 1e-6 and abs(g2[0] - g1[0]) <= 1e-6


class TestRolloutSample:
    def test_deadbeat(self):
        draws = np.random.default_rng(0).standard_normal((3, 1, 2))
        traj = rollout_sample(deterministic_spec(), gain_law(), [1.0], draws, [1.0])
        np.testing.assert_array_equal(traj.states[:, 0], [1.0, 0.0, 0.0, 0.0])

    def test_half_gain(self):
        draws = np.zeros((3, 1, 2))
        traj = rollout_sample(deterministic_spec(), gain_law(), [0.5], draws, [1.0])
        np.testing.assert_allclose(traj.states[:, 0], [1.0, 0.5, 0.25, 0.125], atol=0)
        np.testing.assert_allclose(traj.inputs[:, 0], [-0.5, -0.25, -0.125])
        assert traj.terminal_input[0] == -0.0625

    def test_lengths(self):
        spec = learning_spec(horizon=5)
        traj = rollout_sample(spec, gp_tracking(np.zeros(6)), [1.0, 0.5], np.zeros((5, 1, 2)), [0.0])
        assert traj.states.shape == (6, 1) and traj.inputs.shape == (5, 1) and traj.g_samples.shape == (5, 1)
        assert traj.all_inputs().shape == (6, 1)

    def test_bit_identical_repeat(self):
        spec = learning_spec()
        law = gp_tracking(np.sin(np.arange(9) / 2))
        draws = RolloutDraws.generate(1, 8, 1, 4).slice(0)
        a = rollout_sample(spec, law, [1.1, 0.7], draws, [0.2])
        b = rollout_sample(spec, law, [1.1, 0.7], draws, [0.2])
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.g_samples, b.g_samples)

    def test_dynamics_identity(self):
        spec = learning_spec()
        law = gp_tracking(np.ones(9))
        draws = RolloutDraws.generate(1, 8, 1, 5).slice(0)
        tr = rollout_sample(spec, law, [0.9, 1.2], draws, [0.0])
        resid = tr.states[1:] - (tr.states[:-1] + tr.inputs) - tr.g_samples - 0.1 * draws[:, :, 1]
        assert np.max(np.abs(resid)) <= 1e-12

    def test_noise_separation_without_process_noise(self):
        spec = SystemSpec(1, 1, additive_input, 0.0, KernelSpec(1.0, 0.7), 6)
        draws = RolloutDraws.generate(1, 6, 1, 2).slice(0)
        tr = rollout_sample(spec, gain_law(), [0.4], draws, [0.5])
        # equal up to the rounding of one subtraction
        np.testing.assert_allclose(tr.g_samples, tr.states[1:] - (tr.states[:-1] + tr.inputs), atol=1e-14, rtol=0)

    def test_divergence_names_step(self):
        spec = deterministic_spec(horizon=40)
        with pytest.raises(DivergenceError) as info:
            rollout_sample(spec, linear_feedback(1, 1, [(-20, 20)]), [-9.0], np.zeros((40, 1, 2)), [1.0])
        # |x_t| = 10^t crosses 1e6 at t = 7
        assert info.value.step == 7

    def test_draw_shape_checked(self):
        with pytest.raises(InvalidArgumentError):
            rollout_sample(deterministic_spec(), gain_law(), [1.0], np.zeros((2, 1, 2)), [1.0])


CASES = [
    ("online", (0,), True, True),
    ("online", None, True, True),
    ("online", (0,), False, True),
    ("online", None, True, False),
    ("frozen", (0,), True, True),
    ("frozen", None, False, True),
    ("none", (0,), True, True),
]


class TestBatchEngine:
    @pytest.mark.parametrize("learning,dims,world_prior,prior", CASES)
    def test_matches_reference(self, learning, dims, world_prior, prior):
        spec = learning_spec(6, dims, world_prior, prior)
        ref = 1.5 * np.sin(np.arange(7) / 3)
        law = gp_tracking(ref)
        if learning == "frozen":
            law = data_independent_counterpart(law)
        elif learning == "none":
            law = linear_feedback(1, 1, [(-1, 2)])
        theta = [1.2, 0.8] if law.param_dim == 2 else [0.6]
        draws = RolloutDraws.generate(5, 6, 1, 11)
        batch = simulate_batch(spec, law, theta, draws.zeta, [0.1])
        assert batch.ok.all()
        for m in range(5):
            tr = rollout_sample(spec, law, theta, draws.slice(m), [0.1])
            np.testing.assert_allclose(batch.states[m], tr.states, atol=1e-9, rtol=0)
            np.testing.assert_allclose(batch.inputs[m, :-1], tr.inputs, atol=1e-9, rtol=0)
            np.testing.assert_allclose(batch.g_samples[m], tr.g_samples, atol=1e-9, rtol=0)

    def test_two_dimensional_state(self):
        kern = (KernelSpec(1.0, 0.9, (0, 1)), KernelSpec(0.5, 1.5, (0, 1)))
        rng = np.random.default_rng(1)
        X = rng.uniform(-1, 1, (10, 4))
        prior = PriorData(X, np.column_stack([np.sin(X[:, 0]), np.cos(X[:, 1])]))
        spec = SystemSpec(2, 2, additive_input, [0.05, 0.1], kern, 5, prior)
        law = gp_tracking(np.column_stack([np.linspace(0, 1, 6), np.linspace(1, 0, 6)]))
        draws = RolloutDraws.generate(3, 5, 2, 0)
        batch = simulate_batch(spec, law, [1.0, 0.5], draws.zeta, [0.0, 0.2])
        for m in range(3):
            tr = rollout_sample(spec, law, [1.0, 0.5], draws.slice(m), [0.0, 0.2])
            np.testing.assert_allclose(batch.states[m], tr.states, atol=1e-9, rtol=0)

    def test_chunking_is_bit_identical(self):
        spec = learning_spec(10)
        law = gp_tracking(np.cos(np.arange(11) / 4))
        draws = RolloutDraws.generate(13, 10, 1, 3)
        thetas = np.random.default_rng(0).uniform(0, 1.5, (13, 2))
        a = simulate_batch(spec, law, thetas, draws.zeta, [0.0], chunk_size=128)
        b = simulate_batch(spec, law, thetas, draws.zeta, [0.0], chunk_size=4)
        c = simulate_batch(spec, law, thetas[5:6], draws.zeta[5:6], [0.0])
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.states[5], c.states[0])

    def test_divergence_is_flagged(self):
        spec = deterministic_spec(horizon=20)
        law = linear_feedback(1, 1, [(-20, 20)])
        batch = simulate_batch(spec, law, np.array([[-9.0], [0.5]]), np.zeros((2, 20, 1, 2)), [1.0])
        assert list(batch.ok) == [False, True]
        assert batch.failed_step[0] == 7 and batch.failure[0] == FAIL_DIVERGED

    def test_true_function_replaces_world(self):
        spec = SystemSpec(1, 1, additive_input, 0.0, ZERO_KERNEL, 2)
        batch = simulate_batch(spec, gain_law(), [1.0], np.zeros((1, 2, 1, 2)), [1.0],
                               true_g=lambda x, u: 0.1 * x)
        np.testing.assert_allclose(batch.states[0, :, 0], [1.0, 0.1, 0.01])

    def test_csv_export(self):
        spec = deterministic_spec(horizon=2)
        batch = simulate_batch(spec, gain_law(), [0.5], np.zeros((2, 2, 1, 2)), [1.0])
        text = trajectories_csv(batch, np.ones((2, 3)))
        lines = text.splitlines()
        assert lines[0] == "m,t,x_1,u_1,c_t"
        assert len(lines) == 1 + 2 * 3
        assert lines[2] == "0,1,0.5,-0.25,1.0"


class TestSequentialDistribution:
    def test_two_point_draws_match_joint_prior(self):
        kern = KernelSpec(1.0, 1.0)
        z1, z2 = np.array([[0.0]]), np.array([[0.8]])
        K = kern.gram(np.vstack([z1, z2]))
        rng = np.random.default_rng(0)
        n = 20000
        zeta = rng.standard_normal((n, 2))
        gp0 = empty_gp(kern, 1)
        p1 = posterior(gp0, z1[0])
        g1 = p1.mean + np.sqrt(p1.variance) * zeta[:, 0]
        # the conditional at z2 given g1 is linear in g1 with fixed variance
        gp_a = condition_append(gp0, z1[0], 1.0)
        pa = posterior(gp_a, z2[0])
        g2 = pa.mean * g1 + np.sqrt(pa.variance) * zeta[:, 1]
        G = np.column_stack([g1, g2])
        np.testing.assert_allclose(G.mean(axis=0), 0.0, atol=0.03)
        np.testing.assert_allclose(np.cov(G.T), K, atol=0.05)


class TestExpectedState:
    def test_single_sample(self):
        spec = learning_spec(5)
        law = gp_tracking(np.zeros(6))
        draws = RolloutDraws.generate(1, 5, 1, 0)
        mean, var = expected_state_estimate(spec, law, [1.0, 0.0], draws, [0.3])
        tr = rollout_sample(spec, law, [1.0, 0.0], draws.slice(0), [0.3])
        np.testing.assert_allclose(mean, tr.states, atol=1e-9)
        np.testing.assert_array_equal(var, 0.0)

    def test_deterministic_system(self):
        mean, var = expected_state_estimate(deterministic_spec(4), gain_law(), [0.5],
                                            RolloutDraws.generate(7, 4, 1, 0), [1.0])
        np.testing.assert_array_equal(var, 0.0)
        np.testing.assert_allclose(mean[:, 0], 0.5 ** np.arange(5))

    def test_linear_gaussian_variance(self):
        # x+ = (1 - k) x + s w  =>  v_{t+1} = (1 - k)^2 v_t + s^2
        k, s, N, M = 0.3, 0.4, 12, 10000
        spec = SystemSpec(1, 1, additive_input, s, ZERO_KERNEL, N)
        _, var = expected_state_estimate(spec, gain_law(), [k], RolloutDraws.generate(M, N, 1, 8), [2.0])
        v = np.zeros(N + 1)
        for t in range(N):
            v[t + 1] = (1 - k) ** 2 * v[t] + s ** 2
        se = v[1:] * np.sqrt(2.0 / (M - 1))
        assert np.all(np.abs(var[1:, 0] - v[1:]) <= 3 * se)


class TestDraws:
    def test_prefix_consistency(self):
        a = RolloutDraws.generate(10, 4, 2, 7)
        b = RolloutDraws.generate(3, 4, 2, 7)
        np.testing.assert_array_equal(a.head(3).zeta, b.zeta)

    def test_read_only(self):
        d = RolloutDraws.generate(2, 3, 1, 0)
        with pytest.raises(ValueError):
            d.zeta[0, 0, 0, 0] = 1.0

    @pytest.mark.parametrize("shape", [(2, 3, 1), (2, 3, 1, 3)])
    def test_shape_validated(self, shape):
        with pytest.raises(InvalidArgumentError):
            RolloutDraws(np.zeros(shape))

    def test_nonfinite_rejected(self):
        z = np.zeros((1, 2, 1, 2))
        z[0, 1, 0, 1] = np.nan
        with pytest.raises(InvalidArgumentError):
            RolloutDraws(z)


class TestSystemSpec:
    def test_negative_noise(self):
        with pytest.raises(InvalidArgumentError):
            SystemSpec(1, 1, additive_input, -0.1, ZERO_KERNEL, 3)

    def test_prior_model_shape(self):
        with pytest.raises(InvalidArgumentError):
            SystemSpec(2, 1, lambda x, u: x[:, :1], 0.0, ZERO_KERNEL, 3)

    def test_kernel_count(self):
        with pytest.raises(InvalidArgumentError):
            SystemSpec(2, 2, additive_input, 0.0, (ZERO_KERNEL,), 3)

    def test_prior_dimension_checked(self):
        with pytest.raises(InvalidArgumentError):
            SystemSpec(2, 2, additive_input, 0.0, ZERO_KERNEL, 3, prior_data())

    def test_world_gp_uses_prior_with_noise(self):
        spec = learning_spec()
        gps = spec.world_gps()
        assert gps[0].size == 15
        np.testing.assert_allclose(gps[0].noise, 0.01)
        assert SystemSpec(1, 1, additive_input, 0.1, KernelSpec(), 3, prior_data(),
                          world_uses_prior=False).world_gps()[0].size == 0
