import numpy as np
import pytest

from stagewise.simulator import SimConfig, generate
from stagewise.stage_importance import (
    DivergenceError,
    ImportanceArch,
    ImportanceNet,
    LstmHistoryEncoder,
    TrainSpec,
    check_probe_gradients,
    encode_history,
    normalize_weights,
    train_importance,
)
from stagewise.trajectories import Dataset


def sim_dataset(n=200, t=4, p=5, seed=0, important=0):
    cfg = SimConfig(n=n, n_stages=t, p=p, seed=seed, n_important_stages=important)
    return generate(cfg)


SMALL_ARCH = ImportanceArch(hidden=6, head_width=8, head_depth=2)


class TestNormalizeWeights:
    def _net_with_attention(self, raw):
        ds, _, _ = sim_dataset(n=4, t=len(raw))
        net, _ = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=1, seed=0))
        net.attention = np.asarray(raw, dtype=np.float64).reshape(1, -1)
        return net

    def test_zero_raw_is_uniform(self):
        net = self._net_with_attention([0.0, 0.0])
        np.testing.assert_allclose(normalize_weights(net).values, [0.5, 0.5])

    def test_log_two_example(self):
        net = self._net_with_attention([np.log(2.0), 0.0])
        np.testing.assert_allclose(
            normalize_weights(net).values, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12
        )

    def test_sign_flip_invariance(self):
        net_pos = self._net_with_attention([-1.3, 1.3])
        np.testing.assert_allclose(normalize_weights(net_pos).values, [0.5, 0.5])


class TestEncodeHistory:
    def test_causality(self):
        ds, _, _ = sim_dataset(n=6, t=5, seed=3)
        net, _ = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=3, seed=1))
        base = net.hidden_states(ds.covariates, ds.actions)
        cov2 = ds.covariates.copy()
        cov2[:, 3:, :] += 5.0
        act2 = ds.actions.copy()
        act2[:, 3:] *= -1
        mutated = net.hidden_states(cov2, act2)
        np.testing.assert_array_equal(base[:, :3, :], mutated[:, :3, :])
        assert np.any(base[:, 3:, :] != mutated[:, 3:, :])

    def test_changing_first_action_changes_second_state(self):
        ds, _, _ = sim_dataset(n=1, t=3, seed=4)
        net, _ = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=3, seed=2))
        traj = ds.trajectory(0)
        h = encode_history(net, traj)
        flipped = Dataset(
            ds.covariates, ds.actions * np.array([[-1, 1, 1]]), ds.propensities,
            ds.rewards,
        )
        h2 = encode_history(net, flipped.trajectory(0))
        np.testing.assert_array_equal(h[0], h2[0])
        assert np.any(h[1] != h2[1])

    def test_zero_input_matches_scalar_reference(self):
        ds, _, _ = sim_dataset(n=1, t=2, p=3, seed=5)
        net, _ = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=1, seed=3))
        zeros = Dataset(
            np.zeros_like(ds.covariates), ds.actions, ds.propensities, ds.rewards
        )
        traj = zeros.trajectory(0)
        got = encode_history(net, traj)

        # Scalar reference with zero covariates: gates see bias plus the
        # recurrent term plus the previous-action slot.
        import math

        hdim = net.hidden
        h = np.zeros(hdim)
        c = np.zeros(hdim)
        for step in range(2):
            x = np.zeros(net.p + 1)
            if step > 0:
                x[net.p] = traj.actions[step - 1]
            z = x @ net.lstm.wx + h @ net.lstm.wh + net.lstm.bias[0]
            i = 1.0 / (1.0 + np.exp(-z[:hdim]))
            f = 1.0 / (1.0 + np.exp(-z[hdim:2 * hdim]))
            g = np.tanh(z[2 * hdim:3 * hdim])
            o = 1.0 / (1.0 + np.exp(-z[3 * hdim:]))
            c = f * c + i * g
            h = o * np.tanh(c)
            np.testing.assert_allclose(got[step], h, atol=1e-12)

    def test_encoder_wrapper_matches_dataset_pass(self):
        ds, _, _ = sim_dataset(n=8, t=4, seed=6)
        net, _ = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=3, seed=4))
        enc = LstmHistoryEncoder(net)
        full = enc.encode_dataset(ds)
        for j in (1, 3):
            stage = enc.encode_stage(j, ds.covariates[:, :j, :], ds.actions[:, : j - 1])
            np.testing.assert_allclose(stage, full[:, j - 1, :], atol=1e-12)


class TestTrainImportance:
    def test_constant_reward_fits_to_zero_mse(self):
        ds, _, _ = sim_dataset(n=60, t=3, seed=7)
        const = Dataset(ds.covariates, ds.actions, ds.propensities,
                        np.full(ds.n, 2.5))
        _, trace = train_importance(
            const, SMALL_ARCH, TrainSpec(learning_rate=2e-2, max_iter=800, seed=5)
        )
        assert trace[-1] <= 1e-3

    def test_loss_trace_decreases(self):
        ds, _, _ = sim_dataset(n=100, t=3, seed=8)
        _, trace = train_importance(
            ds, SMALL_ARCH, TrainSpec(max_iter=300, seed=6)
        )
        assert trace[-1] < trace[0]
        assert min(trace) == min(trace[: len(trace)])

    def test_mse_reaches_noise_floor(self):
        # Total rewards carry per-stage unit noise, so the unexplainable
        # variance is n_stages * 1; the fit should get within 1.5x of it.
        ds, _, _ = sim_dataset(n=400, t=4, p=5, seed=9)
        net, trace = train_importance(
            ds, ImportanceArch(hidden=12, head_width=16),
            TrainSpec(learning_rate=2e-2, max_iter=1200, seed=7),
        )
        assert trace[-1] <= 1.5 * ds.n_stages

    def test_determinism(self):
        ds, _, _ = sim_dataset(n=50, t=3, seed=10)
        net1, trace1 = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=40, seed=8))
        net2, trace2 = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=40, seed=8))
        assert trace1 == trace2
        np.testing.assert_array_equal(net1.attention, net2.attention)
        np.testing.assert_array_equal(net1.lstm.wx, net2.lstm.wx)

    def test_divergence_raises(self):
        # An absurd learning rate overflows the head matmuls, and the mixed
        # signs of inf products produce the NaN the trainer must surface.
        ds, _, _ = sim_dataset(n=30, t=3, seed=11)
        with pytest.raises(DivergenceError, match="step"):
            train_importance(ds, SMALL_ARCH, TrainSpec(learning_rate=1e80, max_iter=10))

    def test_single_stage_rejected(self):
        ds, _, _ = sim_dataset(n=10, t=1, seed=12)
        with pytest.raises(ValueError, match="two stages"):
            train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=1))

    def test_minibatch_path_runs(self):
        ds, _, _ = sim_dataset(n=64, t=3, seed=13)
        _, trace = train_importance(
            ds, SMALL_ARCH, TrainSpec(max_iter=30, batch_size=16, seed=9)
        )
        assert len(trace) == 30

    def test_probe_gradients_pass(self):
        ds, _, _ = sim_dataset(n=10, t=3, p=4, seed=14)
        report = check_probe_gradients(ds, SMALL_ARCH, seed=10)
        assert report.ok, report.failures[:3]


class TestImportanceRecovery:
    def test_top2_recovery_smoke(self):
        # Scaled-down version of the acceptance check: 2 important stages
        # out of 6, a handful of seeds.
        hits = 0
        for seed in range(4):
            ds, _, rewards = sim_dataset(
                n=500, t=6, p=8, seed=20 + seed, important=2
            )
            net, _ = train_importance(
                ds, ImportanceArch(hidden=8, head_width=8),
                TrainSpec(learning_rate=1e-2, max_iter=150, batch_size=64, seed=seed),
            )
            omega = normalize_weights(net).values
            true_top = set(np.argsort(rewards.omega)[-2:])
            got_top = set(np.argsort(omega)[-2:])
            hits += true_top == got_top
        assert hits >= 3

    def test_weights_concentrate_on_important_stages(self):
        ds, _, rewards = sim_dataset(n=800, t=8, p=10, seed=31, important=2)
        net, _ = train_importance(
            ds, ImportanceArch(hidden=8, head_width=8),
            TrainSpec(learning_rate=1e-2, max_iter=150, batch_size=64, seed=3),
        )
        omega = normalize_weights(net).values
        true_top = np.argsort(rewards.omega)[-2:]
        assert omega[true_top].sum() > 0.5


def test_json_roundtrip(tmp_path):
    ds, _, _ = sim_dataset(n=20, t=3, seed=15)
    net, _ = train_importance(ds, SMALL_ARCH, TrainSpec(max_iter=10, seed=11))
    path = tmp_path / "net.json"
    net.save(path)
    clone = ImportanceNet.load(path)
    np.testing.assert_array_equal(net.attention, clone.attention)
    np.testing.assert_array_equal(
        net.hidden_states(ds.covariates, ds.actions),
        clone.hidden_states(ds.covariates, ds.actions),
    )
    np.testing.assert_array_equal(
        normalize_weights(net).values, normalize_weights(clone).values
    )
