import itertools

import numpy as np
import pytest

from stagewise.estimators import (
    MatchScale,
    StageWeights,
    SurrogateParams,
    empirical_value,
)
from stagewise.numgrad import sigmoid
from stagewise.policy import (
    CVSpec,
    KipwlObjective,
    PolicyNet,
    PolicyRegime,
    SalObjective,
    SwlObjective,
    cross_validate,
    fit_propensity,
    predict,
    train_policy,
)
from stagewise.simulator import SimConfig, generate, rollout_metrics
from stagewise.stage_importance import TrainSpec
from stagewise.trajectories import ConcatEncoder, Dataset


def atom_population(seed, n_atoms=None, copies=64):
    """Exact finite single-stage population over one-hot history atoms.

    Row counts are proportional to the joint probabilities, so empirical
    maximization coincides with population maximization.
    """
    rng = np.random.default_rng(seed)
    m = n_atoms or int(rng.integers(2, 9))
    # Rational probabilities: p(h) uniform over atoms, p(a|h) in eighths.
    p_plus = rng.integers(2, 7, size=m) / 8.0
    mean_reward = rng.uniform(0.1, 2.0, size=(m, 2))  # [:, 0] for a=-1
    while np.min(np.abs(mean_reward[:, 1] - mean_reward[:, 0])) < 0.05:
        mean_reward = rng.uniform(0.1, 2.0, size=(m, 2))
    rows_cov, rows_act, rows_pro, rows_rew = [], [], [], []
    for h in range(m):
        for a, frac in ((1, p_plus[h]), (-1, 1.0 - p_plus[h])):
            count = round(copies * frac)
            onehot = np.zeros((1, m))
            onehot[0, h] = 1.0
            for _ in range(count):
                rows_cov.append(onehot.copy())
                rows_act.append([a])
                rows_pro.append([frac])
                rows_rew.append(mean_reward[h, (a + 1) // 2])
    ds = Dataset(np.array(rows_cov), np.array(rows_act), np.array(rows_pro),
                 np.array(rows_rew))
    optimal = np.where(mean_reward[:, 1] >= mean_reward[:, 0], 1, -1)
    return ds, optimal, m


class TestFitPropensity:
    def test_randomized_half_assignment(self):
        rng = np.random.default_rng(0)
        n, t = 2000, 2
        ds = Dataset(
            rng.standard_normal((n, t, 3)),
            rng.choice([-1, 1], size=(n, t)),
            np.full((n, t), 0.5),
            rng.standard_normal(n),
        )
        enc = ConcatEncoder.for_dataset(ds)
        model = fit_propensity(ds, enc)
        fitted = model.propensities(ds, enc)
        assert abs(fitted.mean() - 0.5) < 0.03

    def test_recovers_known_logistic_mechanism(self):
        rng = np.random.default_rng(1)
        n = 5000
        x = rng.standard_normal((n, 1, 2))
        p_plus = sigmoid(0.8 * x[:, 0, 0])
        a = np.where(rng.random(n) < p_plus, 1, -1)
        pro = np.where(a == 1, p_plus, 1 - p_plus)
        ds = Dataset(x, a[:, None], pro[:, None], rng.standard_normal(n))
        enc = ConcatEncoder.for_dataset(ds)
        model = fit_propensity(ds, enc)
        assert abs(model.coefs[0][1] - 0.8) < 0.15
        assert abs(model.coefs[0][0]) < 0.1

    def test_constant_action_stage(self):
        rng = np.random.default_rng(2)
        n = 50
        ds = Dataset(
            rng.standard_normal((n, 1, 2)),
            np.ones((n, 1), dtype=int),
            np.full((n, 1), 0.9),
            rng.standard_normal(n),
        )
        enc = ConcatEncoder.for_dataset(ds)
        model = fit_propensity(ds, enc)
        fitted = model.propensities(ds, enc)
        np.testing.assert_allclose(fitted, 1.0 - 1e-3)
        assert np.all(model.coefs[0][1:] == 0.0)

    def test_separation_warns_and_stays_finite(self):
        n = 60
        x = np.linspace(-2, 2, n).reshape(n, 1, 1)
        a = np.where(x[:, 0, 0] > 0, 1, -1)
        ds = Dataset(x, a[:, None], np.full((n, 1), 0.5), np.zeros(n))
        enc = ConcatEncoder.for_dataset(ds)
        with pytest.warns(UserWarning, match="separation"):
            model = fit_propensity(ds, enc)
        assert np.all(np.isfinite(model.coefs[0]))


class TestTrainPolicy:
    def test_single_stage_brute_force_oracle(self):
        # Exact population maximization must pick argmax_a E[R | a, h] at
        # every history atom (checked against direct enumeration).
        for seed in range(3):
            ds, optimal, m = atom_population(seed)
            enc = ConcatEncoder.for_dataset(ds)
            net, _ = train_policy(
                ds, enc, SalObjective(SurrogateParams(lam=5.0)),
                TrainSpec(learning_rate=5e-2, max_iter=800, seed=seed),
            )
            atoms = np.eye(m)
            got = net.decide(1, atoms)
            np.testing.assert_array_equal(got, optimal)

    def test_zero_parameters_decide_plus_one(self):
        rng = np.random.default_rng(3)
        cfg = SimConfig(n=20, n_stages=2, p=3, seed=4)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        net, _ = train_policy(ds, enc, SalObjective(), TrainSpec(max_iter=1, seed=0))
        for stack in net.stacks:
            for lay in stack.layers:
                lay.weight[:] = 0.0
                lay.bias[:] = 0.0
        assert np.all(predict(net, enc, ds) == 1)

    def test_positive_rescale_keeps_decisions(self):
        cfg = SimConfig(n=40, n_stages=3, p=4, seed=5)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        net, _ = train_policy(ds, enc, SalObjective(),
                              TrainSpec(max_iter=50, seed=1), mode="linear")
        before = predict(net, enc, ds)
        for stack in net.stacks:
            stack.layers[-1].weight *= 7.5
            stack.layers[-1].bias *= 7.5
        np.testing.assert_array_equal(before, predict(net, enc, ds))

    def test_prefix_identical_subjects_share_decisions(self):
        cfg = SimConfig(n=1, n_stages=3, p=3, seed=6)
        ds, _, _ = generate(cfg)
        cov = np.repeat(ds.covariates, 2, axis=0)
        act = np.repeat(ds.actions, 2, axis=0)
        act[1, 2] *= -1  # diverge at the last stage only
        two = Dataset(cov, act, np.repeat(ds.propensities, 2, axis=0),
                      np.repeat(ds.rewards, 2))
        enc = ConcatEncoder.for_dataset(two)
        net, _ = train_policy(two, enc, SalObjective(), TrainSpec(max_iter=30, seed=2))
        dec = predict(net, enc, two)
        np.testing.assert_array_equal(dec[0, :3], dec[1, :3])

    def test_sal_equals_uniform_swl_traces(self):
        cfg = SimConfig(n=60, n_stages=3, p=4, seed=7)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        spec = TrainSpec(max_iter=40, seed=3)
        _, trace_sal = train_policy(ds, enc, SalObjective(), spec)
        _, trace_swl = train_policy(
            ds, enc, SwlObjective(StageWeights.uniform(3)), spec
        )
        assert trace_sal == trace_swl

    def test_weights_never_mutated(self):
        cfg = SimConfig(n=50, n_stages=3, p=4, seed=8)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        weights = StageWeights([0.5, 0.3, 0.2])
        digest = weights.values.tobytes()
        train_policy(ds, enc, SwlObjective(weights), TrainSpec(max_iter=40, seed=4))
        assert weights.values.tobytes() == digest

    def test_objective_trace_improves(self):
        cfg = SimConfig(n=100, n_stages=3, p=5, seed=9)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        _, trace = train_policy(ds, enc, SalObjective(),
                                TrainSpec(max_iter=200, seed=5))
        assert max(trace) >= trace[0]
        assert trace[-1] >= trace[0]

    def test_kipwl_objective_trains(self):
        cfg = SimConfig(n=80, n_stages=3, p=4, seed=10)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        scale = MatchScale.degenerate(3, 3)
        net, trace = train_policy(
            ds, enc, KipwlObjective(scale, SurrogateParams(lam=5.0, sigma=1.0)),
            TrainSpec(max_iter=100, seed=6),
        )
        assert max(trace) >= trace[0]
        assert net.n_stages == 3

    def test_lam_ramp_runs(self):
        cfg = SimConfig(n=50, n_stages=2, p=3, seed=11)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        _, trace = train_policy(ds, enc, SalObjective(),
                                TrainSpec(max_iter=30, seed=7),
                                lam_ramp=(1.0, 20.0))
        assert len(trace) == 30

    def test_linear_homogeneous_matching_accuracy(self):
        # Scaled-down regime-recovery check in the easiest generator
        # setting; the bar matches the scaled-down reference trend.
        accs = []
        for seed in range(10):
            cfg = SimConfig(n=1000, n_stages=5, p=20, seed=60 + seed,
                            rule_kind="linear", rule_sharing="homogeneous")
            ds, regime, rewards = generate(cfg)
            enc = ConcatEncoder.for_dataset(ds)
            net, _ = train_policy(ds, enc, SalObjective(),
                                  TrainSpec(max_iter=300, seed=seed))
            _, acc = rollout_metrics(PolicyRegime(net, enc), cfg, regime, rewards,
                                     n_eval=2000, seed=600 + seed)
            accs.append(acc)
        assert np.mean(accs) >= 0.85


class TestCrossValidate:
    def test_single_point_grid(self):
        cfg = SimConfig(n=30, n_stages=2, p=3, seed=12)
        ds, _, _ = generate(cfg)
        enc = ConcatEncoder.for_dataset(ds)
        res = cross_validate(ds, enc, SalObjective(),
                             CVSpec(folds=3, grid=({"lam": 5.0, "max_iter": 20},)))
        assert res.best == {"lam": 5.0, "max_iter": 20}
        assert len(res.fold_scores[0]) == 3

    def test_folds_partition_ten_subjects(self):
        cfg = SimConfig(n=10, n_stages=2, p=3, seed=13)
        ds, _, _ = generate(cfg)
        perm = np.random.default_rng(0).permutation(10)
        folds = np.array_split(perm, 5)
        sizes = [len(f) for f in folds]
        assert sizes == [2, 2, 2, 2, 2]
        assert sorted(np.concatenate(folds)) == list(range(10))

    def test_planted_lambda_selected(self):
        # A nearly flat surrogate (tiny sharpness) barely trains, so the
        # grid should prefer the working sharpness on held-out value.
        wins = 0
        for seed in range(6):
            cfg = SimConfig(n=120, n_stages=2, p=4, seed=40 + seed,
                            match_prob=0.5, rule_kind="linear")
            ds, _, _ = generate(cfg)
            enc = ConcatEncoder.for_dataset(ds)
            res = cross_validate(
                ds, enc, SalObjective(),
                CVSpec(folds=3, seed=seed,
                       grid=({"lam": 0.01, "max_iter": 60},
                             {"lam": 5.0, "max_iter": 60})),
            )
            wins += res.best["lam"] == 5.0
        assert wins >= 5

    def test_tie_breaks_toward_smaller_model(self):
        from stagewise.policy import CVResult, _model_size

        assert _model_size({"mode": "linear"}) < _model_size({"mode": "nonlinear"})


def test_policy_json_roundtrip(tmp_path):
    cfg = SimConfig(n=30, n_stages=2, p=3, seed=14)
    ds, _, _ = generate(cfg)
    enc = ConcatEncoder.for_dataset(ds)
    net, _ = train_policy(ds, enc, SalObjective(), TrainSpec(max_iter=20, seed=8),
                          mode="nonlinear")
    path = tmp_path / "policy.json"
    net.save(path)
    clone = PolicyNet.load(path)
    np.testing.assert_array_equal(predict(net, enc, ds), predict(clone, enc, ds))
    assert clone.mode == "nonlinear"
