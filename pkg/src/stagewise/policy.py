"""Treatment-regime learning by ascent on the smooth stage-weighted values.

Per-stage score networks f_j map encoded histories to real scores; the
emitted decision is sign(f_j) with sign(0) := +1.  Training maximizes
one of the smooth objectives from :mod:`stagewise.estimators`:

    stage-weighted (uniform weights recovers the stage-aware variant)
    count-scale with a logistic-plus-Gaussian surrogate

Rewards are min-shifted to nonnegative values before surrogate training
by default (negative weights would flip the per-sample ascent
direction); value reporting elsewhere never shifts.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .estimators import (
    EstimatorError,
    MatchScale,
    NoOverlapError,
    StageWeights,
    SurrogateParams,
    empirical_value,
    ipw_weights,
    kipwl_objective_tape,
    shift_rewards,
    swl_objective_tape,
    swl_value,
)
from .numgrad import Adam, FcStack, fc_forward_np, fc_init, sigmoid
from .stage_importance import DivergenceError, TrainSpec
from .trajectories import Dataset, HistoryEncoder, Regime, StagePrefix, signs

POLICY_PROPENSITY_CLIP = 1e-3


# -- objectives -----------------------------------------------------------


@dataclass(frozen=True)
class SalObjective:
    """Uniform stage weighting of the logistic stage surrogates."""

    surrogate: SurrogateParams = SurrogateParams()


@dataclass(frozen=True)
class SwlObjective:
    """Fixed importance scores weighting the logistic stage surrogates."""

    weights: StageWeights
    surrogate: SurrogateParams = SurrogateParams()


@dataclass(frozen=True)
class KipwlObjective:
    """Count-scale objective with logistic stages and a Gaussian count bump."""

    scale: MatchScale
    surrogate: SurrogateParams = SurrogateParams()


# -- policy container -------------------------------------------------------


@dataclass
class PolicyNet:
    """Per-stage score stacks over a fixed-width history encoding."""

    stacks: list[FcStack]
    mode: str            # linear | nonlinear
    encoder_dim: int

    @property
    def n_stages(self) -> int:
        return len(self.stacks)

    def scores(self, stage: int, encoded: np.ndarray) -> np.ndarray:
        return fc_forward_np(self.stacks[stage - 1], encoded)[:, 0]

    def decide(self, stage: int, encoded: np.ndarray) -> np.ndarray:
        return signs(self.scores(stage, encoded))

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "encoder_dim": self.encoder_dim,
            "stacks": [s.to_json() for s in self.stacks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PolicyNet":
        return cls(
            stacks=[FcStack.from_json(s) for s in obj["stacks"]],
            mode=obj["mode"],
            encoder_dim=int(obj["encoder_dim"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PolicyNet":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


class PolicyRegime(Regime):
    """A trained policy bound to the encoder it was trained on."""

    def __init__(self, net: PolicyNet, encoder: HistoryEncoder):
        if net.encoder_dim != encoder.dim:
            raise EstimatorError(
                f"policy expects encoding width {net.encoder_dim}, "
                f"encoder produces {encoder.dim}"
            )
        self.net = net
        self.encoder = encoder

    def decide_batch(self, prefix: StagePrefix) -> np.ndarray:
        encoded = self.encoder.encode_stage(prefix.stage, prefix.covariates,
                                            prefix.actions)
        return self.net.decide(prefix.stage, encoded)


def predict(net: PolicyNet, encoder: HistoryEncoder, ds: Dataset) -> np.ndarray:
    """Signed decisions (n, T) along each subject's observed prefixes."""
    out = np.empty((ds.n, ds.n_stages), dtype=np.int64)
    for j in range(1, ds.n_stages + 1):
        encoded = encoder.encode_stage(j, ds.covariates[:, :j, :],
                                       ds.actions[:, : j - 1])
        out[:, j - 1] = net.decide(j, encoded)
    return out


# -- propensity fitting -------------------------------------------------------


@dataclass
class PropensityModel:
    """Per-stage logistic regressions of the action on (1, H_j)."""

    coefs: list[np.ndarray]     # per stage, (dim + 1,)
    encoder_dim: int
    clip: float = POLICY_PROPENSITY_CLIP

    @property
    def n_stages(self) -> int:
        return len(self.coefs)

    def prob_positive(self, stage: int, encoded: np.ndarray) -> np.ndarray:
        """P(A = +1 | H) with the stated clipping applied."""
        z = encoded @ self.coefs[stage - 1][1:] + self.coefs[stage - 1][0]
        return np.clip(sigmoid(z), self.clip, 1.0 - self.clip)

    def propensities(self, ds: Dataset, encoder: HistoryEncoder) -> np.ndarray:
        """Fitted probabilities of each observed action, shape (n, T)."""
        out = np.empty((ds.n, ds.n_stages))
        for j in range(1, ds.n_stages + 1):
            encoded = encoder.encode_stage(j, ds.covariates[:, :j, :],
                                           ds.actions[:, : j - 1])
            p_plus = self.prob_positive(j, encoded)
            out[:, j - 1] = np.where(ds.actions[:, j - 1] == 1, p_plus, 1.0 - p_plus)
        return out

    def to_json(self) -> dict:
        return {"encoder_dim": self.encoder_dim, "clip": self.clip,
                "coefs": [c.tolist() for c in self.coefs]}

    @classmethod
    def from_json(cls, obj: dict) -> "PropensityModel":
        return cls([np.asarray(c, dtype=np.float64) for c in obj["coefs"]],
                   int(obj["encoder_dim"]), float(obj["clip"]))


_IRLS_MAX_ITER = 50
_IRLS_TOL = 1e-8
_SEPARATION_BOUND = 15.0


def _fit_logistic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Maximum-likelihood logistic fit via iteratively reweighted least squares.

    ``x`` already carries the intercept column.  Perfect separation shows up
    as unbounded coefficients; the fit is then redone with a ridge term and
    a warning.
    """
    beta = np.zeros(x.shape[1])

    def irls(ridge: float) -> np.ndarray:
        b = np.zeros(x.shape[1])
        for _ in range(_IRLS_MAX_ITER):
            p = sigmoid(x @ b)
            w = p * (1.0 - p)
            hess = x.T @ (w[:, None] * x) + ridge * np.eye(x.shape[1])
            grad = x.T @ (y - p) - ridge * b
            try:
                step = np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            b = b + step
            if np.abs(step).max() < _IRLS_TOL:
                break
        return b

    beta = irls(1e-10)
    if not np.all(np.isfinite(beta)) or np.abs(beta).max() > _SEPARATION_BOUND:
        warnings.warn(
            "logistic propensity fit hit (near-)separation; refit with ridge",
            stacklevel=3,
        )
        beta = irls(1e-2 * x.shape[0] / max(x.shape[1], 1))
    return beta


def fit_propensity(ds: Dataset, encoder: HistoryEncoder) -> PropensityModel:
    """Per-stage logistic regression of A_j on (1, H_j).

    A stage where only one action occurs gets an intercept-only model whose
    probability is the clipped empirical rate.
    """
    coefs = []
    for j in range(1, ds.n_stages + 1):
        encoded = encoder.encode_stage(j, ds.covariates[:, :j, :],
                                       ds.actions[:, : j - 1])
        y = (ds.actions[:, j - 1] == 1).astype(np.float64)
        beta = np.zeros(encoded.shape[1] + 1)
        if y.min() == y.max():
            rate = np.clip(y.mean(), POLICY_PROPENSITY_CLIP,
                           1.0 - POLICY_PROPENSITY_CLIP)
            beta[0] = np.log(rate / (1.0 - rate))
        else:
            x = np.hstack([np.ones((ds.n, 1)), encoded])
            beta = _fit_logistic(x, y)
        coefs.append(beta)
    return PropensityModel(coefs, encoder.dim)


# -- training -------------------------------------------------------------------


def _init_stacks(rng: np.random.Generator, n_stages: int, dim: int, mode: str,
                 width: int = 32) -> list[FcStack]:
    if mode == "linear":
        dims = [dim, 1]
    elif mode == "nonlinear":
        dims = [dim, width, width, 1]
    else:
        raise EstimatorError(f"unknown policy mode '{mode}'")
    return [fc_init(rng, dims, "tanh") for _ in range(n_stages)]


def _objective_tape(ds, stacks, encoder, objective, propensities, rewards):
    if isinstance(objective, SalObjective):
        weights = StageWeights.uniform(ds.n_stages)
        return swl_objective_tape(ds, stacks, encoder, weights, propensities, rewards)
    if isinstance(objective, SwlObjective):
        return swl_objective_tape(ds, stacks, encoder, objective.weights,
                                  propensities, rewards)
    if isinstance(objective, KipwlObjective):
        return kipwl_objective_tape(ds, stacks, encoder, objective.scale,
                                    objective.surrogate.sigma, propensities, rewards)
    raise EstimatorError(f"unknown objective {objective!r}")


def train_policy(ds: Dataset, encoder: HistoryEncoder, objective,
                 spec: TrainSpec = TrainSpec(max_iter=400), mode: str = "linear",
                 propensities=None, reward_shift: bool = True,
                 lam_ramp: tuple[float, float] | None = None,
                 ) -> tuple[PolicyNet, list[float]]:
    """Gradient ascent on the chosen smooth objective.

    Returns the best-objective iterate together with the objective trace.
    ``propensities`` defaults to the recorded ones; pass a fitted matrix to
    evaluate under estimated assignment probabilities.  ``lam_ramp``
    replaces the objective's fixed sharpness with a geometric schedule
    between the two given values across the run.
    """
    rewards = shift_rewards(ds.rewards) if reward_shift else ds.rewards
    rng = np.random.default_rng(spec.seed)
    stacks = _init_stacks(rng, ds.n_stages, encoder.dim, mode)
    tape, _ = _objective_tape(ds, stacks, encoder, objective, propensities, rewards)
    opt = Adam(tape.param_arrays, lr=spec.learning_rate)
    lam0 = objective.surrogate.lam
    trace: list[float] = []
    best = -np.inf
    best_state = None
    for it in range(spec.max_iter):
        if lam_ramp is None:
            lam = lam0
        else:
            lo, hi = lam_ramp
            frac = it / max(spec.max_iter - 1, 1)
            lam = lo * (hi / lo) ** frac
        value = tape.forward([np.array([[lam]])])[0, 0]
        if not np.isfinite(value):
            raise DivergenceError(f"objective became non-finite at step {it}")
        trace.append(float(value))
        if value > best:
            best = value
            best_state = [a.copy() for a in tape.param_arrays]
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= spec.tol:
            break
        grads = tape.backward()
        opt.step([-g for g in grads])  # ascend
    if best_state is not None:
        for array, snap in zip(tape.param_arrays, best_state):
            array[:] = snap
    return PolicyNet(stacks, mode, encoder.dim), trace


# -- cross-validation ----------------------------------------------------------


@dataclass(frozen=True)
class CVSpec:
    folds: int = 5
    grid: tuple = ()  # dicts with learning_rate / mode / lam / max_iter
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise EstimatorError("cross-validation needs at least two folds")
        if not self.grid:
            raise EstimatorError("empty hyperparameter grid")


@dataclass
class CVResult:
    best: dict
    fold_scores: list[list[float]]  # per grid point, per fold
    fallback_folds: list[list[int]]  # folds scored by the smooth value instead

    @property
    def mean_scores(self) -> list[float]:
        return [float(np.mean(s)) for s in self.fold_scores]


def _model_size(params: dict) -> int:
    return 0 if params.get("mode", "linear") == "linear" else 1


def cross_validate(ds: Dataset, encoder: HistoryEncoder, objective,
                   cv: CVSpec, propensities=None) -> CVResult:
    """Grid search scored by held-out self-normalized value.

    A fold with no fully matched held-out subject falls back to the smooth
    stage-weighted value and is flagged.  Ties prefer the smaller model and
    then the smaller sharpness.
    """
    if ds.n < cv.folds:
        raise EstimatorError("more folds than subjects")
    perm = np.random.default_rng(cv.seed).permutation(ds.n)
    folds = np.array_split(perm, cv.folds)
    fold_scores: list[list[float]] = []
    fallback_folds: list[list[int]] = []
    for params in cv.grid:
        obj = objective
        if "lam" in params:
            obj = replace(objective,
                          surrogate=replace(objective.surrogate, lam=params["lam"]))
        scores = []
        fallbacks = []
        for fi, held in enumerate(folds):
            train_idx = np.setdiff1d(perm, held)
            train_ds = ds.subset(np.sort(train_idx))
            held_ds = ds.subset(np.sort(held))
            spec = TrainSpec(
                learning_rate=params.get("learning_rate", 1e-2),
                max_iter=params.get("max_iter", 300),
                seed=cv.seed + fi,
            )
            net, _ = train_policy(train_ds, encoder, obj, spec,
                                  mode=params.get("mode", "linear"),
                                  propensities=None if propensities is None
                                  else propensities[np.sort(train_idx)])
            regime = PolicyRegime(net, encoder)
            held_pro = None if propensities is None else propensities[np.sort(held)]
            try:
                score = empirical_value(held_ds, regime,
                                        fitted_propensities=held_pro)
            except NoOverlapError:
                weights = (obj.weights if isinstance(obj, SwlObjective)
                           else StageWeights.uniform(ds.n_stages))
                score = swl_value(held_ds, regime, weights=weights,
                                  propensities=held_pro)
                fallbacks.append(fi)
            scores.append(float(score))
        fold_scores.append(scores)
        fallback_folds.append(fallbacks)
    means = [float(np.mean(s)) for s in fold_scores]
    order = sorted(
        range(len(cv.grid)),
        key=lambda i: (
            -means[i],
            _model_size(cv.grid[i]),
            cv.grid[i].get("lam", np.inf),
        ),
    )
    return CVResult(dict(cv.grid[order[0]]), fold_scores, fallback_folds)
