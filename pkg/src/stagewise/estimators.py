"""Inverse-probability-weighted value estimators and smooth objectives.

All estimators share one skeleton: a per-subject reward weight
R_i / prod_j pi_ij and a matching statistic against the target regime.
They differ only in how the per-subject matching pattern is scored:

    full match product      -> plain IPW value
    exact k matches         -> k-level value
    phi(K) over counts      -> generalized scale value
    K / T                   -> stage-aware value
    sum_j omega_j match_ij  -> stage-weighted value

The smooth counterparts replace stage indicators with the logistic
surrogate psi(x; lambda) = 1 / (1 + exp(-lambda x)); the count-level
objective additionally smooths the outer equality indicator with a
Gaussian bump exp(-x^2 / sigma).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numgrad
from .numgrad import FcStack, Tape, fc_apply, fc_register
from .trajectories import Dataset, HistoryEncoder, Regime, match_matrix

# Assignment probabilities are floored here before any division, so even
# poorly fitted propensities cannot blow a single subject's weight past
# 1 / floor per stage.
PROPENSITY_FLOOR = 1e-3


class EstimatorError(ValueError):
    pass


class NoOverlapError(EstimatorError):
    """No subject fully matches the target regime, so the self-normalized
    value has an empty denominator.  This is the full-matching failure
    mode and must surface rather than silently return 0 or NaN."""


# -- weighting pieces ------------------------------------------------------


@dataclass(frozen=True)
class StageWeights:
    """Per-stage importance scores on the probability simplex."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise EstimatorError("stage weights must be a 1-D vector")
        if np.any(v < 0.0) or np.any(v > 1.0) or abs(v.sum() - 1.0) > 1e-9:
            raise EstimatorError(
                f"stage weights must be in [0, 1] and sum to 1, got sum {v.sum()!r}"
            )
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, n_stages: int) -> "StageWeights":
        return cls(np.full(n_stages, 1.0 / n_stages))

    @classmethod
    def one_hot(cls, n_stages: int, stage: int) -> "StageWeights":
        v = np.zeros(n_stages)
        v[stage - 1] = 1.0
        return cls(v)

    @property
    def n_stages(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class MatchScale:
    """A nonnegative scale phi over matching counts 0..T (not all zero)."""

    values: np.ndarray  # (T + 1,)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise EstimatorError("a match scale needs one weight per count 0..T")
        if np.any(v < 0.0):
            raise EstimatorError("match-scale weights must be nonnegative")
        if not np.any(v > 0.0):
            raise EstimatorError("match scale must not be identically zero")
        object.__setattr__(self, "values", v)

    @property
    def n_stages(self) -> int:
        return self.values.size - 1

    def __call__(self, k) -> np.ndarray:
        return self.values[np.asarray(k, dtype=np.int64)]

    @classmethod
    def degenerate(cls, n_stages: int, k0: int) -> "MatchScale":
        if not 0 <= k0 <= n_stages:
            raise EstimatorError(f"count {k0} outside 0..{n_stages}")
        v = np.zeros(n_stages + 1)
        v[k0] = 1.0
        return cls(v)

    @classmethod
    def linear(cls, n_stages: int) -> "MatchScale":
        return cls(np.arange(n_stages + 1) / n_stages)

    @classmethod
    def custom(cls, values) -> "MatchScale":
        return cls(np.asarray(values, dtype=np.float64))

    @classmethod
    def empirical(cls, counts, n_stages: int, smoothing: float = 1.0) -> "MatchScale":
        """Normalized histogram of observed matching counts, add-one smoothed
        by default so unseen counts keep a small positive weight."""
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size == 0:
            raise EstimatorError("empirical scale needs at least one count")
        if counts.min() < 0 or counts.max() > n_stages:
            raise EstimatorError("matching counts outside 0..T")
        hist = np.bincount(counts, minlength=n_stages + 1).astype(np.float64)
        hist += smoothing
        return cls(hist / hist.sum())


@dataclass(frozen=True)
class SurrogateParams:
    """Sharpness of the logistic stage surrogate and width of the Gaussian
    count surrogate."""

    lam: float = 5.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.lam <= 0.0 or self.sigma <= 0.0:
            raise EstimatorError("surrogate parameters must be positive")


# -- inverse-probability weights -------------------------------------------


def ipw_weights(propensities: np.ndarray) -> np.ndarray:
    """Per-subject weights 1 / prod_j pi_ij with the propensity floor applied."""
    pro = np.asarray(propensities, dtype=np.float64)
    if np.any(pro <= 0.0):
        raise EstimatorError("propensities must be strictly positive")
    clipped = np.clip(pro, PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR)
    return 1.0 / clipped.prod(axis=1)


def ipw_rewards(ds: Dataset, propensities=None) -> np.ndarray:
    """R_i / prod_j pi_ij for every subject."""
    pro = ds.propensities if propensities is None else propensities
    return ds.rewards * ipw_weights(pro)


def shift_rewards(rewards: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Uniform min-shift to nonnegativity used before surrogate training."""
    return rewards - rewards.min() + eps


# -- value estimators ---------------------------------------------------------


def ipwe_value(ds: Dataset, regime: Regime, encoder: HistoryEncoder | None = None,
               propensities=None) -> float:
    """Mean of R * prod_j 1{A_j = D_j(H_j)} / prod_j pi_j."""
    m = match_matrix(ds, regime, encoder)
    w = ipw_rewards(ds, propensities)
    return float((w * m.all(axis=1)).mean())


def k_ipwe_value(ds: Dataset, regime: Regime, encoder: HistoryEncoder | None = None,
                 k: int = 0, propensities=None) -> float:
    """The value restricted to subjects matching the regime at exactly k stages."""
    if not 0 <= k <= ds.n_stages:
        raise EstimatorError(f"k={k} outside 0..{ds.n_stages}")
    counts = match_matrix(ds, regime, encoder).sum(axis=1)
    w = ipw_rewards(ds, propensities)
    return float((w * (counts == k)).mean())


def general_value(ds: Dataset, regime: Regime, encoder: HistoryEncoder | None = None,
                  scale: MatchScale | None = None, propensities=None) -> float:
    """Mean of R * phi(K) / prod_j pi_j for a supplied matching scale."""
    if scale is None:
        raise EstimatorError("general_value needs a MatchScale")
    if scale.n_stages != ds.n_stages:
        raise EstimatorError("match scale covers a different stage count")
    counts = match_matrix(ds, regime, encoder).sum(axis=1)
    w = ipw_rewards(ds, propensities)
    return float((w * scale(counts)).mean())


def sal_value(ds: Dataset, regime: Regime, encoder: HistoryEncoder | None = None,
              propensities=None) -> float:
    """Mean of R * (K / T) / prod_j pi_j; the linear-scale special case."""
    counts = match_matrix(ds, regime, encoder).sum(axis=1)
    w = ipw_rewards(ds, propensities)
    return float((w * counts / ds.n_stages).mean())


def swl_value(ds: Dataset, regime: Regime, encoder: HistoryEncoder | None = None,
              weights: StageWeights | None = None, propensities=None) -> float:
    """Mean of R * sum_j omega_j 1{A_j = D_j(H_j)} / prod_j pi_j."""
    if weights is None:
        raise EstimatorError("swl_value needs StageWeights")
    if weights.n_stages != ds.n_stages:
        raise EstimatorError("stage weights cover a different stage count")
    m = match_matrix(ds, regime, encoder)
    w = ipw_rewards(ds, propensities)
    return float((w * (m @ weights.values)).mean())


def empirical_value(ds: Dataset, regime: Regime, encoder: HistoryEncoder | None = None,
                    fitted_propensities=None) -> float:
    """Self-normalized value: IPW-weighted reward over the IPW-weighted
    full-match indicator.  Raises :class:`NoOverlapError` when no subject
    follows the regime at every stage."""
    m = match_matrix(ds, regime, encoder)
    full = m.all(axis=1)
    pro = ds.propensities if fitted_propensities is None else fitted_propensities
    w = ipw_weights(pro)
    denom = float(w[full].sum())
    if denom == 0.0:
        raise NoOverlapError(
            "no subject fully matches the target regime; the self-normalized "
            "value is undefined on this sample"
        )
    return float((ds.rewards[full] * w[full]).sum() / denom)


# -- smooth surrogates ---------------------------------------------------------


def logistic_surrogate(x, lam: float = 5.0):
    """psi(x; lam) = 1 / (1 + exp(-lam x)); monotone, psi(0) = 0.5."""
    if lam <= 0.0:
        raise EstimatorError("lam must be positive")
    return numgrad.sigmoid(lam * np.asarray(x, dtype=np.float64))


def gaussian_surrogate(x, sigma: float = 1.0):
    """psi2(x; sigma) = exp(-x^2 / sigma); equals 1 at 0, decays in |x|."""
    if sigma <= 0.0:
        raise EstimatorError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.clip(x**2 / sigma, None, numgrad.EXP_CLAMP))


# -- differentiable objectives --------------------------------------------------
#
# The tape builders take already-registered per-stage score refs so that
# trainers control parameter registration; lambda enters through a (1, 1)
# input node, which lets a sharpness ramp re-use one tape.


def build_swl_objective(tape: Tape, score_refs: list[int], actions: np.ndarray,
                        subject_weights: np.ndarray, omega: np.ndarray,
                        lam_ref: int) -> int:
    n, t = actions.shape
    w = tape.const(subject_weights.reshape(n, 1), "ipw_rewards")
    inner = None
    for j in range(t):
        a = tape.const(actions[:, j].astype(np.float64).reshape(n, 1), f"a{j + 1}")
        margin = tape.mul(tape.mul(a, score_refs[j]), lam_ref, f"margin{j + 1}")
        psi = tape.sigmoid(margin, f"psi{j + 1}")
        term = tape.scale(psi, float(omega[j]))
        inner = term if inner is None else tape.add(inner, term)
    return tape.scale(tape.sum(tape.mul(w, inner)), 1.0 / n, "swl_objective")


def build_kipwl_objective(tape: Tape, score_refs: list[int], actions: np.ndarray,
                          subject_weights: np.ndarray, scale: MatchScale,
                          lam_ref: int, sigma: float) -> int:
    n, t = actions.shape
    if sigma <= 0.0:
        raise EstimatorError("sigma must be positive")
    w = tape.const(subject_weights.reshape(n, 1), "ipw_rewards")
    soft_count = None
    for j in range(t):
        a = tape.const(actions[:, j].astype(np.float64).reshape(n, 1), f"a{j + 1}")
        margin = tape.mul(tape.mul(a, score_refs[j]), lam_ref, f"margin{j + 1}")
        psi = tape.sigmoid(margin, f"psi{j + 1}")
        soft_count = psi if soft_count is None else tape.add(soft_count, psi)
    objective = None
    for k in range(t + 1):
        phi_k = float(scale.values[k])
        if phi_k == 0.0:
            continue
        dev = tape.sub(soft_count, tape.const(np.full((n, 1), float(k)), f"k{k}"))
        bump = tape.exp(tape.scale(tape.square(dev), -1.0 / sigma), f"bump{k}")
        term = tape.scale(tape.sum(tape.mul(w, bump)), phi_k / n)
        objective = term if objective is None else tape.add(objective, term)
    return objective


def _policy_scores_tape(ds: Dataset, policy_stacks: list[FcStack],
                        encoder: HistoryEncoder) -> tuple[Tape, list[int], int]:
    """Register one score network per stage over the encoded histories."""
    if encoder is None:
        raise EstimatorError("surrogate objectives need a history encoder")
    if len(policy_stacks) != ds.n_stages:
        raise EstimatorError("one score network per stage is required")
    encoded = encoder.encode_dataset(ds)
    tape = Tape()
    lam_ref = tape.input((1, 1), "lam")
    refs = []
    for j, stack in enumerate(policy_stacks):
        h = tape.const(encoded[:, j, :], f"h{j + 1}")
        frefs = fc_register(tape, stack, f"f{j + 1}")
        refs.append(fc_apply(tape, frefs, h, stack.activation))
    return tape, refs, lam_ref


def swl_objective_tape(ds: Dataset, policy_stacks: list[FcStack],
                       encoder: HistoryEncoder, weights: StageWeights,
                       propensities=None, rewards=None) -> tuple[Tape, int]:
    """Tape for the stage-weighted smooth objective; lambda is the tape input."""
    if weights.n_stages != ds.n_stages:
        raise EstimatorError("stage weights cover a different stage count")
    w = (ds.rewards if rewards is None else rewards) * ipw_weights(
        ds.propensities if propensities is None else propensities
    )
    tape, refs, lam_ref = _policy_scores_tape(ds, policy_stacks, encoder)
    out = build_swl_objective(tape, refs, ds.actions, w, weights.values, lam_ref)
    return tape, out


def kipwl_objective_tape(ds: Dataset, policy_stacks: list[FcStack],
                         encoder: HistoryEncoder, scale: MatchScale,
                         sigma: float, propensities=None, rewards=None,
                         ) -> tuple[Tape, int]:
    """Tape for the count-scale smooth objective; lambda is the tape input."""
    if scale.n_stages != ds.n_stages:
        raise EstimatorError("match scale covers a different stage count")
    w = (ds.rewards if rewards is None else rewards) * ipw_weights(
        ds.propensities if propensities is None else propensities
    )
    tape, refs, lam_ref = _policy_scores_tape(ds, policy_stacks, encoder)
    out = build_kipwl_objective(tape, refs, ds.actions, w, scale, lam_ref, sigma)
    return tape, out


def swl_surrogate_objective(ds: Dataset, policy_stacks: list[FcStack],
                            encoder: HistoryEncoder, weights: StageWeights,
                            lam: float = 5.0, propensities=None, rewards=None,
                            ) -> tuple[float, list[np.ndarray]]:
    """Value and parameter gradients of the smooth stage-weighted objective."""
    if lam <= 0.0:
        raise EstimatorError("lam must be positive")
    tape, _ = swl_objective_tape(ds, policy_stacks, encoder, weights,
                                 propensities, rewards)
    value = tape.forward([np.array([[lam]])])[0, 0]
    return float(value), tape.backward()


def kipwl_surrogate_objective(ds: Dataset, policy_stacks: list[FcStack],
                              encoder: HistoryEncoder, scale: MatchScale,
                              lam: float = 5.0, sigma: float = 1.0,
                              propensities=None, rewards=None,
                              ) -> tuple[float, list[np.ndarray]]:
    """Value and parameter gradients of the smooth count-scale objective."""
    if lam <= 0.0:
        raise EstimatorError("lam must be positive")
    tape, _ = kipwl_objective_tape(ds, policy_stacks, encoder, scale, sigma,
                                   propensities, rewards)
    value = tape.forward([np.array([[lam]])])[0, 0]
    return float(value), tape.backward()
