"""Observed treatment sequences, regimes, history encoding, and persistence.

A dataset is a balanced panel: every subject has the same number of
stages T and covariate dimension p.  Storage is columnar (one array per
field) so estimators can vectorize across subjects; `Trajectory` is the
per-subject view.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class ValidationError(ValueError):
    """A trajectory or dataset violates a structural invariant."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


_REWARD_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Trajectory:
    """One subject: per-stage covariates, signed actions, propensities, reward."""

    covariates: np.ndarray            # (T, p)
    actions: np.ndarray               # (T,) values in {-1, +1}
    propensities: np.ndarray          # (T,) in (0, 1), prob of the observed action
    reward: float
    immediate_rewards: np.ndarray | None = None  # (T,), simulation only

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=np.float64)
        act = np.asarray(self.actions, dtype=np.int64)
        pro = np.asarray(self.propensities, dtype=np.float64)
        if cov.ndim != 2:
            raise ValidationError("covariates must be a (T, p) array")
        t = cov.shape[0]
        if act.shape != (t,) or pro.shape != (t,):
            raise ValidationError("actions and propensities must have one entry per stage")
        _check_actions(act)
        _check_propensities(pro)
        if not np.all(np.isfinite(cov)) or not np.isfinite(self.reward):
            raise ValidationError("covariates and reward must be finite")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "actions", act)
        object.__setattr__(self, "propensities", pro)
        if self.immediate_rewards is not None:
            imm = np.asarray(self.immediate_rewards, dtype=np.float64)
            if imm.shape != (t,):
                raise ValidationError("immediate_rewards must have one entry per stage")
            if abs(imm.sum() - self.reward) > _REWARD_SUM_TOL:
                raise ValidationError(
                    f"immediate rewards sum to {imm.sum()!r}, not the total reward "
                    f"{self.reward!r}"
                )
            object.__setattr__(self, "immediate_rewards", imm)

    @property
    def n_stages(self) -> int:
        return self.covariates.shape[0]


def _check_actions(actions: np.ndarray) -> None:
    if not np.all(np.isin(actions, (-1, 1))):
        raise ValidationError("actions must be -1 or +1")


def _check_propensities(pro: np.ndarray) -> None:
    if np.any(pro <= 0.0) or np.any(pro >= 1.0):
        raise ValidationError(
            "propensities must lie strictly inside (0, 1); every action needs "
            "positive assignment probability (positivity)"
        )


class Dataset:
    """A balanced panel of trajectories stored columnarly."""

    def __init__(self, covariates, actions, propensities, rewards,
                 immediate_rewards=None, seed=None):
        self.covariates = np.asarray(covariates, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.propensities = np.asarray(propensities, dtype=np.float64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.immediate_rewards = (
            None if immediate_rewards is None
            else np.asarray(immediate_rewards, dtype=np.float64)
        )
        self.seed = seed
        self._validate()

    def _validate(self):
        if self.covariates.ndim != 3:
            raise ValidationError("covariates must be (n, T, p)")
        n, t, _ = self.covariates.shape
        if n < 1:
            raise ValidationError("dataset needs at least one trajectory")
        if self.actions.shape != (n, t) or self.propensities.shape != (n, t):
            raise ValidationError("actions/propensities must be (n, T)")
        if self.rewards.shape != (n,):
            raise ValidationError("rewards must be (n,)")
        _check_actions(self.actions)
        _check_propensities(self.propensities)
        if not np.all(np.isfinite(self.covariates)) or not np.all(np.isfinite(self.rewards)):
            raise ValidationError("covariates and rewards must be finite")
        if self.immediate_rewards is not None:
            if self.immediate_rewards.shape != (n, t):
                raise ValidationError("immediate_rewards must be (n, T)")
            gap = np.abs(self.immediate_rewards.sum(axis=1) - self.rewards)
            if gap.max() > _REWARD_SUM_TOL:
                i = int(gap.argmax())
                raise ValidationError(
                    f"immediate rewards of subject {i} do not sum to its total reward "
                    f"(gap {gap[i]:.3e})"
                )

    # -- basic shape ---------------------------------------------------

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_stages(self) -> int:
        return self.covariates.shape[1]

    @property
    def p(self) -> int:
        return self.covariates.shape[2]

    def __len__(self) -> int:
        return self.n

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            self.covariates[i],
            self.actions[i],
            self.propensities[i],
            float(self.rewards[i]),
            None if self.immediate_rewards is None else self.immediate_rewards[i],
        )

    def __iter__(self):
        return (self.trajectory(i) for i in range(self.n))

    @classmethod
    def from_trajectories(cls, trajectories, seed=None) -> "Dataset":
        trajectories = list(trajectories)
        if not trajectories:
            raise ValidationError("dataset needs at least one trajectory")
        t0 = trajectories[0]
        t, p = t0.covariates.shape
        for tr in trajectories:
            if tr.covariates.shape != (t, p):
                raise ValidationError(
                    "all trajectories must share the same stage count and "
                    "covariate dimension (balanced panel)"
                )
        has_imm = all(tr.immediate_rewards is not None for tr in trajectories)
        return cls(
            np.stack([tr.covariates for tr in trajectories]),
            np.stack([tr.actions for tr in trajectories]),
            np.stack([tr.propensities for tr in trajectories]),
            np.array([tr.reward for tr in trajectories]),
            np.stack([tr.immediate_rewards for tr in trajectories]) if has_imm else None,
            seed=seed,
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.covariates[idx],
            self.actions[idx],
            self.propensities[idx],
            self.rewards[idx],
            None if self.immediate_rewards is None else self.immediate_rewards[idx],
            seed=self.seed,
        )


# -- history encoding ----------------------------------------------------


class HistoryEncoder:
    """Deterministic summary of (X_1, A_1, ..., A_{j-1}, X_j) into a fixed-width vector."""

    dim: int

    def encode_stage(self, stage: int, covariates: np.ndarray,
                     actions: np.ndarray) -> np.ndarray:
        """Encode stage ``stage`` (1-based) histories for a batch.

        ``covariates`` is (n, stage, p): covariates observed through the
        current stage.  ``actions`` is (n, stage - 1): actions taken at
        earlier stages.  Returns (n, dim).
        """
        raise NotImplementedError

    def encode_dataset(self, ds: Dataset) -> np.ndarray:
        """All stage encodings for a dataset, shape (n, T, dim)."""
        t = ds.n_stages
        out = np.empty((ds.n, t, self.dim))
        for j in range(1, t + 1):
            out[:, j - 1, :] = self.encode_stage(
                j, ds.covariates[:, :j, :], ds.actions[:, : j - 1]
            )
        return out


class ConcatEncoder(HistoryEncoder):
    """Zero-padded concatenation of (X_1..X_j, A_1..A_{j-1}) to a fixed width."""

    def __init__(self, n_stages: int, p: int):
        self.n_stages = n_stages
        self.p = p
        self.dim = n_stages * p + (n_stages - 1)

    def encode_stage(self, stage, covariates, actions):
        n = covariates.shape[0]
        out = np.zeros((n, self.dim))
        out[:, : stage * self.p] = covariates.reshape(n, stage * self.p)
        if stage > 1:
            a0 = self.n_stages * self.p
            out[:, a0 : a0 + stage - 1] = actions
        return out

    @classmethod
    def for_dataset(cls, ds: Dataset) -> "ConcatEncoder":
        return cls(ds.n_stages, ds.p)


@dataclass
class StagePrefix:
    """The observed (or rolled-out) history available when deciding a stage."""

    stage: int                 # 1-based
    covariates: np.ndarray     # (n, stage, p)
    actions: np.ndarray        # (n, stage - 1)
    encoder: HistoryEncoder | None = None

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def current_covariates(self) -> np.ndarray:
        return self.covariates[:, -1, :]

    @cached_property
    def encoded(self) -> np.ndarray:
        if self.encoder is None:
            raise ValidationError(
                "this regime needs encoded histories but no encoder was supplied"
            )
        return self.encoder.encode_stage(self.stage, self.covariates, self.actions)


# -- regimes ---------------------------------------------------------------


class Regime:
    """A sequence of per-stage decision rules emitting signed decisions.

    Stage-j decisions may read covariates 1..j and actions 1..j-1 only;
    the prefix handed to `decide_batch` enforces that window.
    """

    def decide_batch(self, prefix: StagePrefix) -> np.ndarray:
        """Signed decisions, shape (n,), values in {-1, +1}."""
        raise NotImplementedError

    def decide(self, stage, covariates, actions, encoder=None) -> int:
        """Single-subject decision at a 1-based stage."""
        prefix = StagePrefix(
            stage,
            np.asarray(covariates, dtype=np.float64)[None, :, :],
            np.asarray(actions, dtype=np.float64).reshape(1, -1),
            encoder,
        )
        return int(self.decide_batch(prefix)[0])


def signs(scores: np.ndarray) -> np.ndarray:
    """Decision signs with the global tie rule sign(0) := +1."""
    return np.where(scores >= 0.0, 1, -1).astype(np.int64)


class FunctionRegime(Regime):
    """Per-stage score functions over the current covariate vector."""

    def __init__(self, score_fns):
        self.score_fns = list(score_fns)

    def decide_batch(self, prefix):
        fn = self.score_fns[prefix.stage - 1]
        return signs(np.asarray(fn(prefix.current_covariates), dtype=np.float64))


class SequenceRegime(Regime):
    """Replays a fixed action sequence, one per stage (optionally per subject)."""

    def __init__(self, actions):
        self.actions = np.asarray(actions, dtype=np.int64)
        _check_actions(self.actions)

    def decide_batch(self, prefix):
        j = prefix.stage - 1
        if self.actions.ndim == 1:
            return np.full(prefix.n, self.actions[j], dtype=np.int64)
        if self.actions.shape[0] != prefix.n:
            raise ValidationError("per-subject action matrix does not match batch size")
        return self.actions[:, j]


def behavior_regime(ds: Dataset) -> SequenceRegime:
    """The regime that reproduces each subject's observed actions."""
    return SequenceRegime(ds.actions)


class ComplementRegime(Regime):
    def __init__(self, base: Regime):
        self.base = base

    def decide_batch(self, prefix):
        return -self.base.decide_batch(prefix)


class RandomRegime(Regime):
    """Uniform coin-flip decisions; reseed before each evaluation for determinism."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reseed(self, seed: int | None = None):
        self._rng = np.random.default_rng(self.seed if seed is None else seed)

    def decide_batch(self, prefix):
        return self._rng.choice(np.array([-1, 1], dtype=np.int64), size=prefix.n)


# -- matching ---------------------------------------------------------------


def match_matrix(ds: Dataset, regime: Regime, encoder: HistoryEncoder | None = None,
                 ) -> np.ndarray:
    """Per-stage agreement indicators between observed actions and the regime.

    Histories are built from the observed prefix (realized actions), so a
    regime decision at stage j sees exactly what was recorded through j.
    Returns an (n, T) 0/1 array.
    """
    n, t = ds.actions.shape
    out = np.empty((n, t), dtype=np.int64)
    for j in range(1, t + 1):
        prefix = StagePrefix(j, ds.covariates[:, :j, :], ds.actions[:, : j - 1], encoder)
        out[:, j - 1] = regime.decide_batch(prefix) == ds.actions[:, j - 1]
    return out


def matching_counts(ds: Dataset, regime: Regime, encoder=None) -> np.ndarray:
    """Number of matched stages per subject, each in [0, T]."""
    return match_matrix(ds, regime, encoder).sum(axis=1)


def matching_count(traj: Trajectory, regime: Regime, encoder=None) -> int:
    """Matched-stage count for a single trajectory."""
    ds = Dataset(
        traj.covariates[None], traj.actions[None], traj.propensities[None],
        np.array([traj.reward]),
    )
    return int(matching_counts(ds, regime, encoder)[0])


# -- splitting ---------------------------------------------------------------


def train_test_split(ds: Dataset, train_fraction: float, seed: int,
                     ) -> tuple[Dataset, Dataset]:
    """Disjoint random partition with round(n * fraction) training subjects."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must be in (0, 1)")
    n_train = int(round(ds.n * train_fraction))
    if n_train < 1 or n_train >= ds.n:
        raise ValidationError(
            f"degenerate split: {n_train} of {ds.n} subjects on the training side"
        )
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


# -- persistence --------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """Write the canonical JSON document (lossless for finite doubles)."""
    records = []
    for i in range(ds.n):
        rec = {
            "covariates": ds.covariates[i].tolist(),
            "actions": ds.actions[i].tolist(),
            "propensities": ds.propensities[i].tolist(),
            "reward": float(ds.rewards[i]),
        }
        if ds.immediate_rewards is not None:
            rec["immediate_rewards"] = ds.immediate_rewards[i].tolist()
        records.append(rec)
    doc = {
        "n": ds.n,
        "T": ds.n_stages,
        "p": ds.p,
        "has_immediate_rewards": ds.immediate_rewards is not None,
        "records": records,
    }
    if ds.seed is not None:
        doc["seed"] = ds.seed
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(
                f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"
            ) from exc
    try:
        n, t, p = int(doc["n"]), int(doc["T"]), int(doc["p"])
        records = doc["records"]
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: missing dataset header field: {exc}") from exc
    if len(records) != n:
        raise DatasetFormatError(f"{path}: header says n={n} but found {len(records)} records")
    has_imm = bool(doc.get("has_immediate_rewards", False))
    cov = np.empty((n, t, p))
    act = np.empty((n, t), dtype=np.int64)
    pro = np.empty((n, t))
    rew = np.empty(n)
    imm = np.empty((n, t)) if has_imm else None
    for i, rec in enumerate(records):
        c = np.asarray(rec["covariates"], dtype=np.float64)
        if c.shape != (t, p):
            raise DatasetFormatError(
                f"{path}: record {i} covariates have shape {c.shape}, expected {(t, p)}"
            )
        cov[i] = c
        act[i] = rec["actions"]
        pro[i] = rec["propensities"]
        rew[i] = rec["reward"]
        if has_imm:
            imm[i] = rec["immediate_rewards"]
    return Dataset(cov, act, pro, rew, imm, seed=doc.get("seed"))


def export_csv(ds: Dataset, path) -> None:
    """Spreadsheet view: one row per subject-stage; reward on the last stage."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["subject", "stage"]
        header += [f"x{k + 1}" for k in range(ds.p)]
        header += ["action", "propensity"]
        if ds.immediate_rewards is not None:
            header.append("immediate_reward")
        header.append("reward")
        writer.writerow(header)
        for i in range(ds.n):
            for j in range(ds.n_stages):
                row = [i, j + 1]
                row += [repr(v) for v in ds.covariates[i, j]]
                row += [int(ds.actions[i, j]), repr(float(ds.propensities[i, j]))]
                if ds.immediate_rewards is not None:
                    row.append(repr(float(ds.immediate_rewards[i, j])))
                row.append(repr(float(ds.rewards[i])) if j == ds.n_stages - 1 else "")
                writer.writerow(row)
