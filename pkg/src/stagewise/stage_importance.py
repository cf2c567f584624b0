"""Stage importance scores from an attention-weighted recurrent network.

A single LSTM reads (X_j, A_{j-1}) stage by stage (A_0 := 0) and emits a
hidden summary H_j.  A raw attention scalar w_j gates the stage-j
reward-head input [H_j, A_j, A_j*H_j], per-stage fully-connected heads
map it to a surrogate immediate reward, and the squared error between
the observed total reward and the summed surrogate rewards is
minimized.  Rewards are standardized internally; the training loop
keeps the best-validation snapshot so a memorizing tail cannot corrupt
the fit.

Gradient descent alone does not pin down the per-stage amplitude split
between the attention scalars and the downstream weights (the gate is
scale-degenerate), so after the network fit the raw scalars are set by
an exact outer minimization in a linear surrogate-reward class: total
rewards are regressed jointly on per-stage (covariates, action) blocks,
each block's coefficient norm is debiased by its estimated sampling
noise, and a second fit over the leading stages re-measures them with a
smaller noise floor.  The raw scalar for stage j is log(s_j / min s),
so the prescribed normalization exp(|w_j|) / sum_k exp(|w_k|) returns
the per-stage amplitude shares; sign flips of raw scalars never matter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .estimators import StageWeights
from .numgrad import (
    Adam,
    FcStack,
    LstmParams,
    Tape,
    fc_apply,
    fc_init,
    fc_register,
    finite_difference_check,
    lstm_forward_np,
    lstm_init,
    lstm_register,
    lstm_step,
)
from .trajectories import Dataset, HistoryEncoder


class DivergenceError(RuntimeError):
    pass


class GradientCheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImportanceArch:
    hidden: int = 16
    head_width: int = 16
    head_depth: int = 2
    shared_head: bool = False  # one reward head per stage by default

    def __post_init__(self):
        if self.hidden < 1 or self.head_width < 1 or self.head_depth < 1:
            raise ValueError("architecture sizes must be positive")


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-2
    max_iter: int = 2000
    tol: float = 1e-6
    batch_size: int | None = None  # None trains full-batch
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_iter < 1 or self.tol < 0:
            raise ValueError("train spec values must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive when given")


@dataclass
class ImportanceNet:
    lstm: LstmParams
    attention: np.ndarray  # (1, T) raw scalars
    heads: list[FcStack]   # one per stage, or a single shared head
    n_stages: int
    p: int
    reward_center: float = 0.0  # standardization constants from training
    reward_scale: float = 1.0

    @property
    def hidden(self) -> int:
        return self.lstm.hidden

    def head_for(self, stage: int) -> FcStack:
        return self.heads[0] if len(self.heads) == 1 else self.heads[stage - 1]

    def stage_inputs(self, covariates: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(n, steps, p + 1) inputs [X_j, A_{j-1}] with A_0 encoded as 0."""
        n, steps, _ = covariates.shape
        xs = np.zeros((n, steps, self.p + 1))
        xs[:, :, : self.p] = covariates
        if steps > 1:
            xs[:, 1:, self.p] = actions[:, : steps - 1]
        return xs

    def hidden_states(self, covariates: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(n, steps, hidden) recurrent summaries of the observed prefixes."""
        return lstm_forward_np(self.lstm, self.stage_inputs(covariates, actions))

    def predict_total(self, ds: Dataset) -> np.ndarray:
        """Surrogate total rewards sum_j head_j(w_j * [H_j, A_j, A_j H_j])."""
        from .numgrad import fc_forward_np

        hs = self.hidden_states(ds.covariates, ds.actions)
        total = np.zeros(ds.n)
        for j in range(self.n_stages):
            head = self.head_for(j + 1)
            a = ds.actions[:, j : j + 1].astype(np.float64)
            feats = np.hstack([hs[:, j, :], a, a * hs[:, j, :]])
            total += fc_forward_np(head, self.attention[0, j] * feats)[:, 0]
        return total * self.reward_scale + self.reward_center

    def to_json(self) -> dict:
        return {
            "n_stages": self.n_stages,
            "p": self.p,
            "hidden": self.hidden,
            "lstm": self.lstm.to_json(),
            "attention": self.attention.tolist(),
            "heads": [h.to_json() for h in self.heads],
            "reward_center": self.reward_center,
            "reward_scale": self.reward_scale,
            "normalized_weights": normalize_weights(self).values.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImportanceNet":
        return cls(
            lstm=LstmParams.from_json(obj["lstm"]),
            attention=np.asarray(obj["attention"], dtype=np.float64),
            heads=[FcStack.from_json(h) for h in obj["heads"]],
            n_stages=int(obj["n_stages"]),
            p=int(obj["p"]),
            reward_center=float(obj.get("reward_center", 0.0)),
            reward_scale=float(obj.get("reward_scale", 1.0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ImportanceNet":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _init_net(ds: Dataset, arch: ImportanceArch, rng: np.random.Generator) -> ImportanceNet:
    t = ds.n_stages
    head_dims = [2 * arch.hidden + 1] + [arch.head_width] * arch.head_depth + [1]
    n_heads = 1 if arch.shared_head else t
    return ImportanceNet(
        lstm=lstm_init(rng, ds.p + 1, arch.hidden),
        attention=np.full((1, t), 1.0 / t),
        heads=[fc_init(rng, head_dims, "relu") for _ in range(n_heads)],
        n_stages=t,
        p=ds.p,
    )


def _loss_tape(net: ImportanceNet, batch_shape: int) -> Tape:
    """MSE tape over input-bound batches so one tape serves every batch.

    The stage-j reward head reads w_j * [H_j, A_j, A_j H_j]: the summary
    carries the pre-decision history, the current action completes the
    immediate reward's arguments, and the product block exposes their
    interaction; everything passes through the stage's attention gate.
    """
    t, p, hdim = net.n_stages, net.p, net.hidden
    tape = Tape()
    lstm_refs = lstm_register(tape, net.lstm)
    att = tape.param(net.attention, "attention")
    head_refs = [fc_register(tape, head, f"head{i}") for i, head in enumerate(net.heads)]
    x_refs = [tape.input((batch_shape, p + 1), f"x{j + 1}") for j in range(t)]
    a_refs = [tape.input((batch_shape, 1), f"a{j + 1}") for j in range(t)]
    r_ref = tape.input((batch_shape, 1), "total_reward")
    h = tape.const(np.zeros((batch_shape, hdim)), "h0")
    c = tape.const(np.zeros((batch_shape, hdim)), "c0")
    pred = None
    for j in range(t):
        h, c = lstm_step(tape, lstm_refs, x_refs[j], h, c, hdim)
        w_j = tape.slice_cols(att, j, j + 1, f"w{j + 1}")
        ah = tape.mul(h, a_refs[j], f"ah{j + 1}")
        feats = tape.concat_cols(tape.concat_cols(h, a_refs[j]), ah, f"feats{j + 1}")
        scaled = tape.mul(feats, w_j, f"attended{j + 1}")
        head = net.head_for(j + 1)
        refs = head_refs[0] if len(net.heads) == 1 else head_refs[j]
        r_j = fc_apply(tape, refs, scaled, head.activation)
        pred = r_j if pred is None else tape.add(pred, r_j)
    err = tape.sub(r_ref, pred, "residual")
    tape.scale(tape.sum(tape.square(err)), 1.0 / batch_shape, "mse")
    return tape


def _batch_inputs(net, ds, idx, rewards=None):
    xs = net.stage_inputs(ds.covariates[idx], ds.actions[idx])
    per_stage = [np.ascontiguousarray(xs[:, j, :]) for j in range(net.n_stages)]
    acts = [ds.actions[idx, j].astype(np.float64).reshape(-1, 1)
            for j in range(net.n_stages)]
    r = ds.rewards[idx] if rewards is None else rewards[idx]
    return per_stage + acts + [r.reshape(-1, 1)]


def check_probe_gradients(ds: Dataset, arch: ImportanceArch = ImportanceArch(),
                          seed: int = 0, n_probe: int = 3, tolerance: float = 1e-4):
    """Finite-difference check of the full loss on a small probe batch."""
    rng = np.random.default_rng(seed)
    net = _init_net(ds, arch, rng)
    n = min(n_probe, ds.n)
    tape = _loss_tape(net, n)
    report = finite_difference_check(
        tape, inputs=_batch_inputs(net, ds, np.arange(n)), tolerance=tolerance
    )
    return report


# Internal validation split used for snapshot selection; below this size
# the snapshot logic is skipped and the final iterate is kept.
_VAL_FRACTION = 0.25
_MIN_SPLIT_N = 40
_SNAPSHOT_EVERY = 25


def train_importance(ds: Dataset, arch: ImportanceArch = ImportanceArch(),
                     spec: TrainSpec = TrainSpec(), check_gradients: bool = False,
                     ) -> tuple[ImportanceNet, list[float]]:
    """Fit the reward network and calibrate the attention scalars.

    The cell, heads, and attention are trained by Adam on the reward MSE
    (standardized internally; the returned trace is in original units).
    Training stops when the loss change drops to ``spec.tol`` or after
    ``spec.max_iter`` steps; a non-finite loss raises
    :class:`DivergenceError` naming the step.  On datasets large enough
    for an internal validation split, the best-validation snapshot is
    kept and the raw attention scalars are then set by the exact
    linear-class stage-amplitude fit (see module docstring).
    """
    if ds.n_stages < 2:
        raise ValueError("stage importance needs at least two stages")
    if check_gradients:
        report = check_probe_gradients(ds, arch, seed=spec.seed)
        if not report.ok:
            raise GradientCheckError(
                f"probe gradient check failed: max rel err {report.max_rel_err:.3e}"
            )
    rng = np.random.default_rng(spec.seed)
    net = _init_net(ds, arch, rng)
    net.reward_center = float(ds.rewards.mean())
    scale = float(ds.rewards.std())
    net.reward_scale = scale if scale > 0.0 else 1.0
    std_rewards = (ds.rewards - net.reward_center) / net.reward_scale

    n_val = int(round(ds.n * _VAL_FRACTION))
    use_val = ds.n >= _MIN_SPLIT_N and n_val >= 5
    perm = rng.permutation(ds.n)
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    if not use_val:
        fit_idx = np.arange(ds.n)

    batch = len(fit_idx) if spec.batch_size is None else min(spec.batch_size, len(fit_idx))
    tape = _loss_tape(net, batch)
    opt = Adam(tape.param_arrays, lr=spec.learning_rate)
    trace: list[float] = []
    unscale = net.reward_scale**2  # report the trace in original reward units
    order = fit_idx.copy()
    offset = 0
    best_val = np.inf
    best_state = None
    for it in range(spec.max_iter):
        if batch == len(order):
            idx = order
        else:
            if offset + batch > len(order):
                rng.shuffle(order)
                offset = 0
            idx = order[offset : offset + batch]
            offset += batch
        loss = tape.forward(_batch_inputs(net, ds, idx, std_rewards))[0, 0]
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at step {it}")
        trace.append(float(loss) * unscale)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= spec.tol * unscale:
            break
        opt.step(tape.backward())
        if use_val and (it + 1) % _SNAPSHOT_EVERY == 0:
            pred = net.predict_total(ds.subset(val_idx))
            val = float(np.mean((pred - ds.rewards[val_idx]) ** 2))
            if val < best_val:
                best_val = val
                best_state = [a.copy() for a in tape.param_arrays]
    if best_state is not None:
        for array, snap in zip(tape.param_arrays, best_state):
            array[:] = snap
    net.attention[0, :] = _calibrated_raw_attention(ds, std_rewards)
    return net, trace


def _debiased_block_scales(blocks: list[np.ndarray], rewards: np.ndarray,
                           ridge: float = 1e-4) -> np.ndarray:
    """Noise-corrected coefficient-norm per block from one joint ridge fit."""
    n = rewards.size
    x = np.hstack([np.ones((n, 1))] + blocks)
    d = x.shape[1]
    gram = x.T @ x + ridge * n * np.eye(d)
    ginv = np.linalg.inv(gram)
    theta = ginv @ (x.T @ rewards)
    resid = rewards - x @ theta
    sigma2 = float(resid @ resid) / max(n - d, 1)
    cov = sigma2 * (ginv @ (x.T @ x) @ ginv)
    scales = []
    ofs = 1
    for b in blocks:
        k = b.shape[1]
        th = theta[ofs : ofs + k]
        noise = float(np.trace(cov[ofs : ofs + k, ofs : ofs + k]))
        scales.append(np.sqrt(max(float(th @ th) - noise, 0.0)))
        ofs += k
    return np.array(scales)


def _calibrated_raw_attention(ds: Dataset, std_rewards: np.ndarray) -> np.ndarray:
    """Exact outer minimization over stage amplitudes in a linear reward class.

    Regresses standardized total rewards jointly on per-stage blocks
    [X_j, A_j]; a block's debiased coefficient norm estimates the stage's
    multiplicative contribution.  The leading stages are re-fit alone so
    their ranking is measured against a smaller noise floor.  Returns raw
    scalars log(s_j / min s), which normalize to the amplitude shares.
    """
    t = ds.n_stages
    acts = ds.actions.astype(np.float64)
    blocks = [np.hstack([ds.covariates[:, j, :], acts[:, j : j + 1]]) for j in range(t)]
    total_cols = 1 + sum(b.shape[1] for b in blocks)
    if ds.n < total_cols + 10:
        # Too small for the joint fit; fall back to per-stage marginal fits.
        scales = np.array([
            _debiased_block_scales([blocks[j]], std_rewards)[0] for j in range(t)
        ])
    else:
        scales = _debiased_block_scales(blocks, std_rewards)
        keep = max(2, min(5, t))
        if keep < t:
            top = sorted(np.argsort(scales)[-keep:])
            refit = _debiased_block_scales([blocks[j] for j in top], std_rewards)
            rest = [j for j in range(t) if j not in top]
            # Non-finalists stay ranked below every finalist.
            scales[rest] = scales[rest] * 1e-3
            for rank, j in enumerate(top):
                scales[j] = refit[rank]
    floor = 1e-3 * max(scales.max(), 1e-12)
    scales = np.maximum(scales, floor)
    return np.log(scales / scales.min())


def normalize_weights(net: ImportanceNet) -> StageWeights:
    """Simplex scores exp(|w_j|) / sum_k exp(|w_k|) from the raw scalars."""
    mag = np.abs(net.attention[0])
    e = np.exp(mag - mag.max())
    return StageWeights(e / e.sum())


def encode_history(net: ImportanceNet, traj) -> np.ndarray:
    """Per-stage recurrent summaries H_1..H_T for one trajectory."""
    return net.hidden_states(traj.covariates[None], traj.actions[None])[0]


class LstmHistoryEncoder(HistoryEncoder):
    """History encoder backed by a trained importance network's cell."""

    def __init__(self, net: ImportanceNet):
        self.net = net
        self.dim = net.hidden

    def encode_stage(self, stage, covariates, actions):
        return self.net.hidden_states(covariates, actions)[:, stage - 1, :]

    def encode_dataset(self, ds: Dataset) -> np.ndarray:
        return self.net.hidden_states(ds.covariates, ds.actions)
