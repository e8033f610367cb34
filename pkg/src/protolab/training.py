"""Self-play training: one parameter set plays both roles of the game.

Each optimization step rolls a batch of episodes on a fresh tape. The
teacher's relaxed messages feed the student's inputs, so the student's
losses reach the teacher through the channel. Feedback of an agent's
own last message is discretized to a one-hot and carries no gradient.

Per step, the four losses are averaged over the batch and the enabled
subset (configured by loss_set) is backpropagated through a single
combined pass; RMSprop applies the update in place.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import channel as ch
from . import losses
from .agent import AgentConfig, PolicyParams, bind_params, init_params, policy_forward
from .autodiff import (RMSpropState, Tape, TensorOps, argmax_one_hot, backward,
                       one_hot_rows, rmsprop_step)
from .env import ObservationSpace, build_observation_space, sample_episode_batch
from .env import EpisodeTrace, FinalRecord, StepRecord
from .errors import ConfigurationError, TrainingDivergedError
from .losses import LOSS_SETS

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "step_count", "L_AC", "L_SIC", "L_TM", "L_PD",
                   "total", "selfplay_accuracy", "temperature")


@dataclass
class TrainConfig:
    loss_set: str = "ac"
    epochs: int = 300
    steps_per_epoch: int = 50
    batch_size: int = 32
    learning_rate: float = 0.01
    decay: float = 0.9
    epsilon: float = 1e-7
    n_classes: int = 3
    vocab: int = 5
    activation: str = "relu"
    noise_std: float = 0.5
    temperature: float = 1.0
    anneal: bool = False
    mutation: str = ch.MUTATION_OFF
    mutation_probability: float = 0.0
    permutation_subset: int = 0
    seed: int = 0
    eval_games: int = 128
    stop_accuracy: float | None = None
    stop_patience: int = 3

    def validate(self):
        if self.loss_set not in LOSS_SETS:
            raise ConfigurationError(f"loss_set must be one of {LOSS_SETS}, "
                                     f"got {self.loss_set!r}")
        for name in ("epochs", "steps_per_epoch", "batch_size", "eval_games"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        optimizer_ok = (np.isfinite(self.learning_rate) and self.learning_rate > 0
                        and 0 <= self.decay < 1 and np.isfinite(self.epsilon)
                        and self.epsilon > 0)
        if not optimizer_ok:
            raise ConfigurationError("bad optimizer settings")
        if self.stop_accuracy is not None and not 0 < self.stop_accuracy <= 1:
            raise ConfigurationError("stop_accuracy must be in (0, 1]")
        self.channel_config(ch.MODE_TRAINING).validate()
        return self

    def channel_config(self, mode, temperature=None) -> ch.ChannelConfig:
        return ch.ChannelConfig(
            vocab=self.vocab,
            mode=mode,
            temperature=self.temperature if temperature is None else temperature,
            noise_std=self.noise_std,
            mutation=self.mutation,
            mutation_probability=self.mutation_probability,
            permutation_subset=self.permutation_subset,
        )

    def epoch_temperature(self, epoch: int) -> float:
        if self.anneal:
            return ch.anneal_temperature(epoch)
        return self.temperature

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class BatchRecord:
    """Value-level snapshot of one training batch, for traces and tests."""

    order: np.ndarray          # (n, M) establishment class indices
    final: np.ndarray          # (n,) hidden class index
    est_utterances: np.ndarray # (M, n, vocab)
    est_messages: np.ndarray   # (M, n, vocab) delivered values
    mutation_fired: np.ndarray # (M, n) bool
    permutations: np.ndarray | None
    final_utterance: np.ndarray
    final_message: np.ndarray
    predictions: np.ndarray    # (n, M) student output at the test step


@dataclass
class StepResult:
    losses: dict
    total: float
    grads: dict | None
    batch: BatchRecord
    tape: Tape
    tensors: dict


def run_training_step(params: PolicyParams, space: ObservationSpace,
                      cfg: TrainConfig, temperature: float,
                      rng: np.random.Generator, compute_grads: bool = True,
                      utterance_offsets: dict | None = None) -> StepResult:
    """Roll one differentiable batch and backpropagate the enabled losses."""
    n = cfg.batch_size
    m = space.n_classes
    vocab = cfg.vocab
    chan = cfg.channel_config(ch.MODE_TRAINING, temperature)
    tape = Tape()
    ops = TensorOps(tape)
    bound = bind_params(tape, params)

    order, final = sample_episode_batch(space, n, rng)
    perms = inv_perms = None
    if chan.permutation_active:
        perms, inv_perms = ch.sample_permutation_batch(vocab, chan.permutation_subset,
                                                       n, rng)
    heard = np.zeros((n, vocab), dtype=bool)
    m_empty = tape.constant(np.zeros((n, vocab), dtype=np.float32))
    zeros_state = tape.constant(np.zeros((n, params.config.lstm_units), dtype=np.float32))
    t_own = s_own = m_empty
    h_t = c_t = h_s = c_s = zeros_state

    est_msgs = []
    est_utts = []
    fired_rows = []
    for t in range(m):
        obs = tape.constant(space.vectors[order[:, t]])
        utt, _, h_t, c_t = policy_forward(bound, ops, t_own, m_empty, obs, h_t, c_t)
        if utterance_offsets and ("teacher", t) in utterance_offsets:
            utt = ops.add(utt, tape.constant(utterance_offsets[("teacher", t)]))
        msg = ch.transmit_train(utt, chan, rng, ops)
        fired = np.zeros(n, dtype=bool)
        if chan.mutation_active:
            _, fired, replacement = ch.mutate_batch(msg.data, heard,
                                                    chan.mutation_probability,
                                                    chan.mutation, rng)
            if fired.any():
                keep = (~fired)[:, None].astype(np.float32) * np.ones((1, vocab),
                                                                      np.float32)
                repl = np.where(fired[:, None],
                                one_hot_rows(np.maximum(replacement, 0), vocab), 0.0)
                msg = ops.add(ops.mul(msg, tape.constant(keep)),
                              tape.constant(repl.astype(np.float32)))
        # Delivered-symbol history (for kind mutations) is post-channel.
        heard[np.arange(n), msg.data.argmax(axis=1)] = True
        # The sender's view of its own traffic: it knows what it tried to
        # say (utterance argmax) and sees mutation replacements, which
        # rewrite the message itself. Channel sampling noise and the
        # receiver-side permutation are invisible to the sender.
        sent_sym = utt.data.argmax(axis=1)
        if fired.any():
            sent_sym = np.where(fired, replacement, sent_sym)
        if inv_perms is not None:
            msg = ops.gather_cols(msg, inv_perms)
        s_utt, _, h_s, c_s = policy_forward(bound, ops, s_own, msg, obs, h_s, c_s)
        est_msgs.append(msg)
        est_utts.append(utt)
        fired_rows.append(fired)
        t_own = tape.constant(one_hot_rows(sent_sym, vocab))
        s_own = tape.constant(argmax_one_hot(s_utt.data))

    obs_f = tape.constant(space.vectors[final])
    utt_f, _, h_t, c_t = policy_forward(bound, ops, t_own, m_empty, obs_f, h_t, c_t)
    if utterance_offsets and ("teacher", m) in utterance_offsets:
        utt_f = ops.add(utt_f, tape.constant(utterance_offsets[("teacher", m)]))
    # The final message is never mutated: mutation scrambles the protocol
    # while it is being established, not the query about it.
    msg_f = ch.transmit_train(utt_f, chan, rng, ops)
    if inv_perms is not None:
        msg_f = ops.gather_cols(msg_f, inv_perms)
    obs_blank = tape.constant(np.zeros((n, space.k_bits), dtype=np.float32))
    _, pred_f, h_s, c_s = policy_forward(bound, ops, s_own, msg_f, obs_blank, h_s, c_s)

    y_true = one_hot_rows(final, m)
    l_ac = ops.cce(pred_f, y_true)

    est_syms = np.stack([t.data.argmax(axis=1) for t in est_msgs], axis=1)
    final_sym = msg_f.data.argmax(axis=1)
    y_star = losses.sic_target_batch(est_syms, order, final_sym, m).astype(np.float32)
    l_sic = ops.cce(pred_f, y_star)

    tm_idx = losses.tm_step_index(order, final)
    est_vals = np.stack([t.data for t in est_msgs])            # (M, n, vocab)
    tm_target = est_vals[tm_idx, np.arange(n), :]
    l_tm = ops.cce(ops.softmax(utt_f), tm_target)

    col_sums = est_msgs[0]
    for t in est_msgs[1:]:
        col_sums = ops.add(col_sums, t)
    l_pd = ops.mean_all(ops.row_max(col_sums))

    if cfg.loss_set == "ac":
        total = l_ac
    else:
        total = ops.add(ops.add(l_sic, l_tm), l_pd)

    grads = None
    if compute_grads:
        backward(tape, total)
        grads = {}
        for name, leaf in bound.leaves.items():
            grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    batch = BatchRecord(
        order=order, final=final,
        est_utterances=np.stack([t.data for t in est_utts]),
        est_messages=est_vals,
        mutation_fired=np.stack(fired_rows),
        permutations=perms,
        final_utterance=utt_f.data, final_message=msg_f.data,
        predictions=pred_f.data,
    )
    loss_values = {"L_AC": float(l_ac.data), "L_SIC": float(l_sic.data),
                   "L_TM": float(l_tm.data), "L_PD": float(l_pd.data)}
    return StepResult(losses=loss_values, total=float(total.data), grads=grads,
                      batch=batch, tape=tape,
                      tensors={"utt_f": utt_f, "pred_f": pred_f, "total": total,
                               "loss_ac": l_ac, "loss_sic": l_sic,
                               "loss_tm": l_tm, "loss_pd": l_pd})


def batch_traces(batch: BatchRecord, space: ObservationSpace) -> list[EpisodeTrace]:
    """Expand a batch record into per-episode traces."""
    n = batch.order.shape[0]
    m = space.n_classes
    out = []
    for i in range(n):
        steps = []
        for t in range(m):
            cls = int(batch.order[i, t])
            steps.append(StepRecord(
                t=t,
                observation=space.vectors[cls],
                class_label=cls + 1,
                utterance=batch.est_utterances[t, i],
                message=batch.est_messages[t, i],
                mutation_applied=bool(batch.mutation_fired[t, i]),
            ))
        fin = FinalRecord(
            t=m,
            hidden_observation=space.vectors[int(batch.final[i])],
            class_label=int(batch.final[i]) + 1,
            utterance=batch.final_utterance[i],
            message=batch.final_message[i],
            prediction=batch.predictions[i],
        )
        perm = None
        if batch.permutations is not None:
            perm = [int(x) for x in batch.permutations[i]]
        out.append(EpisodeTrace(steps=steps, final=fin, permutation_map=perm,
                                episode_id=i))
    return out


@dataclass
class TrainResult:
    params: PolicyParams
    history: list
    agent_config: AgentConfig
    stopped_early: bool = False


def agent_config_for(cfg: TrainConfig, space: ObservationSpace | None = None) -> AgentConfig:
    space = space or build_observation_space(cfg.n_classes)
    return AgentConfig(vocab=cfg.vocab, n_classes=cfg.n_classes,
                       obs_bits=space.k_bits, activation=cfg.activation)


def rng_streams(seed: int):
    """Independent generators for init, stepping, and held-out evaluation."""
    ss = np.random.SeedSequence(seed)
    init_ss, step_ss, eval_ss = ss.spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(step_ss),
            np.random.default_rng(eval_ss))


def train(cfg: TrainConfig, progress=None) -> TrainResult:
    """Full training run; returns params plus the per-epoch history.

    History rows carry the epoch-mean of each loss, the held-out
    discrete-channel self-play accuracy (with the training
    randomization still active), and the temperature in force.

    Raises TrainingDivergedError with the partial history attached if
    any loss or gradient goes non-finite. No gradient clipping is
    applied anywhere.
    """
    from .evaluation import selfplay_accuracy  # local import, avoids a cycle

    cfg.validate()
    space = build_observation_space(cfg.n_classes)
    agent_cfg = agent_config_for(cfg, space)
    init_rng, step_rng, eval_rng = rng_streams(cfg.seed)
    params = init_params(agent_cfg, init_rng)
    opt = RMSpropState(learning_rate=cfg.learning_rate, decay=cfg.decay,
                       epsilon=cfg.epsilon)
    history = []
    step_count = 0
    streak = 0
    stopped = False
    for epoch in range(cfg.epochs):
        tau = cfg.epoch_temperature(epoch)
        sums = {"L_AC": 0.0, "L_SIC": 0.0, "L_TM": 0.0, "L_PD": 0.0, "total": 0.0}
        for _ in range(cfg.steps_per_epoch):
            res = run_training_step(params, space, cfg, tau, step_rng)
            if not np.isfinite(res.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", epoch=epoch,
                    step=step_count, history=history)
            try:
                rmsprop_step(opt, params.named(), res.grads)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"{exc} at epoch {epoch}", epoch=epoch, step=step_count,
                    history=history) from exc
            for k in ("L_AC", "L_SIC", "L_TM", "L_PD"):
                sums[k] += res.losses[k]
            sums["total"] += res.total
            step_count += 1
        denom = cfg.steps_per_epoch
        accuracy = selfplay_accuracy(params, cfg, cfg.eval_games, eval_rng)
        row = {
            "epoch": epoch,
            "step_count": step_count,
            "L_AC": sums["L_AC"] / denom,
            "L_SIC": sums["L_SIC"] / denom,
            "L_TM": sums["L_TM"] / denom,
            "L_PD": sums["L_PD"] / denom,
            "total": sums["total"] / denom,
            "selfplay_accuracy": accuracy,
            "temperature": tau,
        }
        history.append(row)
        if progress is not None:
            progress(row)
        if cfg.stop_accuracy is not None:
            streak = streak + 1 if accuracy >= cfg.stop_accuracy else 0
            if streak >= cfg.stop_patience:
                stopped = True
                break
    return TrainResult(params=params, history=history, agent_config=agent_cfg,
                       stopped_early=stopped)


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(HISTORY_COLUMNS))
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


def read_history(path):
    with open(path, "r", encoding="utf-8") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            row = dict(rec)
            for k in HISTORY_COLUMNS:
                if k in ("epoch", "step_count"):
                    row[k] = int(row[k])
                else:
                    row[k] = float(row[k])
            rows.append(row)
    return rows
