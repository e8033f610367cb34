"""Evaluation: discrete-channel games and the metrics computed on them.

The runner here mirrors the training rollout but with a test-mode
channel (argmax one-hots, no noise) and arbitrary "actors" on either
side, so policies can be paired with each other, with themselves, or
with scripted opponents.

Metrics:

  performance           prediction accuracy over clean-channel games
  zcp                   mean pairwise accuracy between strangers,
                        every ordered pair of a trained population
  responsiveness_student exp(-mean sic loss) against a synthetic
                        teacher that expresses a fresh random injective
                        protocol each episode
  responsiveness_teacher exp(-mean tm loss) with every establishment
                        message mutated (kind, probability 1)
  protocol_diversity    1 / mean pd loss on a clean channel
  selfplay_accuracy     accuracy of an agent with itself, discrete
                        channel, training randomization still active
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .agent import PolicyParams, act_batch
from .autodiff import argmax_one_hot, one_hot_rows
from .env import ObservationSpace, build_observation_space, sample_episode_batch
from .errors import UsageError
from .losses import PROB_FLOOR, sic_target_batch, tm_step_index
from .training import BatchRecord, TrainConfig

DEFAULT_METRIC_EPISODES = 1000
DEFAULT_ZCP_GAMES = 170


class PolicyActor:
    """Adapter driving a PolicyParams network over batched episodes."""

    def __init__(self, params: PolicyParams):
        self.params = params

    def begin(self, n, rng):
        u = self.params.config.lstm_units
        return (np.zeros((n, u), dtype=np.float32),
                np.zeros((n, u), dtype=np.float32))

    def step(self, state, own_last, other_last, obs):
        h, c = state
        utt, pred, h2, c2 = act_batch(self.params, h, c, own_last, other_last, obs)
        return utt, pred, (h2, c2)


class SyntheticProtocolTeacher:
    """Scripted teacher speaking a fresh uniform injective protocol.

    Each episode maps the class labels to distinct symbols, drawn
    uniformly, and utters the mapped symbol for whatever it observes,
    including the hidden observation at the test step.
    """

    def __init__(self, space: ObservationSpace, vocab: int):
        if vocab < space.n_classes:
            raise UsageError("injective protocols need vocab >= n_classes")
        self.space = space
        self.vocab = vocab
        self._weights = (1 << np.arange(space.k_bits)).astype(np.float64)

    def begin(self, n, rng):
        table = rng.permuted(np.tile(np.arange(self.vocab), (n, 1)), axis=1)
        return {"protocol": table[:, : self.space.n_classes], "n": n}

    def step(self, state, own_last, other_last, obs):
        labels = np.rint(obs.astype(np.float64) @ self._weights).astype(int)
        symbols = state["protocol"][np.arange(state["n"]), labels - 1]
        utt = one_hot_rows(symbols, self.vocab)
        pred = np.full((state["n"], self.space.n_classes),
                       1.0 / self.space.n_classes, dtype=np.float32)
        return utt, pred, state


class NullStudent:
    """Placeholder for runs where only the teacher's side matters."""

    def __init__(self, space: ObservationSpace, vocab: int):
        self.space = space
        self.vocab = vocab

    def begin(self, n, rng):
        return n

    def step(self, state, own_last, other_last, obs):
        n = state
        utt = np.zeros((n, self.vocab), dtype=np.float32)
        pred = np.full((n, self.space.n_classes), 1.0 / self.space.n_classes,
                       dtype=np.float32)
        return utt, pred, state


def run_episodes(teacher, student, space: ObservationSpace, chan: ch.ChannelConfig,
                 n: int, rng: np.random.Generator) -> BatchRecord:
    """Play n discrete-channel episodes and record everything."""
    chan.validate()
    if chan.mode != ch.MODE_TEST:
        raise UsageError("run_episodes needs a test-mode channel config")
    m = space.n_classes
    vocab = chan.vocab
    order, final = sample_episode_batch(space, n, rng)
    perms = inv_perms = None
    if chan.permutation_active:
        perms, inv_perms = ch.sample_permutation_batch(vocab, chan.permutation_subset,
                                                       n, rng)
    heard = np.zeros((n, vocab), dtype=bool)
    m_empty = np.zeros((n, vocab), dtype=np.float32)
    t_state = teacher.begin(n, rng)
    s_state = student.begin(n, rng)
    t_own = m_empty
    s_own = m_empty
    est_msgs, est_utts, fired_rows = [], [], []
    rows = np.arange(n)
    for t in range(m):
        obs = space.vectors[order[:, t]]
        utt, _, t_state = teacher.step(t_state, t_own, m_empty, obs)
        msg = ch.transmit_test(utt)
        fired = np.zeros(n, dtype=bool)
        if chan.mutation_active:
            msg, fired, _ = ch.mutate_batch(msg, heard, chan.mutation_probability,
                                            chan.mutation, rng)
        # Sender-side view first: mutation rewrites the message itself,
        # permutation only reindexes what the receiver hears.
        sent = msg.argmax(axis=1)
        heard[rows, sent] = True
        if inv_perms is not None:
            msg = np.take_along_axis(msg, inv_perms, axis=1)
        s_utt, _, s_state = student.step(s_state, s_own, msg, obs)
        est_msgs.append(msg)
        est_utts.append(utt)
        fired_rows.append(fired)
        t_own = one_hot_rows(sent, vocab)
        s_own = argmax_one_hot(s_utt)
    obs_f = space.vectors[final]
    utt_f, _, t_state = teacher.step(t_state, t_own, m_empty, obs_f)
    msg_f = ch.transmit_test(utt_f)
    if inv_perms is not None:
        msg_f = np.take_along_axis(msg_f, inv_perms, axis=1)
    blank = np.zeros((n, space.k_bits), dtype=np.float32)
    _, pred, s_state = student.step(s_state, s_own, msg_f, blank)
    return BatchRecord(
        order=order, final=final,
        est_utterances=np.stack(est_utts), est_messages=np.stack(est_msgs),
        mutation_fired=np.stack(fired_rows), permutations=perms,
        final_utterance=utt_f, final_message=msg_f, predictions=pred,
    )


def batch_accuracy(batch: BatchRecord) -> float:
    return float((batch.predictions.argmax(axis=1) == batch.final).mean())


def _cce_rows(pred, target):
    """Per-row cross-entropy, float64, floor-clamped."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return -(t * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1)


def batch_sic_losses(batch: BatchRecord, n_classes: int):
    est_syms = batch.est_messages.argmax(axis=2).T          # (n, steps)
    final_sym = batch.final_message.argmax(axis=1)
    target = sic_target_batch(est_syms, batch.order, final_sym, n_classes)
    return _cce_rows(batch.predictions, target)


def batch_tm_losses(batch: BatchRecord):
    logits = np.asarray(batch.final_utterance, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    idx = tm_step_index(batch.order, batch.final)
    n = batch.order.shape[0]
    target = batch.est_messages[idx, np.arange(n), :]
    return _cce_rows(probs, target)


def batch_pd_losses(batch: BatchRecord):
    sums = np.abs(batch.est_messages.astype(np.float64)).sum(axis=0)
    return sums.max(axis=1)


def _space_for(params: PolicyParams) -> ObservationSpace:
    space = build_observation_space(params.config.n_classes)
    if space.k_bits != params.config.obs_bits:
        raise UsageError(
            f"agent expects {params.config.obs_bits} observation bits but the "
            f"game provides {space.k_bits}")
    return space


def clean_channel(vocab: int) -> ch.ChannelConfig:
    return ch.ChannelConfig(vocab=vocab, mode=ch.MODE_TEST, noise_std=0.0)


def performance(teacher_params: PolicyParams, student_params: PolicyParams,
                n_games: int, rng: np.random.Generator) -> float:
    """Prediction accuracy over clean-channel games."""
    if teacher_params.config != student_params.config:
        raise UsageError("paired agents must share a network configuration")
    space = _space_for(teacher_params)
    batch = run_episodes(PolicyActor(teacher_params), PolicyActor(student_params),
                         space, clean_channel(teacher_params.config.vocab),
                         n_games, rng)
    return batch_accuracy(batch)


@dataclass
class ZcpResult:
    mean: float
    std: float
    encounters: list   # (teacher_id, student_id, n_games, accuracy)


def zcp(population, games_per_direction: int = DEFAULT_ZCP_GAMES,
        seed: int = 0) -> ZcpResult:
    """Zero-shot cross-play over every ordered pair of distinct agents.

    The mean weights every game equally; the std is taken across the
    per-encounter accuracies, which is the spread that matters when
    asking how reliably strangers understand each other.
    """
    agents = list(population)
    if len(agents) < 2:
        raise UsageError("zcp needs at least 2 agents")
    if games_per_direction < 1:
        raise UsageError("games_per_direction must be >= 1")
    pairs = [(i, j) for i in range(len(agents)) for j in range(len(agents)) if i != j]
    seeds = np.random.SeedSequence(seed).spawn(len(pairs))
    encounters = []
    for (i, j), s in zip(pairs, seeds):
        acc = performance(agents[i], agents[j], games_per_direction,
                          np.random.default_rng(s))
        encounters.append((i, j, games_per_direction, acc))
    accs = np.array([e[3] for e in encounters])
    return ZcpResult(mean=float(accs.mean()), std=float(accs.std()),
                     encounters=encounters)


@dataclass
class MetricResult:
    score: float
    mean_loss: float
    n_episodes: int


def responsiveness_student(params: PolicyParams,
                           n_episodes: int = DEFAULT_METRIC_EPISODES,
                           rng: np.random.Generator | None = None) -> MetricResult:
    """How well the agent follows a protocol it has never seen before."""
    rng = rng if rng is not None else np.random.default_rng(0)
    space = _space_for(params)
    vocab = params.config.vocab
    teacher = SyntheticProtocolTeacher(space, vocab)
    batch = run_episodes(teacher, PolicyActor(params), space, clean_channel(vocab),
                         n_episodes, rng)
    mean_loss = float(batch_sic_losses(batch, space.n_classes).mean())
    return MetricResult(score=float(np.exp(-mean_loss)), mean_loss=mean_loss,
                        n_episodes=n_episodes)


def responsiveness_teacher(params: PolicyParams,
                           n_episodes: int = DEFAULT_METRIC_EPISODES,
                           rng: np.random.Generator | None = None) -> MetricResult:
    """How well the agent, as teacher, echoes a protocol forced on it.

    Every establishment message is replaced by a fresh unheard symbol
    (kind mutation at probability 1), so the delivered protocol is a
    random injective one; the score asks whether the final utterance
    names the hidden observation in that forced protocol.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    space = _space_for(params)
    vocab = params.config.vocab
    chan = ch.ChannelConfig(vocab=vocab, mode=ch.MODE_TEST, noise_std=0.0,
                            mutation=ch.MUTATION_KIND, mutation_probability=1.0)
    batch = run_episodes(PolicyActor(params), NullStudent(space, vocab), space,
                         chan, n_episodes, rng)
    mean_loss = float(batch_tm_losses(batch).mean())
    return MetricResult(score=float(np.exp(-mean_loss)), mean_loss=mean_loss,
                        n_episodes=n_episodes)


def protocol_diversity(params: PolicyParams,
                       n_episodes: int = DEFAULT_METRIC_EPISODES,
                       rng: np.random.Generator | None = None) -> MetricResult:
    """Reciprocal of the mean worst-case symbol reuse across episodes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    space = _space_for(params)
    vocab = params.config.vocab
    batch = run_episodes(PolicyActor(params), NullStudent(space, vocab), space,
                         clean_channel(vocab), n_episodes, rng)
    mean_loss = float(batch_pd_losses(batch).mean())
    return MetricResult(score=float(1.0 / mean_loss), mean_loss=mean_loss,
                        n_episodes=n_episodes)


def selfplay_accuracy(params: PolicyParams, cfg: TrainConfig, n_games: int,
                      rng: np.random.Generator) -> float:
    """Self-play accuracy on a discrete channel, randomization retained."""
    space = _space_for(params)
    chan = cfg.channel_config(ch.MODE_TEST)
    actor = PolicyActor(params)
    batch = run_episodes(actor, actor, space, chan, n_games, rng)
    return batch_accuracy(batch)


@dataclass
class ProtocolHeatmap:
    class_symbol: np.ndarray      # (n_classes, vocab) counts
    timestep_symbol: np.ndarray   # (n_classes, vocab) counts
    n_episodes: int


def heatmaps(params: PolicyParams, n_episodes: int = DEFAULT_METRIC_EPISODES,
             rng: np.random.Generator | None = None) -> ProtocolHeatmap:
    """Symbol usage counts over establishment steps of clean self-play."""
    rng = rng if rng is not None else np.random.default_rng(0)
    space = _space_for(params)
    vocab = params.config.vocab
    batch = run_episodes(PolicyActor(params), NullStudent(space, vocab), space,
                         clean_channel(vocab), n_episodes, rng)
    return heatmaps_from_batch(batch, space.n_classes, vocab)


def heatmaps_from_batch(batch: BatchRecord, n_classes: int, vocab: int) -> ProtocolHeatmap:
    syms = batch.est_messages.argmax(axis=2)    # (steps, n)
    class_symbol = np.zeros((n_classes, vocab), dtype=np.int64)
    timestep_symbol = np.zeros((syms.shape[0], vocab), dtype=np.int64)
    for t in range(syms.shape[0]):
        np.add.at(class_symbol, (batch.order[:, t], syms[t]), 1)
        timestep_symbol[t] = np.bincount(syms[t], minlength=vocab)
    return ProtocolHeatmap(class_symbol=class_symbol, timestep_symbol=timestep_symbol,
                           n_episodes=batch.order.shape[0])


def write_zcp_csv(result: ZcpResult, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["teacher_id", "student_id", "n_games", "accuracy"])
        for teacher_id, student_id, n_games, acc in result.encounters:
            writer.writerow([teacher_id, student_id, n_games, acc])


def write_heatmap_csv(matrix, row_labels, path):
    matrix = np.asarray(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + [f"symbol_{j}" for j in range(matrix.shape[1])])
        for label, row in zip(row_labels, matrix):
            writer.writerow([label] + [int(x) for x in row])
