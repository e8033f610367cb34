"""Behavioural probes on trained agents.

Listening: does the student's output actually depend on the message?
Checked by replaying recorded steps with the message swapped for
silence or for each other symbol, from the same mental state.

Signalling: do the teacher's symbols carry information about what it
sees? Checked with plug-in mutual information plus a permutation test.

Establishment probe: does the student bind symbols to classes within
the episode (following whatever protocol the episode expressed), or
does it decode a convention fixed at training time? Distinguished by
forcing fresh random protocols and measuring the information between
the hidden class and the prediction.

Capacity: counting arguments about how many protocols a population
could express versus what the network weights could store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .agent import MentalState, PolicyParams, act, initial_state
from .env import EpisodeTrace, FinalRecord, StepRecord
from .env import build_observation_space, reset, step
from .errors import ConfigurationError, UsageError
from .evaluation import (PolicyActor, SyntheticProtocolTeacher,
                         batch_sic_losses, clean_channel, performance, run_episodes)
from .losses import softmax64
from .training import BatchRecord

DEFAULT_TOLERANCE = 0.01
MIN_SIGNALLING_EPISODES = 100

# Verdict calibration for the establishment probe, as fractions of the
# class entropy log2(n_classes), plus companion score floors.
MI_INTRA_FRACTION = 0.8
MI_LOW_FRACTION = 0.3
RS_HIGH = 0.7
SELFPLAY_HIGH = 0.8


@dataclass
class StudentStepContext:
    """What the student saw at one step, plus its pre-act mental state."""

    t: int
    h: np.ndarray
    c: np.ndarray
    own_last: np.ndarray
    message: np.ndarray
    observation: np.ndarray


def record_student_episode(teacher_params: PolicyParams,
                           student_params: PolicyParams,
                           chan: ch.ChannelConfig, rng: np.random.Generator):
    """Play one discrete-channel episode, keeping the student's inputs.

    Returns (contexts, trace). Mutation, when active, applies to the
    establishment messages only; a permutation applies throughout.
    """
    chan.validate()
    if chan.mode != ch.MODE_TEST:
        raise UsageError("episode recording needs a test-mode channel config")
    space = build_observation_space(student_params.config.n_classes)
    vocab = chan.vocab
    state = reset(space, rng, vocab=vocab)
    t_state = initial_state(teacher_params.config)
    s_state = initial_state(student_params.config)
    m_empty = np.zeros(vocab, dtype=np.float32)
    t_own = m_empty
    s_own = m_empty
    history = ch.MutationHistory(vocab)
    perm = None
    if chan.permutation_active:
        perm = ch.sample_permutation(vocab, chan.permutation_subset, rng)
    contexts = []
    trace = EpisodeTrace(permutation_map=None if perm is None
                         else [int(x) for x in perm])
    for t in range(space.n_classes):
        obs = state.current.bits
        t_act, t_state = act(teacher_params, t_state, t_own, m_empty, obs)
        msg = ch.transmit_test(t_act.utterance)[0]
        mutated = False
        if chan.mutation_active:
            msg = ch.mutate(msg, history, chan, rng)
            mutated = history.fired[-1]
        # Sender-side view: the teacher sees its traffic after mutation but
        # before the receiver-side permutation reindexing.
        sent_symbol = int(msg.argmax())
        if perm is not None:
            msg = ch.apply_permutation(perm, msg)
        contexts.append(StudentStepContext(
            t=t, h=s_state.h.copy(), c=s_state.c.copy(), own_last=s_own.copy(),
            message=msg.copy(), observation=obs.copy()))
        s_act, s_state = act(student_params, s_state, s_own, msg, obs)
        trace.steps.append(StepRecord(t=t, observation=obs,
                                      class_label=state.current.label,
                                      utterance=t_act.utterance, message=msg,
                                      mutation_applied=mutated))
        t_own = np.zeros(vocab, dtype=np.float32)
        t_own[sent_symbol] = 1.0
        s_own = np.zeros(vocab, dtype=np.float32)
        s_own[int(s_act.utterance.argmax())] = 1.0
        state = step(state, msg, rng)
    obs_f = state.current.bits
    t_act, t_state = act(teacher_params, t_state, t_own, m_empty, obs_f)
    msg_f = ch.transmit_test(t_act.utterance)[0]
    if perm is not None:
        msg_f = ch.apply_permutation(perm, msg_f)
    blank = np.zeros(space.k_bits, dtype=np.float32)
    contexts.append(StudentStepContext(
        t=space.n_classes, h=s_state.h.copy(), c=s_state.c.copy(),
        own_last=s_own.copy(), message=msg_f.copy(), observation=blank))
    s_act, s_state = act(student_params, s_state, s_own, msg_f, blank)
    trace.final = FinalRecord(t=space.n_classes, hidden_observation=obs_f,
                              class_label=state.current.label,
                              utterance=t_act.utterance, message=msg_f,
                              prediction=s_act.prediction)
    return contexts, trace


def _student_output(params, ctx: StudentStepContext, message):
    action, new_state = act(params, MentalState(h=ctx.h, c=ctx.c),
                            ctx.own_last, message, ctx.observation)
    out = np.concatenate([action.prediction.astype(np.float64),
                          softmax64(action.utterance)])
    return out, np.concatenate([new_state.h, new_state.c]).astype(np.float64)


def _tv(a, b):
    return 0.5 * float(np.abs(a - b).sum())


@dataclass
class ListeningStep:
    t: int
    distance: float
    pred_distance: float
    utt_distance: float
    state_distance: float
    listening: bool
    sensitivity: int


@dataclass
class ListeningReport:
    steps: list
    tolerance: float

    @property
    def any_listening(self):
        return any(s.listening for s in self.steps)

    @property
    def max_sensitivity(self):
        return max((s.sensitivity for s in self.steps), default=0)


def positive_listening_test(params: PolicyParams, contexts,
                            tolerance: float = DEFAULT_TOLERANCE) -> ListeningReport:
    """Message-substitution probe over recorded student steps.

    At each step the actual output is compared, from the same mental
    state, against the output under silence (listening flag) and under
    every symbol (sensitivity count). Distances are total variation
    over the concatenated prediction and softmaxed utterance, so
    substituting the actually received message gives distance 0.
    """
    m = params.config.n_classes
    vocab = params.config.vocab
    steps = []
    for ctx in contexts:
        actual, actual_state = _student_output(params, ctx, ctx.message)
        silent, silent_state = _student_output(params, ctx,
                                               np.zeros(vocab, dtype=np.float32))
        distance = _tv(actual, silent)
        pred_d = _tv(actual[:m], silent[:m])
        utt_d = _tv(actual[m:], silent[m:])
        state_d = float(np.linalg.norm(actual_state - silent_state))
        sensitivity = 0
        for s in range(vocab):
            probe = np.zeros(vocab, dtype=np.float32)
            probe[s] = 1.0
            out, _ = _student_output(params, ctx, probe)
            if _tv(actual, out) > tolerance:
                sensitivity += 1
        steps.append(ListeningStep(t=ctx.t, distance=distance,
                                   pred_distance=pred_d, utt_distance=utt_d,
                                   state_distance=state_d,
                                   listening=distance > tolerance,
                                   sensitivity=sensitivity))
    return ListeningReport(steps=steps, tolerance=tolerance)


def plugin_mi_bits(x, y) -> float:
    """Plug-in mutual information of two integer label sequences, in bits."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise UsageError("mutual information needs two equal-length label vectors")
    nx = int(x.max()) + 1
    ny = int(y.max()) + 1
    joint = np.bincount(x * ny + y, minlength=nx * ny).reshape(nx, ny)
    p = joint / joint.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float((p[mask] * np.log2(p[mask] / (px @ py)[mask])).sum())


def mi_permutation_test(x, y, n_shuffles: int = 1000,
                        rng: np.random.Generator | None = None):
    """Observed MI and the probability a label shuffle does as well."""
    rng = rng if rng is not None else np.random.default_rng(0)
    observed = plugin_mi_bits(x, y)
    y = np.asarray(y, dtype=np.int64)
    hits = 0
    for _ in range(n_shuffles):
        if plugin_mi_bits(x, rng.permutation(y)) >= observed:
            hits += 1
    return observed, (hits + 1) / (n_shuffles + 1)


@dataclass
class SignallingReport:
    class_symbol_mi: float
    class_symbol_p: float
    timestep_symbol_mi: float
    timestep_symbol_p: float
    n_pairs: int


def signalling_pairs(source) -> tuple:
    """Extract (class, timestep, symbol) triples from establishment steps."""
    if isinstance(source, BatchRecord):
        syms = source.est_messages.argmax(axis=2)      # (steps, n)
        steps, n = syms.shape
        classes = source.order.T.ravel()
        timesteps = np.repeat(np.arange(steps), n)
        return classes, timesteps, syms.ravel()
    classes, timesteps, symbols = [], [], []
    for tr in source:
        for s in tr.steps:
            classes.append(s.class_label - 1)
            timesteps.append(s.t)
            symbols.append(int(np.asarray(s.message).argmax()))
    return (np.asarray(classes, dtype=np.int64), np.asarray(timesteps, dtype=np.int64),
            np.asarray(symbols, dtype=np.int64))


def positive_signalling_test(source, n_shuffles: int = 1000,
                             rng: np.random.Generator | None = None) -> SignallingReport:
    """MI between what the teacher saw and what it said.

    Needs at least 100 episodes for the plug-in estimate to be worth
    reading. Also reports the timestep-to-symbol MI, which separates
    "names the observation" from "names the position in the episode".
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    classes, timesteps, symbols = signalling_pairs(source)
    n_steps = int(timesteps.max()) + 1 if timesteps.size else 0
    if n_steps == 0 or classes.size < MIN_SIGNALLING_EPISODES * n_steps:
        raise UsageError(f"positive_signalling_test needs at least "
                         f"{MIN_SIGNALLING_EPISODES} episodes")
    mi_c, p_c = mi_permutation_test(classes, symbols, n_shuffles, rng)
    mi_t, p_t = mi_permutation_test(timesteps, symbols, n_shuffles, rng)
    return SignallingReport(class_symbol_mi=mi_c, class_symbol_p=p_c,
                            timestep_symbol_mi=mi_t, timestep_symbol_p=p_t,
                            n_pairs=int(classes.size))


@dataclass
class EstablishmentReport:
    mi_bits: float
    responsiveness: float
    selfplay: float
    verdict: str            # "intra" | "inter" | "none"
    n_episodes: int


def establishment_probe(params: PolicyParams, n_episodes: int = 1000,
                        rng: np.random.Generator | None = None) -> EstablishmentReport:
    """Probe where the student's class knowledge lives.

    Fresh random injective protocols are forced on every episode; the
    MI between the hidden class and the prediction is only high if the
    student binds symbols to classes within the episode. A student
    that decodes a fixed training-time convention scores near zero
    here while still acing self-play.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    space = build_observation_space(params.config.n_classes)
    vocab = params.config.vocab
    teacher = SyntheticProtocolTeacher(space, vocab)
    batch = run_episodes(teacher, PolicyActor(params), space, clean_channel(vocab),
                         n_episodes, rng)
    mi = plugin_mi_bits(batch.final, batch.predictions.argmax(axis=1))
    r_s = float(np.exp(-batch_sic_losses(batch, space.n_classes).mean()))
    selfplay = performance(params, params, n_episodes, rng)
    h_max = math.log2(space.n_classes)
    if mi >= MI_INTRA_FRACTION * h_max and r_s >= RS_HIGH:
        verdict = "intra"
    elif selfplay >= SELFPLAY_HIGH and mi <= MI_LOW_FRACTION * h_max:
        verdict = "inter"
    else:
        verdict = "none"
    return EstablishmentReport(mi_bits=mi, responsiveness=r_s, selfplay=selfplay,
                               verdict=verdict, n_episodes=n_episodes)


@dataclass
class CapacityReport:
    vocab: int
    n_classes: int
    protocol_count: int
    bits_per_protocol: float
    total_bits: float
    lower_bound_protocols: int
    network_bits: int
    feasible: bool


def capacity_calc(vocab: int, n_classes: int, n_weights: int) -> CapacityReport:
    """Counting argument: protocols expressible versus weights available.

    protocol_count is the number of injective class-to-symbol maps,
    vocab!/(vocab-n_classes)!, each costing n_classes*log2(vocab) bits
    to name; the lower bound (vocab-n_classes)^n_classes is a crude
    floor on the same count. A 32-bit weight budget of 32*n_weights
    bits is compared against storing every protocol.
    """
    if vocab < 2 or n_classes < 1 or n_weights < 0:
        raise ConfigurationError("capacity_calc needs vocab >= 2, n_classes >= 1, "
                                 "n_weights >= 0")
    if n_classes > vocab:
        raise ConfigurationError(
            f"no injective protocols exist for n_classes {n_classes} > vocab {vocab}")
    protocol_count = math.perm(vocab, n_classes)
    bits_per_protocol = n_classes * math.log2(vocab)
    total_bits = protocol_count * bits_per_protocol
    lower = (vocab - n_classes) ** n_classes
    network_bits = 32 * n_weights
    return CapacityReport(vocab=vocab, n_classes=n_classes,
                          protocol_count=protocol_count,
                          bits_per_protocol=bits_per_protocol,
                          total_bits=total_bits, lower_bound_protocols=lower,
                          network_bits=network_bits,
                          feasible=network_bits >= total_bits)
