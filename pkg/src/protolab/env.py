"""Episode structure for the teacher/student signalling game.

An episode over M classes runs M+1 joint steps. During the first M
(the establishment phase) both roles see the same observation, drawn
without replacement, and the teacher utters a symbol for it. In the
final step the teacher alone sees a hidden observation, drawn uniformly
from the ones already shown, and the student must name its class from
the teacher's message alone.

Observations are the little-endian binary encodings of the class
labels 1..M. The zero vector is reserved for "no observation".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, UsageError

DEFAULT_VOCAB = 5


@dataclass(frozen=True)
class Observation:
    """A binary feature vector tagged with its 1-based class label."""

    bits: np.ndarray
    label: int


@dataclass(frozen=True)
class ObservationSpace:
    """All observations for a game over n_classes classes.

    vectors[i] encodes label i+1; bit j carries weight 2**j.
    """

    n_classes: int
    k_bits: int
    vectors: np.ndarray

    def observation(self, label: int) -> Observation:
        if not 1 <= label <= self.n_classes:
            raise UsageError(f"label {label} outside 1..{self.n_classes}")
        return Observation(bits=self.vectors[label - 1], label=label)

    def label_of_bits(self, bits) -> int:
        weights = 1 << np.arange(self.k_bits)
        value = int(np.rint(np.asarray(bits, dtype=np.float64) @ weights))
        if not 1 <= value <= self.n_classes:
            raise UsageError(f"bits {bits!r} decode to {value}, not a class label")
        return value


def encode_label(label: int, k_bits: int) -> np.ndarray:
    bits = [(label >> j) & 1 for j in range(k_bits)]
    return np.asarray(bits, dtype=np.float32)


def build_observation_space(n_classes: int) -> ObservationSpace:
    """Construct the observation vectors for labels 1..n_classes.

    Width is ceil(log2(n_classes)) bits, except that a power-of-two
    class count needs one extra bit because the all-zero pattern is
    reserved. Two classes would force the zero vector either way, so
    n_classes must be at least 3.
    """
    if n_classes < 2:
        raise ConfigurationError(f"n_classes must be >= 2, got {n_classes}")
    if n_classes == 2:
        raise ConfigurationError(
            "n_classes = 2 cannot be encoded: one nonzero bit pattern is "
            "not enough for two labels"
        )
    if n_classes & (n_classes - 1) == 0:
        k_bits = n_classes.bit_length()
    else:
        k_bits = (n_classes - 1).bit_length()
    vectors = np.stack([encode_label(y, k_bits) for y in range(1, n_classes + 1)])
    return ObservationSpace(n_classes=n_classes, k_bits=k_bits, vectors=vectors)


@dataclass(frozen=True)
class EpisodeState:
    """Markov state of one episode.

    t counts completed steps; at t == n_classes the state is terminal
    and current is the hidden test observation. last_message is the
    channel output recorded by the previous step (zeros before any
    message was sent).
    """

    space: ObservationSpace
    t: int
    current: Observation
    last_message: np.ndarray
    shown: tuple[Observation, ...] = ()


def reset(space: ObservationSpace, rng: np.random.Generator,
          vocab: int = DEFAULT_VOCAB) -> EpisodeState:
    """Start an episode: t = 0, empty history, uniform first observation."""
    first = int(rng.integers(0, space.n_classes))
    return EpisodeState(
        space=space,
        t=0,
        current=space.observation(first + 1),
        last_message=np.zeros(vocab, dtype=np.float32),
    )


def step(state: EpisodeState, teacher_message, rng: np.random.Generator) -> EpisodeState:
    """Advance one joint step after the teacher's message was delivered.

    Establishment observations are drawn without replacement; the final
    step draws the hidden observation uniformly from everything shown.
    """
    space = state.space
    if state.t >= space.n_classes:
        raise UsageError("step() called on a terminal episode state")
    message = np.asarray(teacher_message, dtype=np.float32)
    if message.ndim != 1:
        raise UsageError(f"teacher_message must be 1-D, got shape {message.shape}")
    shown = state.shown + (state.current,)
    t_next = state.t + 1
    if t_next < space.n_classes:
        seen = {o.label for o in shown}
        remaining = [y for y in range(1, space.n_classes + 1) if y not in seen]
        nxt = space.observation(remaining[int(rng.integers(0, len(remaining)))])
    else:
        nxt = shown[int(rng.integers(0, len(shown)))]
    return replace(state, t=t_next, current=nxt, last_message=message, shown=shown)


def is_terminal(state: EpisodeState) -> bool:
    return state.t == state.space.n_classes


def teacher_view(state: EpisodeState):
    """The teacher always sees the true current observation."""
    return state.current.bits, state.last_message


def student_view(state: EpisodeState):
    """The student sees the observation, except at the test step.

    At the test step the observation is hidden and replaced by zeros;
    the message is the only usable signal.
    """
    if is_terminal(state):
        return np.zeros(state.space.k_bits, dtype=np.float32), state.last_message
    return state.current.bits, state.last_message


def sample_episode_batch(space: ObservationSpace, n: int, rng: np.random.Generator):
    """Vectorized episode sampling for batched rollouts.

    Returns (order, final): order[i] is a permutation of 0..M-1 giving
    the establishment classes of episode i, final[i] the 0-based class
    index of that episode's hidden observation.
    """
    m = space.n_classes
    order = rng.permuted(np.tile(np.arange(m), (n, 1)), axis=1)
    cols = rng.integers(0, m, size=n)
    final = order[np.arange(n), cols]
    return order, final


@dataclass
class StepRecord:
    """One establishment step as seen on the wire."""

    t: int
    observation: np.ndarray
    class_label: int
    utterance: np.ndarray
    message: np.ndarray
    mutation_applied: bool = False


@dataclass
class FinalRecord:
    """The test step: hidden observation, final message, prediction."""

    t: int
    hidden_observation: np.ndarray
    class_label: int
    utterance: np.ndarray
    message: np.ndarray
    prediction: np.ndarray


@dataclass
class EpisodeTrace:
    """Everything observable about one played episode."""

    steps: list[StepRecord] = field(default_factory=list)
    final: FinalRecord | None = None
    permutation_map: list[int] | None = None
    episode_id: int = 0


def _floats(a):
    return [float(x) for x in np.asarray(a).ravel()]


def trace_to_lines(trace: EpisodeTrace) -> list[str]:
    """Serialize one trace to JSON lines, one record per timestep."""
    lines = []
    for s in trace.steps:
        lines.append(json.dumps({
            "episode": trace.episode_id,
            "phase": "establishment",
            "t": s.t,
            "observation": _floats(s.observation),
            "class_label": s.class_label,
            "utterance": _floats(s.utterance),
            "message": _floats(s.message),
            "mutation_applied": bool(s.mutation_applied),
            "permutation_map": trace.permutation_map,
        }, separators=(",", ":")))
    f = trace.final
    if f is not None:
        lines.append(json.dumps({
            "episode": trace.episode_id,
            "phase": "test",
            "t": f.t,
            "hidden_observation": _floats(f.hidden_observation),
            "class_label": f.class_label,
            "utterance": _floats(f.utterance),
            "message": _floats(f.message),
            "prediction": _floats(f.prediction),
            "permutation_map": trace.permutation_map,
        }, separators=(",", ":")))
    return lines


def write_traces(traces, path):
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            for line in trace_to_lines(tr):
                fh.write(line + "\n")


def read_traces(path) -> list[EpisodeTrace]:
    """Parse a JSONL trace file back into EpisodeTrace objects."""
    by_id: dict[int, EpisodeTrace] = {}
    order: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            eid = int(rec["episode"])
            if eid not in by_id:
                by_id[eid] = EpisodeTrace(episode_id=eid)
                order.append(eid)
            tr = by_id[eid]
            if rec.get("permutation_map") is not None:
                tr.permutation_map = [int(x) for x in rec["permutation_map"]]
            if rec["phase"] == "establishment":
                tr.steps.append(StepRecord(
                    t=int(rec["t"]),
                    observation=np.asarray(rec["observation"], dtype=np.float32),
                    class_label=int(rec["class_label"]),
                    utterance=np.asarray(rec["utterance"], dtype=np.float32),
                    message=np.asarray(rec["message"], dtype=np.float32),
                    mutation_applied=bool(rec["mutation_applied"]),
                ))
            else:
                tr.final = FinalRecord(
                    t=int(rec["t"]),
                    hidden_observation=np.asarray(rec["hidden_observation"], dtype=np.float32),
                    class_label=int(rec["class_label"]),
                    utterance=np.asarray(rec["utterance"], dtype=np.float32),
                    message=np.asarray(rec["message"], dtype=np.float32),
                    prediction=np.asarray(rec["prediction"], dtype=np.float32),
                )
    for tr in by_id.values():
        tr.steps.sort(key=lambda s: s.t)
    return [by_id[eid] for eid in order]
