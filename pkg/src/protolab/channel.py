"""The teacher-to-student communication channel.

During training the channel is a relaxed categorical sampler: gaussian
noise plus standard Gumbel noise is added to the utterance and the
result is softmaxed at a temperature, so gradients flow from receiver
to sender. At evaluation time the channel is discrete: the utterance
collapses to a one-hot at its argmax.

Two randomizations can be layered on top (never both at once):

  * message mutation: each establishment message is independently
    replaced, with some probability, by a uniformly random symbol.
    Kind mutation draws from the symbols not yet delivered this
    episode; unkind mutation draws from the whole alphabet.
  * channel permutation: a per-episode relabeling of the alphabet,
    uniform over permutations that fix everything outside a uniformly
    chosen subset. It applies to every message of the episode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ARRAY_OPS, argmax_one_hot, one_hot_rows
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

MODE_TRAINING = "training"
MODE_TEST = "test"

MUTATION_OFF = "off"
MUTATION_KIND = "kind"
MUTATION_UNKIND = "unkind"


@dataclass
class ChannelConfig:
    vocab: int = 5
    mode: str = MODE_TRAINING
    temperature: float = 1.0
    noise_std: float = 0.5
    mutation: str = MUTATION_OFF
    mutation_probability: float = 0.0
    permutation_subset: int = 0          # 0 or 1 means no permutation

    def validate(self):
        if self.vocab < 2:
            raise ConfigurationError(f"vocab must be >= 2, got {self.vocab}")
        if self.mode not in (MODE_TRAINING, MODE_TEST):
            raise ConfigurationError(f"unknown channel mode {self.mode!r}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.mutation not in (MUTATION_OFF, MUTATION_KIND, MUTATION_UNKIND):
            raise ConfigurationError(f"unknown mutation kind {self.mutation!r}")
        if not 0.0 <= self.mutation_probability <= 1.0:
            raise ConfigurationError(
                f"mutation probability must be in [0, 1], got {self.mutation_probability}")
        if not 0 <= self.permutation_subset <= self.vocab:
            raise ConfigurationError(
                f"permutation subset size must be in 0..{self.vocab}, "
                f"got {self.permutation_subset}")
        if self.mutation_active and self.permutation_active:
            raise ConfigurationError("mutation and permutation cannot both be active")
        return self

    @property
    def mutation_active(self):
        return self.mutation != MUTATION_OFF and self.mutation_probability > 0.0

    @property
    def permutation_active(self):
        return self.permutation_subset >= 2


def transmit_train(utterance, cfg: ChannelConfig, rng: np.random.Generator,
                   ops=ARRAY_OPS):
    """Relaxed transmission: softmax((u + gaussian + gumbel) / temperature).

    Row-wise over a batch of utterances. With ops bound to a tape the
    result carries gradient back into the utterance; the noise draws
    are constants either way.
    """
    if cfg.temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {cfg.temperature}")
    shape = ops.value(utterance).shape
    noise = rng.standard_normal(shape) * cfg.noise_std + rng.gumbel(size=shape)
    noisy = ops.add(utterance, noise.astype(ops.value(utterance).dtype))
    return ops.softmax(ops.scale(noisy, 1.0 / cfg.temperature))


def transmit_test(utterance):
    """Discrete transmission: one-hot at the argmax, ties to lowest index."""
    return argmax_one_hot(np.asarray(utterance))


@dataclass
class MutationHistory:
    """Symbols delivered so far this episode, for one directed pair."""

    vocab: int
    symbols: list = field(default_factory=list)
    fired: list = field(default_factory=list)

    def heard_mask(self):
        mask = np.zeros(self.vocab, dtype=bool)
        for s in self.symbols:
            mask[s] = True
        return mask

    def record(self, symbol: int, fired: bool = False):
        self.symbols.append(int(symbol))
        self.fired.append(bool(fired))


def mutate_batch(messages, heard, probability, kind, rng):
    """Decide and apply mutation row-wise.

    messages: (n, vocab) delivered-message values (one-hot or relaxed).
    heard:    (n, vocab) bool, symbols already delivered per episode.
    Returns (delivered, fired, replacement) where fired flags the rows
    that were replaced and replacement holds the new symbol (or -1).
    Rows whose allowed set is empty are passed through with a warning.
    """
    messages = np.atleast_2d(messages)
    n, vocab = messages.shape
    fired = rng.random(n) < probability
    if kind == MUTATION_KIND:
        allowed = ~heard
    else:
        allowed = np.ones((n, vocab), dtype=bool)
    # Uniform choice among allowed symbols: argmax of iid uniforms.
    scores = np.where(allowed, rng.random((n, vocab)), -1.0)
    replacement = scores.argmax(axis=1)
    empty = ~allowed.any(axis=1)
    if (fired & empty).any():
        logger.warning("kind mutation with exhausted alphabet; passing through")
        fired = fired & ~empty
    replacement = np.where(fired, replacement, -1)
    delivered = np.where(fired[:, None], one_hot_rows(np.maximum(replacement, 0), vocab,
                                                      dtype=messages.dtype), messages)
    return delivered, fired, replacement


def mutate(message, history: MutationHistory, cfg: ChannelConfig,
           rng: np.random.Generator):
    """Single-message mutation; records the delivered symbol in history."""
    msg = np.asarray(message, dtype=np.float32)
    delivered, fired, _ = mutate_batch(msg[None, :], history.heard_mask()[None, :],
                                       cfg.mutation_probability, cfg.mutation, rng)
    out = delivered[0]
    history.record(int(out.argmax()), fired=bool(fired[0]))
    return out


def sample_permutation(vocab: int, subset_size: int, rng: np.random.Generator):
    """Draw a permutation fixing everything outside a random subset.

    The subset is uniform over size-subset_size subsets and the
    restriction to it is a uniform permutation. Sizes 0 and 1 always
    give the identity.
    """
    if not 0 <= subset_size <= vocab:
        raise ConfigurationError(
            f"subset size must be in 0..{vocab}, got {subset_size}")
    perm = np.arange(vocab)
    if subset_size <= 1:
        return perm
    subset = rng.choice(vocab, size=subset_size, replace=False)
    perm[subset] = subset[rng.permutation(subset_size)]
    return perm


def invert_permutation(perm):
    return np.argsort(perm)


def apply_permutation(perm, message):
    """Relabel symbols: a message of symbol s arrives as symbol perm[s]."""
    msg = np.asarray(message)
    out = np.empty_like(msg)
    if msg.ndim == 1:
        out[perm] = msg
    else:
        out[:, perm] = msg
    return out


def sample_permutation_batch(vocab, subset_size, n, rng):
    """Per-episode permutations, returned with their inverses.

    The inverse form is what a row-gather needs: if delivered symbol j
    came from uttered symbol inv[j], then out[:, j] = msg[:, inv[j]].
    """
    perms = np.empty((n, vocab), dtype=np.int64)
    for i in range(n):
        perms[i] = sample_permutation(vocab, subset_size, rng)
    return perms, np.argsort(perms, axis=1)


def anneal_temperature(epoch: int) -> float:
    """Exponential decay from 10.0 to 0.1 over 200 epochs, then constant."""
    return 10.0 * 0.01 ** (min(epoch, 200) / 200.0)


def permutation_count(vocab: int) -> int:
    return math.factorial(vocab)
