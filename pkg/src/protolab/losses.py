"""Loss definitions over played episodes.

Four terms, all evaluated at the test step of an episode:

  loss_ac   cross-entropy of the student's prediction against the true
            hidden class.
  loss_sic  cross-entropy against the classes whose establishment
            message matches the final message (matching means equal
            argmax symbol). The target is the mean of the matching
            class one-hots, or uniform when nothing matches. Rewards
            following the protocol the episode actually expressed.
  loss_tm   cross-entropy of the softmaxed final utterance against the
            message that was delivered when the hidden observation was
            shown. Rewards the teacher for reusing its own convention.
  loss_pd   largest column sum of the matrix whose rows are the
            establishment messages. 1.0 means pairwise distinct
            symbols, n_classes means one symbol was reused throughout.

Trace-level functions compute in float64 for metric-grade precision;
training recomputes the same quantities on the float32 tape.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError

PROB_FLOOR = 1e-9


def cce(predicted, target) -> float:
    """Categorical cross-entropy with a 1e-9 probability floor, float64."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise UsageError(f"cce: length mismatch {p.shape} vs {t.shape}")
    if abs(p.sum() - 1.0) > 1e-5 or abs(t.sum() - 1.0) > 1e-5:
        raise UsageError("cce: inputs must each sum to 1")
    return float(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum())


def softmax64(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def one_hot64(index, width):
    out = np.zeros(width, dtype=np.float64)
    out[index] = 1.0
    return out


def sic_target(est_symbols, est_class_idx, final_symbol, n_classes):
    """Target distribution for loss_sic, from one episode's symbols.

    est_symbols: delivered establishment symbols, est_class_idx: their
    0-based classes, final_symbol: delivered final symbol.
    """
    matches = [c for s, c in zip(est_symbols, est_class_idx) if s == final_symbol]
    if not matches:
        return np.full(n_classes, 1.0 / n_classes, dtype=np.float64)
    target = np.zeros(n_classes, dtype=np.float64)
    for c in matches:
        target[c] += 1.0 / len(matches)
    return target


def sic_target_batch(est_symbols, est_class_idx, final_symbols, n_classes):
    """Vectorized sic_target: (n, steps) symbol and class arrays in,
    (n, n_classes) target rows out."""
    match = est_symbols == final_symbols[:, None]
    onehots = np.zeros(est_class_idx.shape + (n_classes,), dtype=np.float64)
    n, steps = est_class_idx.shape
    onehots[np.arange(n)[:, None], np.arange(steps)[None, :], est_class_idx] = 1.0
    counts = match.sum(axis=1)
    summed = (onehots * match[:, :, None]).sum(axis=1)
    safe = np.maximum(counts, 1)[:, None]
    target = summed / safe
    target[counts == 0] = 1.0 / n_classes
    return target


def tm_step_index(est_class_idx, final_class_idx):
    """Position of the establishment step that showed the hidden class.

    Each class appears exactly once during establishment, so the match
    is unique.
    """
    match = est_class_idx == final_class_idx[:, None]
    if not match.any(axis=1).all():
        raise UsageError("hidden class missing from establishment phase")
    return match.argmax(axis=1)


def loss_ac(trace) -> float:
    f = trace.final
    return cce(f.prediction, one_hot64(f.class_label - 1, len(f.prediction)))


def loss_sic(trace) -> float:
    f = trace.final
    n_classes = len(trace.steps)
    est_symbols = [int(np.asarray(s.message).argmax()) for s in trace.steps]
    est_classes = [s.class_label - 1 for s in trace.steps]
    target = sic_target(est_symbols, est_classes, int(np.asarray(f.message).argmax()),
                        n_classes)
    return cce(f.prediction, target)


def loss_tm(trace) -> float:
    f = trace.final
    matching = [s for s in trace.steps if s.class_label == f.class_label]
    if len(matching) != 1:
        raise UsageError("establishment phase must show the hidden class exactly once")
    return cce(softmax64(f.utterance), np.asarray(matching[0].message, dtype=np.float64))


def loss_pd(trace) -> float:
    rows = np.stack([np.asarray(s.message, dtype=np.float64) for s in trace.steps])
    return float(np.abs(rows).sum(axis=0).max())


def total_loss(trace, loss_set: str) -> float:
    if loss_set == "ac":
        return loss_ac(trace)
    if loss_set == "sic_tm_pd":
        return loss_sic(trace) + loss_tm(trace) + loss_pd(trace)
    raise UsageError(f"unknown loss set {loss_set!r}")


LOSS_SETS = ("ac", "sic_tm_pd")
