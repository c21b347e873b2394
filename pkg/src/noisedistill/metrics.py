"""Frame and token scoring: greedy decoding, edit distance, WERR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "decode_tokens",
    "token_error_rate",
    "frame_accuracy",
    "EvalReport",
    "evaluate",
    "werr",
]


def decode_tokens(logits: np.ndarray) -> np.ndarray:
    """Per-frame argmax (ties to the lower index), consecutive repeats collapsed."""
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    best = np.argmax(logits, axis=1).astype(np.int64)
    keep = np.ones(best.shape[0], dtype=bool)
    keep[1:] = best[1:] != best[:-1]
    return best[keep]


def token_error_rate(hyp, ref) -> tuple[float, int, int, int]:
    """Levenshtein alignment of hypothesis against reference.

    Returns (rate, substitutions, deletions, insertions) with
    rate = (S + D + I) / len(ref). Deletions are reference tokens the
    hypothesis missed; insertions are extra hypothesis tokens.
    """
    hyp = [int(t) for t in hyp]
    ref = [int(t) for t in ref]
    if not ref:
        raise ValueError("reference token sequence is empty")
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return (subs + dels + ins) / n, int(subs), dels, ins


def frame_accuracy(logits: np.ndarray, labels: np.ndarray, label_delay: int = 0) -> float:
    """Fraction of delayed frames whose argmax matches the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    valid = logits.shape[0] - label_delay
    if valid < 1:
        raise ValueError("no scorable frames after the label delay")
    pred = np.argmax(logits[label_delay:], axis=1)
    return float(np.mean(pred == labels[:valid]))


@dataclass(frozen=True)
class EvalReport:
    """Aggregate scoring over a dataset plus per-utterance edit counts."""

    frame_accuracy: float
    token_error_rate: float
    per_utterance: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if not 0.0 <= self.frame_accuracy <= 1.0:
            raise ValueError("frame accuracy must lie in [0, 1]")
        if self.token_error_rate < 0.0:
            raise ValueError("token error rate must be non-negative")


def evaluate(params, dataset) -> EvalReport:
    """Score a model on (features, frame_labels, token_refs) triples.

    The token error rate is pooled: total edits over total reference tokens.
    """
    from .net import forward

    correct = 0
    total_frames = 0
    edits = 0
    ref_tokens = 0
    per_utt = []
    for feats, labels, token_refs in dataset:
        logits = forward(params, feats)
        delay = params.label_delay
        valid = logits.shape[0] - delay
        pred = np.argmax(logits[delay:], axis=1)
        correct += int(np.sum(pred == np.asarray(labels)[:valid]))
        total_frames += valid
        hyp = decode_tokens(logits[delay:])
        _, s, d, i = token_error_rate(hyp, token_refs)
        edits += s + d + i
        ref_tokens += len(token_refs)
        per_utt.append((s, d, i))
    if total_frames == 0 or ref_tokens == 0:
        raise ValueError("empty evaluation dataset")
    return EvalReport(correct / total_frames, edits / ref_tokens, tuple(per_utt))


def werr(baseline_ter: float, system_ter: float) -> float:
    """Relative error-rate change in percent; negative means improvement."""
    if baseline_ter <= 0:
        raise ValueError("baseline error rate must be positive")
    return 100.0 * (system_ter - baseline_ter) / baseline_ter
