"""Temperature softmax and sparse top-k posteriors.

A teacher's per-frame logit vector is reduced to its k largest entries; the
preserved probabilities are rescaled by an emphasis factor so they sum to
one (the suppressed classes drop to zero), or, in the constant-floor
variant, the suppressed logits are replaced by a large negative constant so
every class keeps an exponentially small probability. Raw logits, not
probabilities, are what gets stored, so any temperature can be re-applied
downstream.

All exponentials subtract the max logit first; any finite input yields
finite output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_float_vector, check_finite

__all__ = [
    "CodecParams",
    "SparseFrame",
    "SparseTargets",
    "softmax_t",
    "select_topk",
    "topk_posterior",
    "topk_posterior_c",
    "sparse_from_logits",
    "sparse_posterior",
    "default_floor_logit",
]

# Floor offset in temperature-scaled units: suppressed mass is at most
# N * exp(-50), representable but numerically invisible.
FLOOR_OFFSET = 50.0


@dataclass(frozen=True)
class CodecParams:
    """Top-k selection settings: k entries kept, advisory temperature, and
    an optional fixed floor constant (None derives one per frame)."""

    k: int
    temperature: float = 1.0
    floor_constant: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


class SparseFrame:
    """Top-k (class index, logit) pairs for one frame.

    Entries are sorted by descending logit, ties by ascending index; indices
    are distinct. Logit values are float32, matching on-disk precision.
    """

    __slots__ = ("indices", "logits")

    def __init__(self, indices, logits):
        indices = np.asarray(indices, dtype=np.int64)
        logits = np.asarray(logits, dtype=np.float32)
        if indices.ndim != 1 or logits.ndim != 1 or indices.shape != logits.shape:
            raise ValueError("indices and logits must be 1-D and equal-length")
        if indices.shape[0] < 1:
            raise ValueError("a sparse frame needs at least one entry")
        if len(np.unique(indices)) != indices.shape[0]:
            raise ValueError("sparse frame indices must be distinct")
        if not np.all(np.isfinite(logits)):
            raise ValueError("sparse frame logits must be finite")
        order_ok = (logits[:-1] > logits[1:]) | (
            (logits[:-1] == logits[1:]) & (indices[:-1] < indices[1:])
        )
        if not np.all(order_ok):
            raise ValueError("entries must be sorted by descending logit, ties by ascending index")
        indices.setflags(write=False)
        logits.setflags(write=False)
        self.indices = indices
        self.logits = logits

    @property
    def k(self) -> int:
        return self.indices.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseFrame):
            return NotImplemented
        return np.array_equal(self.indices, other.indices) and np.array_equal(
            self.logits, other.logits
        )

    def __repr__(self) -> str:
        pairs = ", ".join(f"{i}:{v:.4g}" for i, v in zip(self.indices, self.logits))
        return f"SparseFrame({pairs})"


class SparseTargets:
    """An utterance's sparse frames, array-backed for bulk math.

    Behaves as a sequence of :class:`SparseFrame`; ``indices`` and ``logits``
    expose the underlying (n_frames, k) arrays directly.
    """

    __slots__ = ("indices", "logits")

    def __init__(self, indices, logits):
        indices = np.asarray(indices, dtype=np.int64)
        logits = np.asarray(logits, dtype=np.float32)
        if indices.ndim != 2 or logits.ndim != 2 or indices.shape != logits.shape:
            raise ValueError("indices and logits must be equal-shape (n_frames, k) arrays")
        indices.setflags(write=False)
        logits.setflags(write=False)
        self.indices = indices
        self.logits = logits

    @property
    def n_frames(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.n_frames

    def __getitem__(self, i: int) -> SparseFrame:
        return SparseFrame(self.indices[i], self.logits[i])

    def __iter__(self):
        for i in range(self.n_frames):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTargets):
            return NotImplemented
        return np.array_equal(self.indices, other.indices) and np.array_equal(
            self.logits, other.logits
        )

    @staticmethod
    def from_frames(frames: list[SparseFrame]) -> "SparseTargets":
        if not frames:
            return SparseTargets(np.zeros((0, 1), dtype=np.int64), np.zeros((0, 1), dtype=np.float32))
        return SparseTargets(
            np.stack([f.indices for f in frames]), np.stack([f.logits for f in frames])
        )


def _checked_logits(z) -> np.ndarray:
    z = as_float_vector(z, "logits")
    if z.shape[0] < 1:
        raise ValueError("logit vector must have at least one entry")
    return check_finite(z, "logits")


def softmax_t(z, temperature: float) -> np.ndarray:
    """Temperature softmax: exp(z_i/T) / sum_j exp(z_j/T)."""
    z = _checked_logits(z)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = (z - z.max()) / temperature
    e = np.exp(scaled)
    return e / e.sum()


def select_topk(z, k: int) -> np.ndarray:
    """Indices of the k largest logits, descending by value, ties by lower index."""
    z = _checked_logits(z)
    n = z.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.lexsort((np.arange(n), -z))
    return order[:k]


def topk_posterior(z, k: int, temperature: float) -> tuple[np.ndarray, float]:
    """Renormalized top-k posterior and its emphasis factor.

    Preserved classes get exp(z_i/T) / sum_{j in K} exp(z_j/T); all others
    are zero. The emphasis factor is the ratio of the full partition sum to
    the preserved partition sum, i.e. the common gain applied to preserved
    probabilities; it is always >= 1.
    """
    z = _checked_logits(z)
    selected = select_topk(z, k)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    e = np.exp((z - z.max()) / temperature)
    kept = e[selected].sum()
    excluded = np.delete(e, selected).sum()
    probs = np.zeros_like(z)
    probs[selected] = e[selected] / kept
    # Split form keeps A >= 1 exact; A hits 1 only when the excluded mass
    # is zero (k = N, or everything outside the selection underflowed).
    emphasis = 1.0 + float(excluded / kept)
    return probs, emphasis


def topk_posterior_c(z, k: int, temperature: float, floor_logit: float) -> np.ndarray:
    """Top-k posterior with suppressed logits replaced by a constant floor.

    Every class outside the selection keeps probability
    exp(C/T) / ((N-k) exp(C/T) + sum_{j in K} exp(z_j/T)) > 0. The floor must
    not exceed any preserved logit.
    """
    z = _checked_logits(z)
    selected = select_topk(z, k)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.isfinite(floor_logit):
        raise ValueError("floor constant must be finite")
    min_kept = z[selected].min()
    if floor_logit > min_kept:
        raise ValueError(
            f"floor constant {floor_logit} exceeds the smallest preserved logit {min_kept}"
        )
    n = z.shape[0]
    m = z.max()
    e_kept = np.exp((z[selected] - m) / temperature)
    e_floor = float(np.exp((floor_logit - m) / temperature))
    denom = (n - k) * e_floor + e_kept.sum()
    probs = np.full(n, e_floor / denom)
    probs[selected] = e_kept / denom
    return probs


def default_floor_logit(selected_logits, temperature: float) -> float:
    """Default floor: smallest preserved logit minus 50 temperature units."""
    return float(np.min(selected_logits)) - FLOOR_OFFSET * temperature


def sparse_from_logits(z, k: int) -> SparseFrame:
    """Keep the k largest logits as an ordered sparse frame.

    Values are stored at float32 precision; selection and tie-breaking happen
    on the stored values so the frame's ordering invariant is exact.
    """
    z = _checked_logits(z)
    z32 = z.astype(np.float32)
    n = z32.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.lexsort((np.arange(n), -z32.astype(np.float64)))[:k]
    return SparseFrame(order, z32[order])


def sparse_posterior(frame: SparseFrame, temperature: float, n_classes: int) -> np.ndarray:
    """Dense renormalized posterior reconstructed from a sparse frame."""
    if frame.indices.max() >= n_classes:
        raise ValueError("sparse frame references a class beyond n_classes")
    z = frame.logits.astype(np.float64)
    e = np.exp((z - z.max()) / temperature)
    probs = np.zeros(n_classes)
    probs[frame.indices] = e / e.sum()
    return probs
