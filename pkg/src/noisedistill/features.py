"""Log mel-filterbank energy (LFBE) front end.

Waveforms are cut into Hann-windowed frames, taken to the power spectrum,
pooled through triangular mel filters, and floored-log compressed. One
64-dimensional vector per frame, no stacking, no normalization; the
classifier's first layer absorbs scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .audio import AudioBuffer
from .validation import as_float_matrix, check_finite

__all__ = [
    "FeatureMatrix",
    "MelBank",
    "hz_to_mel",
    "mel_to_hz",
    "frame_count",
    "stft_power",
    "mel_bank",
    "lfbe",
    "write_lfbe",
    "read_lfbe",
    "LogMelExtractor",
]

LOG_FLOOR = 1e-10
LFBE_MAGIC = b"LFBE"
LFBE_VERSION = 1


@dataclass(frozen=True)
class FeatureMatrix:
    """A (n_frames, n_dims) array of feature vectors plus frame geometry."""

    frames: np.ndarray
    frame_shift_s: float
    frame_length_s: float

    def __post_init__(self):
        frames = as_float_matrix(self.frames, "frames")
        check_finite(frames, "frames")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_dims(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MelBank:
    """Triangular mel filters sampled on the rfft bin grid.

    Each row must be non-negative, unimodal and non-zero, with strictly
    increasing center frequencies.
    """

    filters: np.ndarray
    centers_hz: np.ndarray
    fmin: float
    fmax: float

    def __post_init__(self):
        filters = as_float_matrix(self.filters, "filters")
        centers = np.asarray(self.centers_hz, dtype=np.float64)
        if np.any(filters < 0):
            raise ValueError("mel filter weights must be non-negative")
        if centers.shape[0] != filters.shape[0]:
            raise ValueError("one center frequency per filter row required")
        if np.any(np.diff(centers) <= 0):
            raise ValueError("filter center frequencies must be strictly increasing")
        for i, row in enumerate(filters):
            if not np.any(row > 0):
                raise ValueError(f"mel filter row {i} is all-zero; fft resolution too coarse")
            peak = int(np.argmax(row))
            if np.any(np.diff(row[: peak + 1]) < 0) or np.any(np.diff(row[peak:]) > 0):
                raise ValueError(f"mel filter row {i} is not unimodal")
        filters.setflags(write=False)
        centers.setflags(write=False)
        object.__setattr__(self, "filters", filters)
        object.__setattr__(self, "centers_hz", centers)

    @property
    def n_mels(self) -> int:
        return self.filters.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_count(n_samples: int, win: int, hop: int) -> int:
    """Number of full analysis windows: 1 + floor((len - win) / hop), or 0."""
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def stft_power(signal: AudioBuffer, win_s: float, hop_s: float, n_fft: int) -> np.ndarray:
    """Power spectra of Hann-windowed frames, shape (n_frames, n_fft//2 + 1).

    A signal shorter than one window yields an empty (0, n_fft//2+1) array.
    """
    fs = signal.sample_rate
    win = int(round(win_s * fs))
    hop = int(round(hop_s * fs))
    if win <= 0 or hop <= 0:
        raise ValueError("window and hop must be positive")
    if win > n_fft:
        raise ValueError(f"window of {win} samples exceeds n_fft={n_fft}")
    n = frame_count(len(signal), win, hop)
    if n == 0:
        return np.zeros((0, n_fft // 2 + 1))
    frames = np.lib.stride_tricks.sliding_window_view(signal.samples, win)[:: hop][:n]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    spectra = np.fft.rfft(frames * window, n=n_fft, axis=1)
    return np.abs(spectra) ** 2


def mel_bank(fs: int, n_fft: int, n_mels: int = 64, fmin: float = 20.0, fmax: float = 7600.0) -> MelBank:
    """Triangular filters with centers uniformly spaced on the mel scale."""
    if not (0 <= fmin < fmax <= fs / 2):
        raise ValueError(f"band edges must satisfy 0 <= fmin < fmax <= fs/2, got ({fmin}, {fmax})")
    if n_mels < 1:
        raise ValueError("n_mels must be at least 1")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (fs / n_fft)
    left = edges[:-2, None]
    center = edges[1:-1, None]
    right = edges[2:, None]
    rising = (bin_freqs - left) / (center - left)
    falling = (right - bin_freqs) / (right - center)
    filters = np.maximum(0.0, np.minimum(rising, falling))
    return MelBank(filters, edges[1:-1], float(fmin), float(fmax))


def lfbe(signal: AudioBuffer, bank: MelBank, win_s: float, hop_s: float, n_fft: int) -> FeatureMatrix:
    """Floored log mel-filterbank energies, one vector per frame."""
    power = stft_power(signal, win_s, hop_s, n_fft)
    if power.shape[1] != bank.filters.shape[1]:
        raise ValueError(
            f"filterbank built for {bank.filters.shape[1]} bins, spectra have {power.shape[1]}"
        )
    energies = power @ bank.filters.T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)), hop_s, win_s)


def write_lfbe(path: str | Path, fm: FeatureMatrix) -> None:
    """Write magic 'LFBE', u16 version, u16 n_dims, u32 n_frames, f32-LE rows."""
    if fm.n_dims > 0xFFFF:
        raise ValueError("feature dimensionality exceeds u16 range")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHI", LFBE_MAGIC, LFBE_VERSION, fm.n_dims, fm.n_frames))
        f.write(np.ascontiguousarray(fm.frames, dtype="<f4").tobytes())


def read_lfbe(path: str | Path, frame_shift_s: float = 0.010, frame_length_s: float = 0.025) -> FeatureMatrix:
    """Read a file written by :func:`write_lfbe`.

    Frame geometry is not stored in the file; pass the values the features
    were extracted with.
    """
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12:
            raise ValueError(f"{path}: truncated header")
        magic, version, n_dims, n_frames = struct.unpack("<4sHHI", header)
        if magic != LFBE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != LFBE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        payload = f.read(4 * n_dims * n_frames)
    if len(payload) != 4 * n_dims * n_frames:
        raise ValueError(f"{path}: truncated payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_dims).astype(np.float64)
    return FeatureMatrix(frames, frame_shift_s, frame_length_s)


class LogMelExtractor(BaseEstimator, TransformerMixin):
    """Stateless sklearn transformer turning waveforms into LFBE matrices.

    Accepts a list of :class:`AudioBuffer` (or raw 1-D arrays assumed to be
    at ``sample_rate``) and returns a list of :class:`FeatureMatrix`.
    """

    def __init__(self, sample_rate=16000, win_s=0.025, hop_s=0.010, n_fft=512,
                 n_mels=64, fmin=20.0, fmax=7600.0):
        self.sample_rate = sample_rate
        self.win_s = win_s
        self.hop_s = hop_s
        self.n_fft = n_fft
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax

    def fit(self, X=None, y=None):
        # Stateless; provided for pipeline compatibility.
        return self

    def transform(self, X) -> list[FeatureMatrix]:
        bank = self._bank()
        out = []
        for item in X:
            buf = item if isinstance(item, AudioBuffer) else AudioBuffer(item, self.sample_rate)
            if buf.sample_rate != self.sample_rate:
                raise ValueError(
                    f"extractor configured for {self.sample_rate} Hz, got {buf.sample_rate} Hz"
                )
            out.append(lfbe(buf, bank, self.win_s, self.hop_s, self.n_fft))
        return out

    def _bank(self) -> MelBank:
        return mel_bank(self.sample_rate, self.n_fft, self.n_mels, self.fmin, self.fmax)
