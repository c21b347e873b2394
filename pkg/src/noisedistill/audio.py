"""Mono audio buffers, WAV I/O, and SNR-controlled mixing."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .validation import as_float_vector, check_finite

__all__ = ["AudioBuffer", "mix_at_snr", "read_wav", "write_wav", "quantize_pcm16", "pcm16_roundtrip"]


@dataclass(frozen=True)
class AudioBuffer:
    """A mono sample sequence with its sample rate.

    Samples are dimensionless amplitudes, nominally in [-1, 1]; all values
    must be finite and the sample rate must be a positive integer.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = as_float_vector(self.samples, "samples")
        check_finite(samples, "samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if not (isinstance(self.sample_rate, (int, np.integer)) and self.sample_rate > 0):
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def power(self) -> float:
        """Mean squared amplitude over the whole buffer."""
        if len(self) == 0:
            return 0.0
        return float(np.mean(self.samples**2))


def _loop_to_length(x: np.ndarray, n: int) -> np.ndarray:
    """Cyclically repeat or truncate x to exactly n samples."""
    if x.shape[0] == n:
        return x
    reps = -(-n // x.shape[0])
    return np.tile(x, reps)[:n]


def mix_at_snr(clean: AudioBuffer, noises: list[AudioBuffer], snr_db: float) -> AudioBuffer:
    """Add the summed noises to the clean signal at an exact SNR.

    Noises are looped or truncated to the clean length, summed, and the sum is
    scaled so that mean-squared-power(clean) / mean-squared-power(scaled sum)
    equals 10^(snr_db/10). The returned mixture therefore measures exactly
    snr_db by construction.
    """
    if not noises:
        raise ValueError("at least one noise buffer is required")
    if len(clean) == 0:
        raise ValueError("clean signal is empty")
    for n in noises:
        if n.sample_rate != clean.sample_rate:
            raise ValueError(
                f"sample rate mismatch: clean {clean.sample_rate} Hz vs noise {n.sample_rate} Hz"
            )
        if len(n) == 0:
            raise ValueError("noise buffer is empty")
    p_clean = clean.power()
    if p_clean == 0.0:
        raise ValueError("clean signal has zero power; SNR undefined")
    noise_sum = np.zeros(len(clean))
    for n in noises:
        noise_sum += _loop_to_length(n.samples, len(clean))
    p_noise = float(np.mean(noise_sum**2))
    if p_noise == 0.0:
        raise ValueError("summed noise has zero power; SNR undefined")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioBuffer(clean.samples + gain * noise_sum, clean.sample_rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Quantize float amplitudes to int16 exactly as WAV output does."""
    return np.clip(np.rint(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)


def write_wav(path: str | Path, buf: AudioBuffer) -> None:
    """Write a mono 16-bit little-endian RIFF PCM file."""
    pcm = quantize_pcm16(buf.samples)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buf.sample_rate)
        w.writeframes(pcm.tobytes())


def pcm16_roundtrip(buf: AudioBuffer) -> AudioBuffer:
    """Apply the 16-bit quantization a WAV write/read cycle would apply.

    Keeps in-memory pipelines bit-identical to pipelines that go through
    WAV files on disk.
    """
    return AudioBuffer(quantize_pcm16(buf.samples).astype(np.float64) / 32767.0, buf.sample_rate)


def read_wav(path: str | Path) -> AudioBuffer:
    """Read a mono 16-bit PCM file written by :func:`write_wav`."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32767.0, rate)
