"""Synthetic parallel clean/noisy corpus.

Clean "speech" is a concatenation of class-coded segments: harmonic stacks
with a class-specific fundamental and formant-like spectral envelope, so
classes are separable in log mel energies. Noises are music-like
amplitude-modulated harmonic mixtures plus band-limited broadband noise.
For every utterance a shoebox room is sampled; the speech and each selected
noise propagate through impulse responses from their own in-room positions,
and the reverberant noises are mixed in at a sampled SNR. The stored clean
member stays dry.

Everything is a pure function of (config, seed): each utterance and each
noise clip draws from its own derived random stream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, mix_at_snr, write_wav
from .features import frame_count
from .room import RoomSpec, convolve, derive_reflection_coeff, simulate_rir
from .seeding import derive_rng
from .validation import check_range_pair

__all__ = [
    "SimConfig",
    "UtteranceRecord",
    "NoiseBank",
    "Corpus",
    "class_profile",
    "synth_segment",
    "synth_noise_clip",
    "build_noise_bank",
    "generate_utterance",
    "generate_corpus",
    "write_corpus",
    "write_labels",
    "read_labels",
    "read_manifest",
]

LABELS_MAGIC = b"LBL1"


@dataclass(frozen=True)
class SimConfig:
    """Knobs for corpus simulation.

    Ranges are inclusive (lo, hi) pairs sampled uniformly. Frame geometry is
    carried here so segment boundaries land exactly on analysis frames.
    """

    snr_range_db: tuple[float, float] = (0.0, 30.0)
    t60_range_s: tuple[float, float] = (0.5, 0.9)
    noises_per_utt: tuple[int, int] = (1, 3)
    room_dim_ranges: tuple[tuple[float, float], ...] = ((4.0, 8.0), (3.0, 6.0), (2.4, 3.5))
    seed: int = 0
    sample_rate: int = 16000
    noise_bank_size: int = 16
    max_reflection_order: int | None = 12
    utt_frames: tuple[int, int] = (70, 130)
    segment_frames: tuple[int, int] = (10, 26)
    win_s: float = 0.025
    hop_s: float = 0.010

    def __post_init__(self):
        check_range_pair(self.snr_range_db, "snr_range_db")
        lo, hi = check_range_pair(self.t60_range_s, "t60_range_s")
        if lo <= 0:
            raise ValueError("t60 range must be positive")
        nlo, nhi = self.noises_per_utt
        if not (1 <= nlo <= nhi <= self.noise_bank_size):
            raise ValueError(
                f"noises_per_utt {self.noises_per_utt} must lie within [1, {self.noise_bank_size}]"
            )
        if len(self.room_dim_ranges) != 3:
            raise ValueError("room_dim_ranges needs one (lo, hi) pair per axis")
        for pair in self.room_dim_ranges:
            plo, phi = check_range_pair(pair, "room_dim_ranges")
            if plo <= 0:
                raise ValueError("room dimensions must be positive")
        check_range_pair(self.utt_frames, "utt_frames")
        check_range_pair(self.segment_frames, "segment_frames")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def win(self) -> int:
        return int(round(self.win_s * self.sample_rate))

    @property
    def hop(self) -> int:
        return int(round(self.hop_s * self.sample_rate))


@dataclass(frozen=True)
class UtteranceRecord:
    """A parallel clean/noisy pair with frame labels and token references."""

    id: str
    clean: AudioBuffer
    noisy: AudioBuffer
    frame_labels: np.ndarray
    token_refs: np.ndarray

    def __post_init__(self):
        if len(self.clean) != len(self.noisy):
            raise ValueError(f"{self.id}: clean and noisy lengths differ")
        if self.clean.sample_rate != self.noisy.sample_rate:
            raise ValueError(f"{self.id}: clean and noisy sample rates differ")
        labels = np.asarray(self.frame_labels, dtype=np.int64)
        tokens = np.asarray(self.token_refs, dtype=np.int64)
        if labels.ndim != 1 or tokens.ndim != 1:
            raise ValueError(f"{self.id}: labels and token refs must be 1-D")
        if labels.size and labels.min() < 0:
            raise ValueError(f"{self.id}: negative frame label")
        labels.setflags(write=False)
        tokens.setflags(write=False)
        object.__setattr__(self, "frame_labels", labels)
        object.__setattr__(self, "token_refs", tokens)

    def validate_frames(self, win: int, hop: int) -> None:
        expected = frame_count(len(self.clean), win, hop)
        if self.frame_labels.shape[0] != expected:
            raise ValueError(
                f"{self.id}: {self.frame_labels.shape[0]} labels vs {expected} analysis frames"
            )


@dataclass(frozen=True)
class NoiseBank:
    ids: tuple[str, ...]
    clips: tuple[AudioBuffer, ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Corpus:
    records: tuple[UtteranceRecord, ...]
    manifest: tuple[dict, ...]
    noise_bank: NoiseBank


_GOLDEN = 0.6180339887498949


def class_profile(class_idx: int, n_classes: int) -> dict:
    """Deterministic spectral identity of a class.

    Fundamentals are log-spaced; two formant-like resonances are scattered
    with golden-ratio strides so neighboring class indices are not neighbors
    in formant space.
    """
    t = class_idx / max(n_classes - 1, 1)
    f0 = 95.0 * (320.0 / 95.0) ** t
    f1 = 320.0 + 680.0 * ((class_idx * _GOLDEN) % 1.0)
    f2 = 1150.0 + 2050.0 * ((class_idx * _GOLDEN * _GOLDEN + 0.37) % 1.0)
    return {"f0": f0, "formants": ((f1, 140.0), (f2, 260.0))}


def _formant_envelope(freqs: np.ndarray, formants) -> np.ndarray:
    env = np.zeros_like(freqs)
    for center, width in formants:
        env += np.exp(-0.5 * ((freqs - center) / width) ** 2)
    return env + 0.05


def synth_segment(profile: dict, n_samples: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    """One voiced segment: a harmonic stack shaped by the class envelope."""
    f0 = profile["f0"]
    n_harm = int(min(3800.0 // f0, 24))
    harm_freqs = f0 * np.arange(1, n_harm + 1)
    amps = _formant_envelope(harm_freqs, profile["formants"]) / np.sqrt(np.arange(1, n_harm + 1))
    # Keep only the strongest partials; the rest contribute little energy
    # and dominate synthesis cost.
    keep = np.sort(np.argsort(-amps)[:12])
    harm_freqs, amps = harm_freqs[keep], amps[keep]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=harm_freqs.shape[0])
    t = np.arange(n_samples) / fs
    seg = (amps[:, None] * np.sin(2.0 * np.pi * harm_freqs[:, None] * t + phases[:, None])).sum(axis=0)
    seg *= 0.1 / max(np.sqrt(np.mean(seg**2)), 1e-12)
    ramp = min(int(0.005 * fs), n_samples // 2)
    if ramp > 0:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        seg[:ramp] *= fade
        seg[-ramp:] *= fade[::-1]
    return seg


def synth_noise_clip(rng: np.random.Generator, n_samples: int, fs: int) -> np.ndarray:
    """A multimedia-style noise clip: slow-modulated tones over colored noise."""
    t = np.arange(n_samples) / fs
    clip = np.zeros(n_samples)
    for _ in range(rng.integers(2, 5)):
        f0 = np.exp(rng.uniform(np.log(80.0), np.log(500.0)))
        n_harm = int(rng.integers(3, 6))
        mod_rate = rng.uniform(0.5, 4.0)
        mod_phase = rng.uniform(0.0, 2.0 * np.pi)
        tone = np.zeros(n_samples)
        for h in range(1, n_harm + 1):
            tone += np.sin(2.0 * np.pi * f0 * h * t + rng.uniform(0.0, 2.0 * np.pi)) / h
        clip += tone * (0.5 + 0.5 * np.sin(2.0 * np.pi * mod_rate * t + mod_phase))
    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, 1.0 / fs)
    lo = rng.uniform(100.0, 900.0)
    hi = rng.uniform(2000.0, 7000.0)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    broadband = np.fft.irfft(spectrum, n=n_samples)
    rms = max(np.sqrt(np.mean(broadband**2)), 1e-12)
    clip += 0.8 * broadband / rms * np.sqrt(np.mean(clip**2) + 0.01)
    clip *= 0.1 / max(np.sqrt(np.mean(clip**2)), 1e-12)
    return clip


def build_noise_bank(sim: SimConfig, seed: int, clip_s: float = 2.0, tag: str = "noise-bank") -> NoiseBank:
    n_samples = int(clip_s * sim.sample_rate)
    ids = []
    clips = []
    for i in range(sim.noise_bank_size):
        rng = derive_rng(seed, tag, i)
        ids.append(f"noise-{i:03d}")
        clips.append(AudioBuffer(synth_noise_clip(rng, n_samples, sim.sample_rate), sim.sample_rate))
    return NoiseBank(tuple(ids), tuple(clips))


def _loop_to(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[0] >= n:
        return x[:n]
    reps = -(-n // x.shape[0])
    return np.tile(x, reps)[:n]


def _sample_position(rng: np.random.Generator, dims, margin: float = 0.3) -> np.ndarray:
    lo = np.minimum(margin, np.asarray(dims) / 4.0)
    return rng.uniform(lo, np.asarray(dims) - lo)


def generate_utterance(
    sim: SimConfig,
    n_classes: int,
    seed: int,
    index: int,
    bank: NoiseBank,
    stream_tag: str = "utt",
    copy: int = 0,
) -> tuple[UtteranceRecord, dict]:
    """Build one parallel pair plus its manifest row; pure in all arguments.

    The clean side depends only on (seed, tag, index); the acoustic side
    (room, reverberation, noise choice, SNR) additionally depends on
    ``copy``, so higher copies are fresh noisy redraws of the same clean
    audio.
    """
    rng = derive_rng(seed, stream_tag, index, "clean")
    mix_rng = derive_rng(seed, stream_tag, index, "mix", copy)
    fs = sim.sample_rate
    win, hop = sim.win, sim.hop

    # Segment the utterance on the frame grid, avoiding adjacent repeats so
    # token references equal the segment class sequence.
    total_frames = int(rng.integers(sim.utt_frames[0], sim.utt_frames[1] + 1))
    seg_frames: list[int] = []
    seg_classes: list[int] = []
    remaining = total_frames
    while remaining > 0:
        length = int(rng.integers(sim.segment_frames[0], sim.segment_frames[1] + 1))
        length = min(length, remaining)
        cls = int(rng.integers(n_classes))
        while seg_classes and cls == seg_classes[-1]:
            cls = int(rng.integers(n_classes))
        seg_frames.append(length)
        seg_classes.append(cls)
        remaining -= length

    n_samples = win + (total_frames - 1) * hop
    clean = np.zeros(n_samples)
    frame_labels = np.zeros(total_frames, dtype=np.int64)
    frame_cursor = 0
    for j, (length, cls) in enumerate(zip(seg_frames, seg_classes)):
        start = frame_cursor * hop
        end = (frame_cursor + length) * hop if j < len(seg_frames) - 1 else n_samples
        clean[start:end] = synth_segment(class_profile(cls, n_classes), end - start, fs, rng)
        frame_labels[frame_cursor : frame_cursor + length] = cls
        frame_cursor += length

    # Room, reverberation and noise mixing.
    dims = tuple(mix_rng.uniform(lo, hi) for lo, hi in sim.room_dim_ranges)
    t60 = float(mix_rng.uniform(*sim.t60_range_s))
    src_pos = _sample_position(mix_rng, dims)
    mic_pos = _sample_position(mix_rng, dims)
    while np.linalg.norm(mic_pos - src_pos) < 0.2:
        mic_pos = _sample_position(mix_rng, dims)
    n_noises = int(mix_rng.integers(sim.noises_per_utt[0], sim.noises_per_utt[1] + 1))
    noise_picks = mix_rng.choice(len(bank), size=n_noises, replace=False)
    snr_db = float(mix_rng.uniform(*sim.snr_range_db))

    def rir_from(pos):
        room = RoomSpec(dims, tuple(pos), tuple(mic_pos), t60,
                        max_reflection_order=sim.max_reflection_order)
        return simulate_rir(room, derive_reflection_coeff(room), fs)

    clean_buf = AudioBuffer(clean, fs)
    reverb_speech = convolve(clean_buf, rir_from(src_pos))
    reverb_noises = []
    for pick in noise_picks:
        noise_pos = _sample_position(mix_rng, dims)
        looped = AudioBuffer(_loop_to(bank.clips[pick].samples, n_samples), fs)
        reverb_noises.append(convolve(looped, rir_from(noise_pos)))
    noisy = mix_at_snr(reverb_speech, reverb_noises, snr_db)
    peak = np.max(np.abs(noisy.samples))
    if peak > 0:
        noisy = AudioBuffer(noisy.samples * (0.35 / peak), fs)

    utt_id = f"{stream_tag}-{index:05d}"
    record = UtteranceRecord(
        id=utt_id,
        clean=clean_buf,
        noisy=noisy,
        frame_labels=frame_labels,
        token_refs=np.asarray(seg_classes, dtype=np.int64),
    )
    record.validate_frames(win, hop)
    row = {
        "id": utt_id,
        "clean_path": f"audio/{utt_id}.clean.wav",
        "noisy_path": f"audio/{utt_id}.noisy.wav",
        "snr_db": snr_db,
        "t60_s": t60,
        "noise_ids": [bank.ids[p] for p in noise_picks],
        "room_dims": [float(d) for d in dims],
        "label_path": f"labels/{utt_id}.lbl",
    }
    return record, row


def generate_corpus(
    sim: SimConfig,
    n_utts: int,
    n_classes: int,
    seed: int | None = None,
    stream_tag: str = "utt",
    copy: int = 0,
) -> Corpus:
    """Simulate a labeled parallel corpus; deterministic given the seed."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_utts < 0:
        raise ValueError("n_utts must be non-negative")
    root_seed = sim.seed if seed is None else seed
    bank = build_noise_bank(sim, root_seed, tag=f"{stream_tag}-noise-bank")
    records = []
    manifest = []
    for i in range(n_utts):
        record, row = generate_utterance(sim, n_classes, root_seed, i, bank, stream_tag, copy)
        records.append(record)
        manifest.append(row)
    return Corpus(tuple(records), tuple(manifest), bank)


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    """Write magic 'LBL1', u32 frame count, then u16 class indices, LE."""
    labels = np.asarray(labels)
    if labels.size and labels.max() > 0xFFFF:
        raise ValueError("class index exceeds u16 range")
    with open(path, "wb") as f:
        f.write(LABELS_MAGIC)
        f.write(struct.pack("<I", labels.shape[0]))
        f.write(labels.astype("<u2").tobytes())


def read_labels(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != LABELS_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        payload = f.read(2 * count)
    if len(payload) != 2 * count:
        raise ValueError(f"{path}: truncated label payload")
    return np.frombuffer(payload, dtype="<u2").astype(np.int64)


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Materialize WAVs, label files, noise bank and the JSONL manifest."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "noises").mkdir(parents=True, exist_ok=True)
    for record, row in zip(corpus.records, corpus.manifest):
        write_wav(out / row["clean_path"], record.clean)
        write_wav(out / row["noisy_path"], record.noisy)
        write_labels(out / row["label_path"], record.frame_labels)
    for nid, clip in zip(corpus.noise_bank.ids, corpus.noise_bank.clips):
        write_wav(out / "noises" / f"{nid}.wav", clip)
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w") as f:
        for row in corpus.manifest:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
