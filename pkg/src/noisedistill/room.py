"""Rectangular-room acoustics: image-method impulse responses and convolution.

The room is a shoebox with a single uniform wall reflection coefficient
derived from the requested reverberation time via Eyring's formula. Image
sources are enumerated over the reflection lattice; each image of total
reflection order r at distance d contributes a tap of amplitude
beta^r / (4*pi*d) at the nearest sample to d / c.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .audio import AudioBuffer
from .validation import as_float_vector, check_finite

__all__ = [
    "RoomSpec",
    "ImpulseResponse",
    "derive_reflection_coeff",
    "image_sources",
    "simulate_rir",
    "convolve",
    "measure_t60",
    "InvalidGeometryError",
    "SingularGeometryError",
]

DEFAULT_MAX_ORDER_CAP = 60


class InvalidGeometryError(ValueError):
    """Room dimensions or positions violate the shoebox constraints."""


class SingularGeometryError(ValueError):
    """Source and microphone coincide; the direct path is singular."""


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox geometry plus reverberation target.

    ``max_reflection_order=None`` selects ceil(t60 * c / min_dim), capped at
    :data:`DEFAULT_MAX_ORDER_CAP`, which covers the decay window without
    unbounded cost.
    """

    dims: tuple[float, float, float]
    source_pos: tuple[float, float, float]
    mic_pos: tuple[float, float, float]
    t60: float
    max_reflection_order: int | None = None
    speed_of_sound: float = 343.0

    def __post_init__(self):
        dims = tuple(float(v) for v in self.dims)
        src = tuple(float(v) for v in self.source_pos)
        mic = tuple(float(v) for v in self.mic_pos)
        if len(dims) != 3 or len(src) != 3 or len(mic) != 3:
            raise InvalidGeometryError("dims, source_pos and mic_pos must be 3-vectors")
        if any(d <= 0 for d in dims):
            raise InvalidGeometryError(f"room dimensions must be positive, got {dims}")
        for name, pos in (("source_pos", src), ("mic_pos", mic)):
            if any(not (0.0 < p < d) for p, d in zip(pos, dims)):
                raise InvalidGeometryError(f"{name} {pos} is not strictly inside room {dims}")
        if not self.t60 > 0:
            raise InvalidGeometryError(f"t60 must be positive, got {self.t60}")
        if self.max_reflection_order is not None and self.max_reflection_order < 0:
            raise InvalidGeometryError("max_reflection_order must be non-negative")
        if not self.speed_of_sound > 0:
            raise InvalidGeometryError("speed_of_sound must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "source_pos", src)
        object.__setattr__(self, "mic_pos", mic)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface_area(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    def effective_reflection_order(self) -> int:
        if self.max_reflection_order is not None:
            return self.max_reflection_order
        order = math.ceil(self.t60 * self.speed_of_sound / min(self.dims))
        return min(order, DEFAULT_MAX_ORDER_CAP)


@dataclass(frozen=True)
class ImpulseResponse:
    """A sampled room impulse response."""

    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        taps = as_float_vector(self.taps, "taps")
        check_finite(taps, "taps")
        if taps.shape[0] < 1:
            raise ValueError("impulse response must have at least one tap")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


def derive_reflection_coeff(room: RoomSpec) -> float:
    """Uniform wall reflection coefficient for the room's T60, via Eyring.

    absorption = 1 - exp(-0.161 * V / (S * t60)); the returned coefficient is
    sqrt(1 - absorption), applied identically to all six walls.
    """
    absorption = 1.0 - math.exp(-0.161 * room.volume / (room.surface_area * room.t60))
    return math.sqrt(1.0 - absorption)


def image_sources(room: RoomSpec, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """All image-source positions with total reflection order <= max_order.

    Returns ``(positions, orders)`` where positions has shape (n, 3). Images
    are mirrored copies of the source on the lattice
    pos_i = (1 - 2*p_i) * source_i + 2 * r_i * dim_i for p in {0,1}^3 and
    integer r; the per-axis reflection count is |r_i - p_i| + |r_i|.
    """
    dims = np.asarray(room.dims)
    src = np.asarray(room.source_pos)
    reach = (max_order + 1) // 2
    r = np.arange(-reach, reach + 1)
    rx, ry, rz = np.meshgrid(r, r, r, indexing="ij")
    lattice = np.stack([rx.ravel(), ry.ravel(), rz.ravel()], axis=1)
    all_pos = []
    all_orders = []
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                p = np.array([px, py, pz])
                orders = (np.abs(lattice - p) + np.abs(lattice)).sum(axis=1)
                keep = orders <= max_order
                pos = (1 - 2 * p) * src + 2.0 * lattice[keep] * dims
                all_pos.append(pos)
                all_orders.append(orders[keep])
    return np.concatenate(all_pos), np.concatenate(all_orders)


def simulate_rir(room: RoomSpec, beta: float, sample_rate: int = 16000) -> ImpulseResponse:
    """Image-method impulse response for a uniform reflection coefficient.

    Taps landing on the same sample index accumulate. Image delays are
    rounded to the nearest sample; no fractional-delay interpolation.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"reflection coefficient must be in [0, 1), got {beta}")
    max_order = room.effective_reflection_order()
    positions, orders = image_sources(room, max_order)
    mic = np.asarray(room.mic_pos)
    dist = np.sqrt(((positions - mic) ** 2).sum(axis=1))
    if np.min(dist) < 1e-9:
        raise SingularGeometryError("source and microphone coincide (zero-distance path)")
    amps = beta**orders / (4.0 * np.pi * dist)
    idx = np.rint(sample_rate * dist / room.speed_of_sound).astype(np.int64)
    taps = np.bincount(idx, weights=amps, minlength=int(idx.max()) + 1)
    last = np.flatnonzero(taps)
    if last.size == 0:
        raise ValueError("impulse response came out all-zero")
    return ImpulseResponse(taps[: last[-1] + 1], sample_rate)


def convolve(signal: AudioBuffer, ir: ImpulseResponse) -> AudioBuffer:
    """Full linear convolution truncated to the input length."""
    if signal.sample_rate != ir.sample_rate:
        raise ValueError(
            f"sample rate mismatch: signal {signal.sample_rate} Hz vs ir {ir.sample_rate} Hz"
        )
    if len(signal) == 0:
        return signal
    out = fftconvolve(signal.samples, ir.taps, mode="full")[: len(signal)]
    return AudioBuffer(out, signal.sample_rate)


def measure_t60(
    ir: ImpulseResponse,
    fit_range_db: tuple[float, float] = (-5.0, -15.0),
    dc_block_hz: float = 50.0,
) -> float:
    """Reverberation time from the Schroeder backward integral.

    Same-sample tap accumulation leaves a positive near-DC drift in
    image-method responses, so the response is DC-blocked before analysis.
    A line is fitted to the energy decay curve between the two dB levels
    (early-decay window; the method's late tail is dominated by low-loss
    axial paths) and the -60 dB time extrapolated from the slope.
    """
    taps = ir.taps
    if dc_block_hz > 0.0:
        spectrum = np.fft.rfft(taps)
        freqs = np.fft.rfftfreq(taps.shape[0], 1.0 / ir.sample_rate)
        spectrum[freqs < dc_block_hz] = 0.0
        taps = np.fft.irfft(spectrum, n=taps.shape[0])
    energy = taps**2
    tail = np.cumsum(energy[::-1])[::-1]
    total = tail[0]
    if total <= 0:
        raise ValueError("impulse response has zero energy")
    with np.errstate(divide="ignore"):
        decay_db = 10.0 * np.log10(np.maximum(tail, 1e-300) / total)
    hi, lo = fit_range_db
    mask = (decay_db <= hi) & (decay_db >= lo)
    if mask.sum() < 2:
        raise ValueError(f"decay range {fit_range_db} dB not covered; impulse response too short")
    t = np.flatnonzero(mask) / ir.sample_rate
    slope, _ = np.polyfit(t, decay_db[mask], 1)
    if slope >= 0:
        raise ValueError("energy decay curve is not decreasing over the fit range")
    return -60.0 / slope
