"""STGT: a compact binary stream of sparse soft targets.

Layout, all little-endian:

  magic "STGT" | u16 version=1 | u32 n_classes | u16 k | f32 default temperature
  | u32 utterance count
  per utterance: u16 id length | UTF-8 id | u32 frame count
  per frame: k x (u16 class index, f32 logit), descending logit, ties by
  ascending index

Each frame costs exactly 6*k bytes regardless of the number of classes,
which is what makes shipping teacher outputs around cheap.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable

import numpy as np

from .codec import CodecParams, SparseTargets

__all__ = [
    "STGT_MAGIC",
    "STGT_VERSION",
    "encode_stream",
    "decode_stream",
    "StgtFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedStreamError",
    "CorruptFrameError",
]

STGT_MAGIC = b"STGT"
STGT_VERSION = 1
_HEADER = struct.Struct("<4sHIHfI")
_UTT_HEADER = struct.Struct("<H")
_FRAME_COUNT = struct.Struct("<I")
_ENTRY_BYTES = 6


class StgtFormatError(ValueError):
    """Base class for malformed STGT data."""


class BadMagicError(StgtFormatError):
    pass


class UnsupportedVersionError(StgtFormatError):
    pass


class TruncatedStreamError(StgtFormatError):
    pass


class CorruptFrameError(StgtFormatError):
    pass


def _entry_dtype() -> np.dtype:
    return np.dtype([("index", "<u2"), ("logit", "<f4")])


def encode_stream(
    utterances: Iterable[tuple[str, np.ndarray]],
    params: CodecParams,
    sink: BinaryIO,
) -> int:
    """Select top-k logits per frame and write the stream; returns bytes written.

    ``utterances`` yields (id, logits) pairs with logits of shape
    (n_frames, n_classes); every utterance must share the same class count.
    Selection and tie-breaking operate on the float32 values that get stored.
    """
    entries = list(utterances)
    n_classes = None
    for utt_id, mat in entries:
        mat = np.asarray(mat)
        if mat.ndim != 2:
            raise ValueError(f"{utt_id}: logits must be (n_frames, n_classes)")
        if n_classes is None:
            n_classes = mat.shape[1]
        elif mat.shape[1] != n_classes:
            raise ValueError(
                f"{utt_id}: class count {mat.shape[1]} differs from stream's {n_classes}"
            )
    if n_classes is None:
        n_classes = 0
    if n_classes > 0xFFFF:
        raise ValueError(f"class count {n_classes} exceeds the u16 index range")
    if entries and params.k > n_classes:
        raise ValueError(f"k={params.k} exceeds class count {n_classes}")

    written = 0

    def emit(data: bytes) -> None:
        nonlocal written
        sink.write(data)
        written += len(data)

    emit(_HEADER.pack(STGT_MAGIC, STGT_VERSION, n_classes, params.k,
                      float(params.temperature), len(entries)))
    dtype = _entry_dtype()
    for utt_id, mat in entries:
        raw_id = utt_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise ValueError(f"utterance id too long: {utt_id!r}")
        mat32 = np.asarray(mat, dtype=np.float32)
        if not np.all(np.isfinite(mat32)):
            raise ValueError(f"{utt_id}: logits must be finite")
        n_frames = mat32.shape[0]
        emit(_UTT_HEADER.pack(len(raw_id)))
        emit(raw_id)
        emit(_FRAME_COUNT.pack(n_frames))
        if n_frames:
            # Stable argsort of the negated values keeps ascending-index
            # order inside ties, which is exactly the on-disk ordering rule.
            order = np.argsort(-mat32, axis=1, kind="stable")[:, : params.k]
            rows = np.arange(n_frames)[:, None]
            packed = np.empty((n_frames, params.k), dtype=dtype)
            packed["index"] = order
            packed["logit"] = mat32[rows, order]
            emit(packed.tobytes())
    return written


def decode_stream(source: BinaryIO) -> tuple[CodecParams, list[tuple[str, SparseTargets]]]:
    """Parse an STGT stream back into per-utterance sparse targets.

    Raises :class:`BadMagicError`, :class:`UnsupportedVersionError`,
    :class:`TruncatedStreamError` (naming the utterance and frame), or
    :class:`CorruptFrameError` for unsorted or duplicated indices.
    """
    header = source.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise TruncatedStreamError("stream shorter than the fixed header")
    magic, version, n_classes, k, temperature, n_utts = _HEADER.unpack(header)
    if magic != STGT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {STGT_MAGIC!r}")
    if version != STGT_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if k < 1:
        raise CorruptFrameError("header k must be at least 1")
    params = CodecParams(k=k, temperature=temperature)
    dtype = _entry_dtype()
    utterances: list[tuple[str, SparseTargets]] = []
    for u in range(n_utts):
        id_hdr = source.read(_UTT_HEADER.size)
        if len(id_hdr) < _UTT_HEADER.size:
            raise TruncatedStreamError(f"stream ends inside the header of utterance {u}")
        (id_len,) = _UTT_HEADER.unpack(id_hdr)
        raw_id = source.read(id_len)
        if len(raw_id) < id_len:
            raise TruncatedStreamError(f"stream ends inside the id of utterance {u}")
        utt_id = raw_id.decode("utf-8")
        count_hdr = source.read(_FRAME_COUNT.size)
        if len(count_hdr) < _FRAME_COUNT.size:
            raise TruncatedStreamError(f"{utt_id}: stream ends before the frame count")
        (n_frames,) = _FRAME_COUNT.unpack(count_hdr)
        payload = source.read(n_frames * k * _ENTRY_BYTES)
        if len(payload) < n_frames * k * _ENTRY_BYTES:
            got = len(payload) // (k * _ENTRY_BYTES)
            raise TruncatedStreamError(
                f"{utt_id}: truncated at frame {got} of {n_frames}"
            )
        entries = np.frombuffer(payload, dtype=dtype).reshape(n_frames, k)
        indices = entries["index"].astype(np.int64)
        logits = entries["logit"].copy()
        _validate_frames(utt_id, indices, logits, n_classes)
        utterances.append((utt_id, SparseTargets(indices, logits)))
    trailing = source.read(1)
    if trailing:
        raise StgtFormatError("unexpected data after the last utterance")
    return params, utterances


def _validate_frames(utt_id: str, indices: np.ndarray, logits: np.ndarray, n_classes: int) -> None:
    if indices.size == 0:
        return
    if indices.max() >= n_classes:
        frame = int(np.argwhere((indices >= n_classes).any(axis=1))[0, 0])
        raise CorruptFrameError(f"{utt_id}: frame {frame} references class >= {n_classes}")
    if indices.shape[1] > 1:
        ok = (logits[:, :-1] > logits[:, 1:]) | (
            (logits[:, :-1] == logits[:, 1:]) & (indices[:, :-1] < indices[:, 1:])
        )
        bad = ~ok.all(axis=1)
        if bad.any():
            frame = int(np.flatnonzero(bad)[0])
            raise CorruptFrameError(f"{utt_id}: frame {frame} entries are not in canonical order")
        sorted_idx = np.sort(indices, axis=1)
        dup = (np.diff(sorted_idx, axis=1) == 0).any(axis=1)
        if dup.any():
            frame = int(np.flatnonzero(dup)[0])
            raise CorruptFrameError(f"{utt_id}: frame {frame} has duplicate class indices")
