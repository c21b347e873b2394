import io
import struct

import numpy as np
import pytest

from noisedistill.codec import CodecParams, sparse_from_logits
from noisedistill.stgt import (
    BadMagicError,
    CorruptFrameError,
    StgtFormatError,
    TruncatedStreamError,
    UnsupportedVersionError,
    decode_stream,
    encode_stream,
)


def random_corpus(rng, n_utts, n_classes, max_frames=9):
    out = []
    for i in range(n_utts):
        n_frames = int(rng.integers(0, max_frames + 1))
        out.append((f"utt-{i:03d}", rng.uniform(-9, 9, (n_frames, n_classes))))
    return out


def encode_bytes(utts, params):
    sink = io.BytesIO()
    written = encode_stream(utts, params, sink)
    data = sink.getvalue()
    assert written == len(data)
    return data


class TestRoundtrip:
    def test_random_corpora_bit_exact(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            n_classes = int(rng.integers(2, 40))
            k = int(rng.integers(1, n_classes + 1))
            utts = random_corpus(rng, int(rng.integers(0, 6)), n_classes)
            params = CodecParams(k=k, temperature=float(rng.choice([0.5, 1.0, 2.0])))
            data = encode_bytes(utts, params)
            got_params, decoded = decode_stream(io.BytesIO(data))
            assert got_params.k == k
            assert got_params.temperature == pytest.approx(params.temperature, rel=1e-6)
            assert [u for u, _ in decoded] == [u for u, _ in utts]
            for (_, mat), (_, targets) in zip(utts, decoded):
                assert len(targets) == mat.shape[0]
                for t in range(mat.shape[0]):
                    assert targets[t] == sparse_from_logits(mat[t], k)

    def test_reencode_is_byte_identical(self):
        rng = np.random.default_rng(1)
        utts = random_corpus(rng, 4, 12)
        params = CodecParams(k=3, temperature=2.0)
        assert encode_bytes(utts, params) == encode_bytes(utts, params)

    def test_empty_stream(self):
        data = encode_bytes([], CodecParams(k=5, temperature=1.0))
        assert len(data) == 20  # header only
        _, decoded = decode_stream(io.BytesIO(data))
        assert decoded == []

    def test_empty_and_single_frame_utterances(self):
        rng = np.random.default_rng(2)
        utts = [("empty", np.zeros((0, 7))), ("one", rng.standard_normal((1, 7)))]
        data = encode_bytes(utts, CodecParams(k=2, temperature=1.0))
        _, decoded = decode_stream(io.BytesIO(data))
        assert len(decoded[0][1]) == 0
        assert len(decoded[1][1]) == 1


class TestSizes:
    def test_frame_payload_is_six_k_bytes(self):
        rng = np.random.default_rng(3)
        for k, n_frames in ((1, 4), (7, 2), (20, 5)):
            utts = [("u", rng.standard_normal((n_frames, 64)))]
            data = encode_bytes(utts, CodecParams(k=k, temperature=1.0))
            overhead = 20 + 2 + len(b"u") + 4
            assert len(data) - overhead == 6 * k * n_frames

    def test_bandwidth_reduction_at_3010_classes(self):
        # 20 kept logits cost 120 bytes/frame against 12040 for dense f32.
        rng = np.random.default_rng(4)
        n_frames = 11
        utts = [("u", rng.standard_normal((n_frames, 3010)))]
        data = encode_bytes(utts, CodecParams(k=20, temperature=2.0))
        payload_per_frame = (len(data) - (20 + 2 + 1 + 4)) / n_frames
        dense_per_frame = 4 * 3010
        assert payload_per_frame == 120
        assert dense_per_frame == 12040
        assert payload_per_frame / dense_per_frame < 0.01
        assert 1.0 - payload_per_frame / dense_per_frame == pytest.approx(0.99, abs=1e-3)

    def test_class_count_over_u16_rejected(self):
        with pytest.raises(ValueError, match="u16"):
            encode_stream([("u", np.zeros((1, 70000)))], CodecParams(k=1), io.BytesIO())

    def test_k_beyond_classes_rejected(self):
        with pytest.raises(ValueError, match="k="):
            encode_stream([("u", np.zeros((1, 4)))], CodecParams(k=5), io.BytesIO())


def valid_stream(rng=None, n_utts=2, n_frames=3, k=4, n_classes=16):
    rng = rng or np.random.default_rng(5)
    utts = [(f"utt-{i}", rng.standard_normal((n_frames, n_classes))) for i in range(n_utts)]
    return encode_bytes(utts, CodecParams(k=k, temperature=1.0))


class TestErrorKinds:
    def test_bad_magic(self):
        data = bytearray(valid_stream())
        data[:4] = b"STGX"
        with pytest.raises(BadMagicError):
            decode_stream(io.BytesIO(bytes(data)))

    def test_version_mismatch(self):
        data = bytearray(valid_stream())
        data[4:6] = struct.pack("<H", 9)
        with pytest.raises(UnsupportedVersionError):
            decode_stream(io.BytesIO(bytes(data)))

    def test_truncated_final_frame_names_utterance_and_frame(self):
        data = valid_stream(n_utts=2, n_frames=3, k=4)
        with pytest.raises(TruncatedStreamError, match=r"utt-1.*frame 2 of 3"):
            decode_stream(io.BytesIO(data[:-5]))

    def test_truncated_header(self):
        with pytest.raises(TruncatedStreamError):
            decode_stream(io.BytesIO(valid_stream()[:10]))

    def test_unsorted_entries_rejected(self):
        header = struct.pack("<4sHIHfI", b"STGT", 1, 8, 2, 1.0, 1)
        utt = struct.pack("<H", 1) + b"u" + struct.pack("<I", 1)
        frame = struct.pack("<Hf", 0, 1.0) + struct.pack("<Hf", 1, 2.0)  # ascending logits
        with pytest.raises(CorruptFrameError, match="canonical order"):
            decode_stream(io.BytesIO(header + utt + frame))

    def test_duplicate_indices_rejected(self):
        header = struct.pack("<4sHIHfI", b"STGT", 1, 8, 2, 1.0, 1)
        utt = struct.pack("<H", 1) + b"u" + struct.pack("<I", 1)
        frame = struct.pack("<Hf", 3, 2.0) + struct.pack("<Hf", 3, 1.0)
        with pytest.raises(CorruptFrameError, match="duplicate"):
            decode_stream(io.BytesIO(header + utt + frame))

    def test_index_beyond_class_count_rejected(self):
        header = struct.pack("<4sHIHfI", b"STGT", 1, 4, 1, 1.0, 1)
        utt = struct.pack("<H", 1) + b"u" + struct.pack("<I", 1)
        frame = struct.pack("<Hf", 9, 2.0)
        with pytest.raises(CorruptFrameError, match=">="):
            decode_stream(io.BytesIO(header + utt + frame))

    def test_trailing_garbage_rejected(self):
        with pytest.raises(StgtFormatError, match="after the last"):
            decode_stream(io.BytesIO(valid_stream() + b"\x00"))
