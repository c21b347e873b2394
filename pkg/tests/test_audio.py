import numpy as np
import pytest

from noisedistill.audio import (
    AudioBuffer,
    mix_at_snr,
    pcm16_roundtrip,
    quantize_pcm16,
    read_wav,
    write_wav,
)


def measured_snr_db(out: AudioBuffer, clean: AudioBuffer) -> float:
    noise = out.samples - clean.samples
    return 10.0 * np.log10(clean.power() / np.mean(noise**2))


class TestAudioBuffer:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            AudioBuffer([0.0, np.inf], 16000)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            AudioBuffer([0.0], 0)
        with pytest.raises(ValueError):
            AudioBuffer([0.0], -5)

    def test_power(self):
        assert AudioBuffer([1.0, -1.0, 1.0, -1.0], 8000).power() == 1.0


class TestMixAtSnr:
    def test_equal_power_zero_db_gain_is_one(self):
        clean = AudioBuffer([1.0, -1.0, 1.0, -1.0], 16000)
        noise = AudioBuffer([-1.0, 1.0, 1.0, -1.0], 16000)
        out = mix_at_snr(clean, [noise], 0.0)
        np.testing.assert_allclose(out.samples, clean.samples + noise.samples, atol=1e-15)

    def test_equal_power_20_db_gain_is_tenth(self):
        clean = AudioBuffer([1.0, -1.0, 1.0, -1.0], 16000)
        noise = AudioBuffer([-1.0, 1.0, 1.0, -1.0], 16000)
        out = mix_at_snr(clean, [noise], 20.0)
        np.testing.assert_allclose(out.samples, clean.samples + 0.1 * noise.samples, atol=1e-15)

    def test_measured_snr_matches_request(self):
        rng = np.random.default_rng(42)
        clean = AudioBuffer(rng.standard_normal(4000), 16000)
        noises = [AudioBuffer(0.3 * rng.standard_normal(4000), 16000) for _ in range(3)]
        out = mix_at_snr(clean, noises, 7.3)
        assert measured_snr_db(out, clean) == pytest.approx(7.3, abs=1e-9)

    @pytest.mark.parametrize("snr", [-10.0, 0.0, 3.7, 15.0, 30.0])
    def test_snr_exact_over_range(self, snr):
        rng = np.random.default_rng(int(abs(snr) * 10) + 1)
        clean = AudioBuffer(rng.uniform(-0.5, 0.5, 2048), 16000)
        noise = AudioBuffer(rng.standard_normal(999), 16000)
        out = mix_at_snr(clean, [noise], snr)
        assert measured_snr_db(out, clean) == pytest.approx(snr, abs=1e-9)

    def test_short_noise_is_looped(self):
        clean = AudioBuffer(np.ones(10), 16000)
        noise = AudioBuffer([1.0, -1.0, 2.0], 16000)
        out = mix_at_snr(clean, [noise], 0.0)
        looped = np.tile(noise.samples, 4)[:10]
        gain = np.sqrt(1.0 / np.mean(looped**2))
        np.testing.assert_allclose(out.samples, clean.samples + gain * looped, atol=1e-12)

    def test_zero_power_clean_rejected(self):
        with pytest.raises(ValueError, match="zero power"):
            mix_at_snr(AudioBuffer(np.zeros(8), 16000), [AudioBuffer(np.ones(8), 16000)], 5.0)

    def test_zero_power_noise_rejected(self):
        with pytest.raises(ValueError, match="zero power"):
            mix_at_snr(AudioBuffer(np.ones(8), 16000), [AudioBuffer(np.zeros(8), 16000)], 5.0)

    def test_no_noises_rejected(self):
        with pytest.raises(ValueError):
            mix_at_snr(AudioBuffer(np.ones(8), 16000), [], 5.0)

    def test_rate_mismatch_rejected(self):
        with pytest.raises(ValueError, match="sample rate"):
            mix_at_snr(AudioBuffer(np.ones(8), 16000), [AudioBuffer(np.ones(8), 8000)], 5.0)


class TestWav:
    def test_roundtrip_is_quantization(self, tmp_path):
        rng = np.random.default_rng(7)
        buf = AudioBuffer(rng.uniform(-0.9, 0.9, 1234), 16000)
        path = tmp_path / "x.wav"
        write_wav(path, buf)
        back = read_wav(path)
        assert back.sample_rate == 16000
        np.testing.assert_array_equal(
            back.samples, quantize_pcm16(buf.samples).astype(np.float64) / 32767.0
        )

    def test_pcm16_roundtrip_matches_file_path(self, tmp_path):
        rng = np.random.default_rng(8)
        buf = AudioBuffer(rng.uniform(-1.0, 1.0, 500), 16000)
        path = tmp_path / "y.wav"
        write_wav(path, buf)
        np.testing.assert_array_equal(read_wav(path).samples, pcm16_roundtrip(buf).samples)

    def test_quantization_idempotent(self):
        rng = np.random.default_rng(9)
        buf = AudioBuffer(rng.uniform(-1.1, 1.1, 400), 16000)
        once = pcm16_roundtrip(buf)
        twice = pcm16_roundtrip(once)
        np.testing.assert_array_equal(once.samples, twice.samples)
