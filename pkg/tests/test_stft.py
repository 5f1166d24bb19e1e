import numpy as np
import pytest

from nfbeam import stft


CFG = stft.StftConfig()


def rel_error_db(x, y):
    return 10 * np.log10(np.sum((x - y) ** 2) / np.sum(y ** 2))


class TestConfig:
    def test_defaults_match_16k_setup(self):
        assert CFG.frame_len == 200
        assert CFG.fft_size == 256
        assert CFG.hop == 100
        assert CFG.n_bins == 129
        assert CFG.bin_freqs_hz[1] == pytest.approx(62.5)

    def test_for_rate(self):
        cfg = stft.StftConfig.for_rate(16000)
        assert cfg == CFG

    def test_rejects_bad_overlap(self):
        with pytest.raises(ValueError):
            stft.StftConfig(frame_len=200, fft_size=256, hop=50)

    def test_rejects_short_fft(self):
        with pytest.raises(ValueError):
            stft.StftConfig(frame_len=200, fft_size=128, hop=100)

    def test_cola_constant(self):
        # sum of squared windows over all hops is 1 on the interior
        win_sq = stft.sqrt_hann(CFG.frame_len) ** 2
        acc = np.zeros(CFG.frame_len * 4)
        for l in range(7):
            acc[l * CFG.hop: l * CFG.hop + CFG.frame_len] += win_sq
        interior = acc[CFG.frame_len: -CFG.frame_len]
        assert np.max(np.abs(interior - 1.0)) < 1e-10


class TestAnalyze:
    def test_zero_signal_gives_zero_frames(self):
        frames = stft.analyze(CFG, np.zeros(1600))
        assert frames.shape == (129, 15)
        assert np.all(frames == 0)

    def test_tone_energy_concentrates_at_its_bin(self):
        # 1 kHz = bin 16 exactly on the 256-point grid at 16 kHz
        n = 16000
        t = np.arange(n) / CFG.sample_rate
        x = np.cos(2 * np.pi * 1000.0 * t)
        frames = stft.analyze(CFG, x)
        energy = np.abs(frames) ** 2
        # double the interior-bin mass to account for the conjugate half
        weights = np.ones(CFG.n_bins)
        weights[1:-1] = 2.0
        energy = energy * weights[:, None]
        k = 16
        frac = energy[k - 1: k + 2].sum() / energy.sum()
        assert frac > 0.99

    def test_linearity(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(4000)
        y = rng.standard_normal(4000)
        lhs = stft.analyze(CFG, x + y)
        rhs = stft.analyze(CFG, x) + stft.analyze(CFG, y)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(1000)
        frames = stft.analyze(CFG, x)
        window = stft.sqrt_hann(CFG.frame_len)
        for l in range(frames.shape[1]):
            seg = x[l * CFG.hop: l * CFG.hop + CFG.frame_len] * window
            time_energy = np.sum(seg ** 2)
            spec = frames[:, l]
            spec_energy = (np.abs(spec[0]) ** 2 + np.abs(spec[-1]) ** 2
                           + 2 * np.sum(np.abs(spec[1:-1]) ** 2)) / CFG.fft_size
            assert spec_energy == pytest.approx(time_energy, rel=1e-10)

    def test_multichannel_shape(self):
        x = np.random.default_rng(9).standard_normal((4, 2000))
        frames = stft.analyze(CFG, x)
        assert frames.shape == (129, 19, 4)
        np.testing.assert_allclose(frames[:, :, 2], stft.analyze(CFG, x[2]))

    def test_empty_signal_error(self):
        with pytest.raises(ValueError):
            stft.analyze(CFG, np.zeros(0))
        with pytest.raises(ValueError):
            stft.analyze(CFG, np.zeros(100))


class TestSynthesize:
    def test_zero_frames_give_zero_signal(self):
        out = stft.synthesize(CFG, np.zeros((129, 10), dtype=complex))
        assert np.all(out == 0)

    def test_round_trip_white_noise(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(16000)
        out = stft.synthesize(CFG, stft.analyze(CFG, x))
        sl = stft.interior_slice(CFG, len(out))
        assert rel_error_db(out[sl], x[sl]) < -80.0

    def test_round_trip_tone(self):
        t = np.arange(16000) / CFG.sample_rate
        x = np.sin(2 * np.pi * 1000.0 * t)
        out = stft.synthesize(CFG, stft.analyze(CFG, x))
        sl = stft.interior_slice(CFG, len(out))
        assert rel_error_db(out[sl], x[sl]) < -80.0

    def test_config_mismatch_error(self):
        with pytest.raises(ValueError):
            stft.synthesize(CFG, np.zeros((65, 10), dtype=complex))
