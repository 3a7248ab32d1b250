import numpy as np
import pytest

from asrpoison.audio import (
    FrameConfig,
    Waveform,
    extract_features,
    feature_forward,
    feature_backward,
    feature_gradient_to_waveform,
    frame_signal,
    mel_filterbank,
    dct_matrix,
    delta_matrix,
    hz_to_mel,
    mel_to_hz,
    n_frames,
    power_spectrum,
    quantize,
    read_wav,
    write_wav,
)

SMALL = FrameConfig(frame_length=64, hop_length=32, dft_size=64, n_mel=12, n_ceps=6,
                    delta_window=2)


def naive_dft_power(frame, dft_size):
    """O(n^2) DFT power oracle over the first dft_size//2 + 1 bins."""
    n = dft_size
    padded = np.zeros(n)
    padded[:len(frame)] = frame
    bins = n // 2 + 1
    out = np.zeros(bins)
    for k in range(bins):
        re = sum(padded[t] * np.cos(2 * np.pi * k * t / n) for t in range(n))
        im = -sum(padded[t] * np.sin(2 * np.pi * k * t / n) for t in range(n))
        out[k] = re * re + im * im
    return out


def reference_mfcc(samples, sample_rate, cfg):
    """Independent static-MFCC implementation (loops + scipy DCT) used as oracle."""
    from scipy.fftpack import dct as scipy_dct

    count = (len(samples) - cfg.frame_length) // cfg.hop_length + 1
    if cfg.window == "hann":
        win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.frame_length) / cfg.frame_length)
    else:
        win = np.ones(cfg.frame_length)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), cfg.n_mel + 2))
    rows = []
    for i in range(count):
        frame = samples[i * cfg.hop_length:i * cfg.hop_length + cfg.frame_length] * win
        spec = np.fft.rfft(frame, n=cfg.dft_size)
        power = np.abs(spec) ** 2
        mels = np.zeros(cfg.n_mel)
        for j in range(cfg.n_mel):
            for k in range(cfg.dft_size // 2 + 1):
                f = k * sample_rate / cfg.dft_size
                lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
                wgt = max(0.0, min((f - lo) / (mid - lo), (hi - f) / (hi - mid)))
                mels[j] += wgt * power[k]
        logm = np.log(np.maximum(cfg.log_floor, mels))
        rows.append(scipy_dct(logm, type=2, norm="ortho")[:cfg.n_ceps])
    return np.array(rows)


class TestFraming:
    def test_single_frame(self):
        w = Waveform(np.zeros(400))
        cfg = FrameConfig(frame_length=400, hop_length=160)
        assert frame_signal(w, cfg).shape == (1, 400)

    def test_two_frames_offsets(self):
        samples = np.arange(560, dtype=np.float64) / 1000.0
        cfg = FrameConfig(frame_length=400, hop_length=160)
        frames = frame_signal(Waveform(samples), cfg)
        assert frames.shape == (2, 400)
        np.testing.assert_array_equal(frames[0], samples[:400])
        np.testing.assert_array_equal(frames[1], samples[160:560])

    def test_one_second_framecount(self):
        # floor((16000 - 400) / 160) + 1 = 98, checked by hand
        assert n_frames(16000, FrameConfig()) == 98

    def test_too_short_errors(self):
        with pytest.raises(ValueError, match="shorter than one frame"):
            frame_signal(Waveform(np.zeros(399)), FrameConfig())

    def test_count_formula_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            frame = int(rng.integers(1, 64))
            hop = int(rng.integers(1, frame + 1))
            length = int(rng.integers(frame, 512))
            cfg = FrameConfig(frame_length=frame, hop_length=hop, dft_size=64,
                              n_mel=4, n_ceps=3)
            got = frame_signal(Waveform(np.zeros(length)), cfg).shape[0]
            assert got == (length - frame) // hop + 1


class TestPowerSpectrum:
    def test_zero_frame(self):
        spec = power_spectrum(np.zeros((1, 64)), SMALL)
        assert np.all(spec.values == 0.0)

    def test_sinusoid_at_bin_center(self):
        cfg = FrameConfig(frame_length=64, hop_length=32, dft_size=64, n_mel=12,
                          n_ceps=6, window="rect")
        k = 5
        frame = np.cos(2 * np.pi * k * np.arange(64) / 64)
        spec = power_spectrum(frame[None, :], cfg)
        assert np.argmax(spec.values[0]) == k
        others = np.delete(spec.values[0], k)
        assert np.all(others < 1e-20 * spec.values[0, k])

    def test_matches_naive_dft(self):
        rng = np.random.default_rng(11)
        cfg = FrameConfig(frame_length=16, hop_length=16, dft_size=16, n_mel=4,
                          n_ceps=3, window="rect")
        frame = rng.standard_normal(16)
        ours = power_spectrum(frame[None, :], cfg).values[0]
        oracle = naive_dft_power(frame, 16)
        np.testing.assert_allclose(ours, oracle, rtol=1e-10, atol=1e-12)

    def test_matches_naive_dft_windowed_batch(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            n = int(rng.integers(8, 65))
            cfg = FrameConfig(frame_length=n, hop_length=n, dft_size=n if n % 2 == 0 else n + 1,
                              n_mel=4, n_ceps=3)
            frame = rng.standard_normal(n)
            win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
            ours = power_spectrum(frame[None, :], cfg).values[0]
            oracle = naive_dft_power(frame * win, cfg.dft_size)
            np.testing.assert_allclose(ours, oracle, rtol=1e-9, atol=1e-12)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            power_spectrum(np.zeros((0, 64)), SMALL)


class TestFeatures:
    def test_deterministic(self):
        rng = np.random.default_rng(3)
        samples = rng.uniform(-0.5, 0.5, 1200)
        a = extract_features(Waveform(samples), SMALL)
        b = extract_features(Waveform(samples.copy()), SMALL)
        assert np.array_equal(a, b)

    def test_dc_signal_has_zero_deltas(self):
        w = Waveform(np.full(1200, 0.25))
        feats = extract_features(w, SMALL)
        nc = SMALL.n_ceps
        np.testing.assert_allclose(feats[:, nc:], 0.0, atol=1e-12)

    def test_matches_reference_mfcc(self):
        sr = 16000
        t = np.arange(int(0.5 * sr)) / sr
        # vowel-ish tone: two harmonics plus mild noise
        rng = np.random.default_rng(21)
        samples = (0.4 * np.sin(2 * np.pi * 220 * t)
                   + 0.2 * np.sin(2 * np.pi * 660 * t + 0.3)
                   + 0.01 * rng.standard_normal(t.size))
        cfg = FrameConfig()
        ours = extract_features(Waveform(samples, sr), cfg)[:, :cfg.n_ceps]
        oracle = reference_mfcc(samples, sr, cfg)
        np.testing.assert_allclose(ours, oracle, rtol=1e-6, atol=1e-9)

    def test_feature_width_and_rows(self):
        w = Waveform(np.random.default_rng(0).uniform(-0.3, 0.3, 1000))
        feats = extract_features(w, SMALL)
        assert feats.shape == (n_frames(1000, SMALL), 3 * SMALL.n_ceps)
        assert np.all(np.isfinite(feats))

    def test_shift_by_hop_shifts_rows(self):
        rng = np.random.default_rng(5)
        base = rng.uniform(-0.5, 0.5, 2400)
        f_full = extract_features(Waveform(base), SMALL)
        f_shift = extract_features(Waveform(base[SMALL.hop_length:]), SMALL)
        # rows whose delta context avoids the replicated edges must agree
        pad = 2 * SMALL.delta_window
        interior = slice(pad, f_shift.shape[0] - pad)
        np.testing.assert_allclose(f_shift[interior],
                                   f_full[1:][interior], atol=1e-9)


class TestFeatureGradient:
    def test_zero_upstream(self):
        w = Waveform(np.random.default_rng(1).uniform(-0.4, 0.4, 300))
        grad = feature_gradient_to_waveform(w, SMALL, np.zeros((8, 18)))
        assert np.all(grad == 0.0)

    def test_locality_of_single_entry(self):
        w = Waveform(np.random.default_rng(2).uniform(-0.4, 0.4, 300))
        cache = feature_forward(w, SMALL)
        up = np.zeros_like(cache.features)
        up[3, 0] = 1.0  # static coefficient: depends only on frame 3
        grad = feature_backward(cache, up)
        start = 3 * SMALL.hop_length
        outside = np.concatenate([grad[:start], grad[start + SMALL.frame_length:]])
        assert np.all(outside == 0.0)
        assert np.any(grad[start:start + SMALL.frame_length] != 0.0)

    def test_shape_mismatch(self):
        w = Waveform(np.zeros(300))
        with pytest.raises(ValueError, match="upstream"):
            feature_gradient_to_waveform(w, SMALL, np.zeros((2, 5)))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        cfg = SMALL
        samples = rng.uniform(-0.5, 0.5, cfg.frame_length + cfg.hop_length)  # 2 frames
        upstream = rng.standard_normal((2, cfg.feature_dim))

        def loss(x):
            return float(np.sum(extract_features(Waveform(x), cfg) * upstream))

        analytic = feature_gradient_to_waveform(Waveform(samples), cfg, upstream)
        h = 1e-4
        for i in range(0, samples.size, 7):
            plus = samples.copy(); plus[i] += h
            minus = samples.copy(); minus[i] -= h
            fd = (loss(plus) - loss(minus)) / (2 * h)
            if abs(analytic[i]) > 1e-8:
                assert abs(fd - analytic[i]) / abs(analytic[i]) < 1e-4
            else:
                assert abs(fd) < 1e-6

    def test_spectral_scale_of_ones_is_identity(self):
        rng = np.random.default_rng(23)
        w = Waveform(rng.uniform(-0.5, 0.5, 400))
        cache = feature_forward(w, SMALL)
        up = rng.standard_normal(cache.features.shape)
        plain = feature_backward(cache, up)
        scaled = feature_backward(cache, up, np.ones_like(cache.power))
        np.testing.assert_array_equal(plain, scaled)

    def test_spectral_scale_of_zeros_kills_gradient(self):
        rng = np.random.default_rng(24)
        w = Waveform(rng.uniform(-0.5, 0.5, 400))
        cache = feature_forward(w, SMALL)
        up = rng.standard_normal(cache.features.shape)
        scaled = feature_backward(cache, up, np.zeros_like(cache.power))
        assert np.all(scaled == 0.0)


class TestHelpers:
    def test_mel_filterbank_shape_and_coverage(self):
        fb = mel_filterbank(FrameConfig(), 16000)
        assert fb.shape == (23, 257)
        assert np.all(fb >= 0.0)
        assert np.all(fb.sum(axis=1) > 0.0)

    def test_dct_matrix_orthonormal_rows(self):
        mat = dct_matrix(13, 23)
        gram = mat @ mat.T
        np.testing.assert_allclose(gram, np.eye(13), atol=1e-12)

    def test_delta_matrix_zero_rowsum(self):
        mat = delta_matrix(9, 2)
        np.testing.assert_allclose(mat.sum(axis=1), 0.0, atol=1e-12)

    def test_wav_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        samples = quantize(rng.uniform(-1, 1, 2000))
        w = Waveform(samples, 16000, "utt0")
        path = tmp_path / "x.wav"
        write_wav(path, w)
        back = read_wav(path, "utt0")
        assert back.sample_rate == 16000
        np.testing.assert_array_equal(back.samples, samples)
