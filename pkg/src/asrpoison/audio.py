"""Waveform handling and the differentiable MFCC feature pipeline.

The forward path is framing -> window -> DFT power spectrum -> Mel
filterbank -> log -> DCT-II -> delta/delta-delta augmentation.  Every stage
has a hand-written backward counterpart so that gradients of any scalar
loss on the feature matrix can be pushed all the way down to the raw
samples (needed by the poison-crafting optimizer, which perturbs audio,
not features).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

PCM_SCALE = 32768.0


@dataclass
class Waveform:
    """Mono audio signal with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform '{self.id}' must be mono (1-D), got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"waveform '{self.id}' contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def copy(self, id: str | None = None) -> "Waveform":
        return Waveform(self.samples.copy(), self.sample_rate, self.id if id is None else id)

    def clipped(self) -> "Waveform":
        """Explicitly clip amplitudes to [-1, 1] (never done implicitly)."""
        return Waveform(np.clip(self.samples, -1.0, 1.0), self.sample_rate, self.id)


@dataclass(frozen=True)
class FrameConfig:
    """Framing and feature-extraction settings (25 ms / 10 ms at 16 kHz)."""

    frame_length: int = 400
    hop_length: int = 160
    dft_size: int = 512
    n_mel: int = 23
    n_ceps: int = 13
    delta_window: int = 2
    window: str = "hann"
    log_floor: float = 1e-10

    def __post_init__(self):
        if not 0 < self.hop_length <= self.frame_length <= self.dft_size:
            raise ValueError(
                f"need 0 < hop ({self.hop_length}) <= frame ({self.frame_length}) <= dft ({self.dft_size})"
            )
        if self.n_ceps > self.n_mel:
            raise ValueError(f"n_ceps ({self.n_ceps}) must not exceed n_mel ({self.n_mel})")
        if self.delta_window < 1:
            raise ValueError("delta_window must be >= 1")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window '{self.window}'")

    @property
    def n_bins(self) -> int:
        return self.dft_size // 2 + 1

    @property
    def feature_dim(self) -> int:
        return 3 * self.n_ceps


@dataclass
class Spectrogram:
    """Time x frequency matrix of powers or magnitudes.

    ``power_reference`` is the power a full-scale sinusoid at a bin centre
    would produce under the analysis window; it anchors the dB scale used
    by the hearing-threshold model.
    """

    values: np.ndarray
    frame_times: np.ndarray
    kind: str = "power"
    sample_rate: int = 16000
    dft_size: int = 512
    power_reference: float = 1.0

    def __post_init__(self):
        if self.kind not in ("power", "magnitude"):
            raise ValueError(f"unknown spectrogram kind '{self.kind}'")
        if np.any(self.values < 0):
            raise ValueError(f"{self.kind} spectrogram must be nonnegative")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def n_frames(n_samples: int, cfg: FrameConfig) -> int:
    """Number of complete frames: floor((len - frame) / hop) + 1."""
    if n_samples < cfg.frame_length:
        raise ValueError(
            f"signal of {n_samples} samples is shorter than one frame ({cfg.frame_length})"
        )
    return (n_samples - cfg.frame_length) // cfg.hop_length + 1


def frame_signal(w: Waveform, cfg: FrameConfig) -> np.ndarray:
    """Slice a waveform into overlapping frames, frame i = samples [i*hop, i*hop+frame)."""
    count = n_frames(len(w), cfg)
    idx = np.arange(cfg.frame_length)[None, :] + cfg.hop_length * np.arange(count)[:, None]
    return w.samples[idx]


def window_vector(cfg: FrameConfig) -> np.ndarray:
    if cfg.window == "hann":
        # periodic Hann, part of the differentiable path
        n = np.arange(cfg.frame_length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.frame_length)
    return np.ones(cfg.frame_length)


def power_spectrum(frames: np.ndarray, cfg: FrameConfig, sample_rate: int = 16000) -> Spectrogram:
    """Windowed |DFT|^2 of each frame over dft_size/2 + 1 bins."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] == 0:
        raise ValueError("no frames given")
    win = window_vector(cfg)
    spectrum = np.fft.rfft(frames * win, n=cfg.dft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    times = cfg.hop_length * np.arange(frames.shape[0])
    ref = (win.sum() / 2.0) ** 2
    return Spectrogram(power, times, "power", sample_rate, cfg.dft_size, ref)


def magnitude_spectrogram(w: Waveform, cfg: FrameConfig) -> Spectrogram:
    spec = power_spectrum(frame_signal(w, cfg), cfg, w.sample_rate)
    return Spectrogram(
        np.sqrt(spec.values), spec.frame_times, "magnitude",
        spec.sample_rate, spec.dft_size, spec.power_reference,
    )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrameConfig, sample_rate: int) -> np.ndarray:
    """Triangular Mel-spaced filters evaluated at the DFT bin frequencies, (n_mel, n_bins)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), cfg.n_mel + 2))
    bin_freqs = np.arange(cfg.n_bins) * sample_rate / cfg.dft_size
    fb = np.zeros((cfg.n_mel, cfg.n_bins))
    for j in range(cfg.n_mel):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def dct_matrix(n_ceps: int, n_mel: int) -> np.ndarray:
    """Orthonormal DCT-II, first n_ceps rows, (n_ceps, n_mel)."""
    k = np.arange(n_ceps)[:, None]
    n = np.arange(n_mel)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * n_mel)) * np.sqrt(2.0 / n_mel)
    mat[0] /= np.sqrt(2.0)
    return mat


def delta_matrix(n_rows: int, window: int) -> np.ndarray:
    """Linear operator computing regression deltas over time with edge replication."""
    denom = 2.0 * sum(n * n for n in range(1, window + 1))
    mat = np.zeros((n_rows, n_rows))
    for t in range(n_rows):
        for n in range(1, window + 1):
            mat[t, min(t + n, n_rows - 1)] += n / denom
            mat[t, max(t - n, 0)] -= n / denom
    return mat


class FeatureCache:
    """All intermediates of one feature-extraction forward pass."""

    __slots__ = (
        "cfg", "sample_rate", "n_samples", "frames", "window", "spectrum",
        "power", "mel_fb", "mel_energy", "log_energy", "dct", "static",
        "delta_op", "features",
    )

    def __init__(self, cfg, sample_rate, n_samples, frames, window, spectrum, power,
                 mel_fb, mel_energy, log_energy, dct, static, delta_op, features):
        self.cfg = cfg
        self.sample_rate = sample_rate
        self.n_samples = n_samples
        self.frames = frames
        self.window = window
        self.spectrum = spectrum
        self.power = power
        self.mel_fb = mel_fb
        self.mel_energy = mel_energy
        self.log_energy = log_energy
        self.dct = dct
        self.static = static
        self.delta_op = delta_op
        self.features = features


def feature_forward(w: Waveform, cfg: FrameConfig) -> FeatureCache:
    """Run the full feature pipeline, keeping every intermediate for the backward pass."""
    frames = frame_signal(w, cfg)
    win = window_vector(cfg)
    spectrum = np.fft.rfft(frames * win, n=cfg.dft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel_fb = mel_filterbank(cfg, w.sample_rate)
    mel_energy = power @ mel_fb.T
    log_energy = np.log(np.maximum(cfg.log_floor, mel_energy))
    dct = dct_matrix(cfg.n_ceps, cfg.n_mel)
    static = log_energy @ dct.T
    delta_op = delta_matrix(frames.shape[0], cfg.delta_window)
    d1 = delta_op @ static
    d2 = delta_op @ d1
    features = np.concatenate([static, d1, d2], axis=1)
    return FeatureCache(cfg, w.sample_rate, len(w), frames, win, spectrum, power,
                        mel_fb, mel_energy, log_energy, dct, static, delta_op, features)


def extract_features(w: Waveform, cfg: FrameConfig) -> np.ndarray:
    """MFCC + delta + delta-delta matrix, one row per frame, width 3*n_ceps."""
    return feature_forward(w, cfg).features


def feature_backward(cache: FeatureCache, upstream: np.ndarray,
                     spectral_scale: np.ndarray | None = None) -> np.ndarray:
    """Chain rule from a gradient over the feature matrix down to the samples.

    ``spectral_scale`` (time x bins, entries in [0, 1]) is applied to the
    complex-spectrum gradient, i.e. between the DFT and the magnitude step
    of the backward graph; this is the injection point for psychoacoustic
    gradient shaping.
    """
    cfg = cache.cfg
    upstream = np.asarray(upstream, dtype=np.float64)
    n_frm = cache.frames.shape[0]
    if upstream.shape != (n_frm, cfg.feature_dim):
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match features ({n_frm}, {cfg.feature_dim})"
        )
    nc = cfg.n_ceps
    d_static = upstream[:, :nc].copy()
    d_d1 = upstream[:, nc:2 * nc].copy()
    d_d2 = upstream[:, 2 * nc:]
    # deltas: d1 = A @ static, d2 = A @ d1
    d_d1 += cache.delta_op.T @ d_d2
    d_static += cache.delta_op.T @ d_d1
    d_log = d_static @ cache.dct
    # log(max(floor, e)): zero slope inside the floor
    d_mel = np.where(cache.mel_energy > cfg.log_floor,
                     d_log / np.maximum(cache.mel_energy, cfg.log_floor), 0.0)
    d_power = d_mel @ cache.mel_fb
    d_spectrum = 2.0 * d_power * cache.spectrum
    if spectral_scale is not None:
        scale = np.asarray(spectral_scale, dtype=np.float64)
        if scale.shape != d_spectrum.shape:
            raise ValueError(f"spectral scale shape {scale.shape} != spectrum {d_spectrum.shape}")
        d_spectrum = d_spectrum * scale
    # adjoint of the half-spectrum rfft: g_n = Re(sum_k dC_k e^{+2pi i k n / N})
    full = np.zeros((n_frm, cfg.dft_size), dtype=np.complex128)
    full[:, :cfg.n_bins] = d_spectrum
    d_windowed = np.real(np.fft.ifft(full, axis=1)) * cfg.dft_size
    d_frames = d_windowed[:, :cfg.frame_length] * cache.window
    grad = np.zeros(cache.n_samples)
    for i in range(n_frm):
        start = i * cfg.hop_length
        grad[start:start + cfg.frame_length] += d_frames[i]
    return grad


def feature_gradient_to_waveform(w: Waveform, cfg: FrameConfig, upstream: np.ndarray,
                                 spectral_scale: np.ndarray | None = None) -> np.ndarray:
    """Gradient of a feature-space loss with respect to the waveform samples."""
    return feature_backward(feature_forward(w, cfg), upstream, spectral_scale)


def quantize(samples: np.ndarray) -> np.ndarray:
    """Snap samples onto the 16-bit PCM grid (k / 32768) used by WAV round-trips."""
    ints = np.clip(np.round(np.asarray(samples) * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1)
    return ints / PCM_SCALE


def write_wav(path, w: Waveform) -> None:
    """Write PCM 16-bit little-endian mono; samples scaled by 32768."""
    ints = np.clip(np.round(w.samples * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, ints)


def read_wav(path, id: str = "") -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    return Waveform(data.astype(np.float64) / PCM_SCALE, int(rate), id)
