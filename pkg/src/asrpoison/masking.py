"""Hearing-threshold estimation and psychoacoustic gradient shaping.

The threshold model is a deliberately small stand-in for MPEG-1 Model 1:
per time-frequency bin it takes the maximum of the absolute threshold in
quiet and a tonal-masking term, where every bin acts as a masker whose
influence decays triangularly on the Bark scale.  The dB scale is anchored
so that a full-scale sinusoid maps to SPL_FULL_SCALE; externally computed
threshold matrices can be substituted through the plain-text matrix files.
"""

from __future__ import annotations

import numpy as np

from .audio import Spectrogram

SPL_FULL_SCALE = 96.0     # dB SPL assigned to a full-scale sinusoid
MASKING_OFFSET_DB = 14.0  # level drop from a masker to the threshold it induces
SLOPE_BELOW_DB_PER_BARK = 27.0  # decay toward frequencies below the masker
SLOPE_ABOVE_DB_PER_BARK = 10.0  # decay toward frequencies above the masker
LEVEL_FLOOR_DB = -200.0


def bark_scale(freq_hz: np.ndarray) -> np.ndarray:
    f = np.asarray(freq_hz, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def threshold_in_quiet(freq_hz: np.ndarray) -> np.ndarray:
    """Analytic absolute-threshold approximation, dB SPL."""
    f = np.maximum(np.asarray(freq_hz, dtype=np.float64), 20.0) / 1000.0
    tq = (3.64 * f**-0.8
          - 6.5 * np.exp(-0.6 * (f - 3.3) ** 2)
          + 1e-3 * f**4)
    return np.minimum(tq, SPL_FULL_SCALE)


def hearing_thresholds(original: Spectrogram) -> np.ndarray:
    """Masking thresholds H (dB, full-scale-referenced), one row per frame."""
    if original.kind != "power":
        raise ValueError("hearing thresholds require a power-mode spectrogram")
    power = original.values
    n_frames, n_bins = power.shape
    freqs = np.arange(n_bins) * original.sample_rate / original.dft_size
    quiet = threshold_in_quiet(freqs) - SPL_FULL_SCALE

    bark = bark_scale(freqs)
    diff = bark[None, :] - bark[:, None]  # (masker, target)
    spread = np.where(diff >= 0.0,
                      SLOPE_ABOVE_DB_PER_BARK * diff,
                      SLOPE_BELOW_DB_PER_BARK * -diff)

    with np.errstate(divide="ignore"):
        levels = 10.0 * np.log10(power / original.power_reference)
    levels = np.maximum(levels, LEVEL_FLOOR_DB)

    h = np.empty_like(power)
    for t in range(n_frames):
        masked = np.max(levels[t][:, None] - MASKING_OFFSET_DB - spread, axis=0)
        h[t] = np.maximum(quiet, masked)
    return h


def perturbation_level(original: Spectrogram, poison: Spectrogram) -> np.ndarray:
    """D = 20 log10(|poison - original| / max|original|) on magnitude spectrograms."""
    if original.kind != "magnitude" or poison.kind != "magnitude":
        raise ValueError("perturbation level expects magnitude-mode spectrograms")
    if original.values.shape != poison.values.shape:
        raise ValueError("spectrogram shapes differ")
    return level_db(np.abs(poison.values - original.values), float(np.max(original.values)))


def level_db(diff_magnitude: np.ndarray, original_peak: float) -> np.ndarray:
    """dB level of a magnitude matrix relative to a peak; zeros floor at -200 dB."""
    if original_peak <= 0.0:
        raise ValueError("all-zero original spectrum: level reference undefined")
    with np.errstate(divide="ignore"):
        d = 20.0 * np.log10(diff_magnitude / original_peak)
    return np.maximum(d, LEVEL_FLOOR_DB)


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        # degenerate normalization: constant matrices pass through as all
        # ones, except that exact zeros must stay zero
        return np.where(values != 0.0, 1.0, 0.0)
    return (values - lo) / (hi - lo)


def gradient_scale(d: np.ndarray, h: np.ndarray, margin_db: float) -> np.ndarray:
    """Multiplicative spectral factors in [0, 1] from perturbation level and thresholds.

    Headroom below threshold-plus-margin is clipped at zero, min-max
    normalized, and multiplied by the normalized thresholds; bins already
    past the margin therefore contribute no gradient.
    """
    d = np.asarray(d, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if d.shape != h.shape:
        raise ValueError(f"shape mismatch: D {d.shape} vs H {h.shape}")
    headroom = np.where(h + margin_db >= d, h + margin_db - d, 0.0)
    return _minmax(headroom) * _minmax(h)


def apply_scale(spectral_gradient: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Scale a complex-spectrum gradient elementwise (the DFT-to-magnitude hook)."""
    grad = np.asarray(spectral_gradient)
    scale = np.asarray(scale, dtype=np.float64)
    if grad.shape != scale.shape:
        raise ValueError(f"gradient shape {grad.shape} != scale shape {scale.shape}")
    return grad * scale


def save_matrix(path, matrix: np.ndarray) -> None:
    """Row-major text matrix with a 'rows cols' header line."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        rows, cols = (int(v) for v in fh.readline().split())
        data = np.array([[float(v) for v in fh.readline().split()] for _ in range(rows)])
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {(rows, cols)}, data is {data.shape}")
    return data
