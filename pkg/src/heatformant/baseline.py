"""Classical LPC formant estimator (autocorrelation method + root picking)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import FrameGeometry, Waveform, analysis_window, frame_signal, pre_emphasize
from .quantizer import FormantTrack


class SilentFrameError(ValueError):
    pass


@dataclass(frozen=True)
class LPCConfig:
    order: int = 12
    num_formants: int = 3
    min_freq: float = 90.0
    max_bandwidth: float = 400.0
    pre_emphasis: float = 0.0  # the synthetic source is spectrally flat; use 0.97 for natural speech
    # Frames whose mean-square energy falls below this are treated as silent.
    silence_energy: float = 1e-10


def autocorrelation(frame: np.ndarray, max_lag: int) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    n = len(x)
    full = np.correlate(x, x, mode="full")[n - 1 :]
    if len(full) < max_lag + 1:
        full = np.concatenate([full, np.zeros(max_lag + 1 - len(full))])
    return full[: max_lag + 1]


def levinson_durbin(r: np.ndarray, order: int):
    """Solve the Toeplitz normal equations for prediction coefficients.

    Returns ``(a, k, err)``: ``a[i-1]`` weights x[n-i] in the prediction
    x_hat[n] = sum_i a_i x[n-i], ``k`` the reflection coefficients and
    ``err`` the final prediction-error power.
    """
    r = np.asarray(r, dtype=np.float64)
    if r[0] <= 0:
        raise SilentFrameError("silent frame")
    a = np.zeros(order)
    k = np.zeros(order)
    err = r[0]
    for i in range(order):
        acc = r[i + 1] - np.dot(a[:i], r[i:0:-1])
        ki = acc / err
        k[i] = ki
        prev = a[:i].copy()
        a[:i] = prev - ki * prev[::-1]
        a[i] = ki
        err *= 1.0 - ki * ki
        if err <= 0:
            # Perfectly predictable input; higher orders add nothing.
            break
    return a, k, err


def lpc_coefficients(frame: np.ndarray, order: int = 12) -> np.ndarray:
    """Prediction coefficients a_1..a_p of a (windowed) frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if order >= len(frame):
        raise ValueError("order must be smaller than the frame length")
    r = autocorrelation(frame, order)
    if r[0] <= 0:
        raise SilentFrameError("silent frame")
    return levinson_durbin(r, order)[0]


def formants_from_lpc(coeffs, sample_rate: int, k: int = 3, min_freq: float = 90.0, max_bandwidth: float = 400.0):
    """Pick formant candidates from the roots of A(z) = 1 - sum a_i z^-i.

    Returns ``(freqs, bandwidths, valid)``, each of length `k`, ascending in
    frequency. Slots without a surviving candidate are NaN / False.
    """
    poly = np.concatenate([[1.0], -np.asarray(coeffs, dtype=np.float64)])
    roots = np.roots(poly)
    roots = roots[np.imag(roots) > 0]
    freqs = np.angle(roots) * sample_rate / (2 * np.pi)
    with np.errstate(divide="ignore"):
        bws = -np.log(np.abs(roots)) * sample_rate / np.pi
    keep = (freqs >= min_freq) & (bws <= max_bandwidth) & (freqs < sample_rate / 2)
    freqs, bws = freqs[keep], bws[keep]
    order = np.argsort(freqs)[:k]
    out_f = np.full(k, np.nan)
    out_b = np.full(k, np.nan)
    out_f[: len(order)] = freqs[order]
    out_b[: len(order)] = bws[order]
    return out_f, out_b, np.isfinite(out_f)


def lpc_track(w: Waveform, geometry: FrameGeometry = FrameGeometry(), cfg: LPCConfig = LPCConfig()) -> FormantTrack:
    """Per-frame LPC formants on the same frame grid as the spectrogram."""
    x = pre_emphasize(w, cfg.pre_emphasis).samples if cfg.pre_emphasis > 0 else w.samples
    frames = frame_signal(x, geometry) * analysis_window(geometry)
    values = np.full((len(frames), cfg.num_formants), np.nan)
    valid = np.zeros(values.shape, dtype=bool)
    for t, frame in enumerate(frames):
        if np.mean(frame**2) < cfg.silence_energy:
            continue
        a = lpc_coefficients(frame, cfg.order)
        f, _, ok = formants_from_lpc(a, w.sample_rate, cfg.num_formants, cfg.min_freq, cfg.max_bandwidth)
        values[t], valid[t] = f, ok
    return FormantTrack(values, valid)
