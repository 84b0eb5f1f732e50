"""Frequency <-> bin mapping and smoothed classification targets.

Bin ``b`` covers [(b - 0.5) * width, (b + 0.5) * width) so heatmap rows line
up one-to-one with FFT bin centres of the spectrogram.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BinSpec:
    bin_width: float = 31.25
    num_bins: int = 257
    max_hz: float = 8000.0

    def __post_init__(self):
        if self.bin_width <= 0 or self.num_bins <= 0:
            raise ValueError("bin_width and num_bins must be positive")
        if self.num_bins * self.bin_width < self.max_hz:
            raise ValueError("bins do not cover max_hz")

    @classmethod
    def from_geometry(cls, sample_rate: int, fft_size: int) -> "BinSpec":
        return cls(sample_rate / fft_size, fft_size // 2 + 1, sample_rate / 2)


@dataclass(frozen=True)
class FormantTrack:
    """Per-frame formant frequencies in Hz, shape (T, K), with a validity mask.

    Invalid entries are stored as NaN so that two tracks compare equal
    whenever their annotated content does.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, ndmin=2)
        valid = np.array(self.valid, dtype=bool, ndmin=2)
        if values.ndim != 2 or values.shape != valid.shape:
            raise ValueError(f"values {values.shape} and valid {valid.shape} must be equal (T, K)")
        valid &= np.isfinite(values)
        values[~valid] = np.nan
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_formants(self) -> int:
        return self.values.shape[1]

    def check(self, max_hz: float = 8000.0) -> None:
        """Raise ValueError if the annotation breaks range or ordering rules."""
        v = self.values[self.valid]
        if np.any(v <= 0) or np.any(v > max_hz):
            raise ValueError("formant values must satisfy 0 < F <= max_hz")
        full = self.valid.all(axis=1)
        if full.any() and np.any(np.diff(self.values[full], axis=1) <= 0):
            raise ValueError("formants must be strictly increasing where all are annotated")

    def __eq__(self, other):
        if not isinstance(other, FormantTrack):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    @classmethod
    def empty(cls, num_frames: int, num_formants: int = 3) -> "FormantTrack":
        return cls(np.full((num_frames, num_formants), np.nan), np.zeros((num_frames, num_formants), bool))


@dataclass(frozen=True)
class TargetHeatmapSet:
    targets: np.ndarray  # (K, D, T), columns sum to 1 where included
    include: np.ndarray  # (K, T) bool; False columns are excluded from the loss
    smoothing_epsilon: float


def quantize(f, spec: BinSpec = BinSpec()):
    """Nearest bin index (ties round up), clamped to [0, num_bins - 1].

    Accepts scalars or arrays; raises ValueError for f outside [0, max_hz].
    """
    arr = np.asarray(f, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > spec.max_hz):
        raise ValueError("frequency out of range")
    bins = np.clip(np.floor(arr / spec.bin_width + 0.5), 0, spec.num_bins - 1).astype(np.int64)
    return int(bins) if bins.ndim == 0 else bins


def dequantize(b, spec: BinSpec = BinSpec()):
    """Centre frequency of bin ``b`` (b * bin_width)."""
    arr = np.asarray(b)
    if not np.issubdtype(arr.dtype, np.integer):
        if np.any(arr != np.floor(arr)):
            raise ValueError("bin index must be integral")
        arr = arr.astype(np.int64)
    if np.any(arr < 0) or np.any(arr >= spec.num_bins):
        raise ValueError("bin index out of range")
    hz = arr * spec.bin_width
    return float(hz) if np.ndim(hz) == 0 else hz.astype(np.float64)


def track_bins(track: FormantTrack, spec: BinSpec = BinSpec()) -> np.ndarray:
    """(T, K) bin indices, -1 where the label is invalid or out of range."""
    bins = np.full(track.values.shape, -1, dtype=np.int64)
    ok = track.valid & (track.values <= spec.max_hz) & (track.values >= 0)
    if ok.any():
        bins[ok] = quantize(track.values[ok], spec)
    return bins


def make_targets(track: FormantTrack, spec: BinSpec = BinSpec(), epsilon: float = 0.1) -> TargetHeatmapSet:
    """Label-smoothed one-hot columns: (1 - eps) on the label bin plus eps / D everywhere."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("smoothing epsilon must lie in [0, 1)")
    bins = track_bins(track, spec)  # (T, K)
    T, K = bins.shape
    D = spec.num_bins
    include = (bins >= 0).T
    targets = np.zeros((K, D, T))
    targets[:, :, :] = np.where(include[:, None, :], epsilon / D, 0.0)
    k_idx, t_idx = np.nonzero(include)
    targets[k_idx, bins[t_idx, k_idx], t_idx] += 1.0 - epsilon
    return TargetHeatmapSet(targets, include, epsilon)
