"""Waveform handling and spectrogram front end.

Canonical signal parameters: 16 kHz mono audio, pre-emphasis 1 - 0.97 z^-1,
512-point FFT (257 bins of 31.25 Hz), 512-sample Hann window, 10 ms hop.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

CANONICAL_SAMPLE_RATE = 16_000


class AudioFormatError(ValueError):
    """Raised for audio that is not 16-bit PCM mono at the expected rate."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = CANONICAL_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional (mono)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrameGeometry:
    """STFT framing plus the magnitude-scale knobs that the model input depends on."""

    fft_size: int = 512
    hop: int = 160
    window_length: int = 512
    window: str = "hann"
    floor_epsilon: float = 1e-10
    standardize: bool = True

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size % 2:
            raise ValueError("fft_size must be a positive even number")
        if not 0 < self.hop <= self.window_length <= self.fft_size:
            raise ValueError("require 0 < hop <= window_length <= fft_size")
        if self.floor_epsilon <= 0:
            raise ValueError("floor_epsilon must be positive")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        """Frame count for a signal of `num_samples`; 0 when shorter than one window."""
        if num_samples < self.window_length:
            return 0
        return 1 + (num_samples - self.window_length) // self.hop

    def frame_time(self, frame: int | np.ndarray, sample_rate: int) -> float | np.ndarray:
        """Start time of a frame in seconds (the time stamp used in track exports)."""
        return frame * self.hop / sample_rate

    def frame_center(self, frame: int | np.ndarray, sample_rate: int) -> float | np.ndarray:
        return (frame * self.hop + self.window_length / 2) / sample_rate


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (D, T)
    geometry: FrameGeometry = field(default_factory=FrameGeometry)
    source_sample_rate: int = CANONICAL_SAMPLE_RATE

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] != self.geometry.num_bins:
            raise ValueError(
                f"spectrogram must be ({self.geometry.num_bins}, T), got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def pre_emphasize(w: Waveform, coefficient: float = 0.97) -> Waveform:
    """y[0] = x[0], y[t] = x[t] - c * x[t-1]."""
    if not 0.0 <= coefficient < 1.0:
        raise ValueError("pre-emphasis coefficient must lie in [0, 1)")
    x = w.samples
    if x.size == 0:
        raise ValueError("empty input")
    y = x.copy()
    y[1:] -= coefficient * x[:-1]
    return Waveform(y, w.sample_rate)


def frame_signal(samples: np.ndarray, g: FrameGeometry) -> np.ndarray:
    """Return a read-only (T, window_length) view of overlapping frames."""
    n_frames = g.num_frames(len(samples))
    if n_frames == 0:
        raise ValueError("utterance too short")
    samples = np.ascontiguousarray(samples)
    stride = samples.strides[0]
    return np.lib.stride_tricks.as_strided(
        samples,
        shape=(n_frames, g.window_length),
        strides=(stride * g.hop, stride),
        writeable=False,
    )


def analysis_window(g: FrameGeometry) -> np.ndarray:
    return get_window(g.window, g.window_length, fftbins=True)


def spectrogram(w: Waveform, g: FrameGeometry = FrameGeometry()) -> Spectrogram:
    """Log-magnitude STFT, shape (fft_size/2 + 1, T).

    Entry (d, t) is log(|FFT_d(window * frame_t)| + floor_epsilon); when
    ``g.standardize`` is set the whole matrix is then shifted to zero mean
    and scaled to unit variance (a constant matrix is only centred).
    """
    frames = frame_signal(w.samples, g) * analysis_window(g)
    mag = np.abs(np.fft.rfft(frames, n=g.fft_size, axis=1)).T
    values = np.log(mag + g.floor_epsilon)
    if g.standardize:
        values = values - values.mean()
        std = values.std()
        if std > 0:
            values = values / std
    return Spectrogram(values, g, w.sample_rate)


def features(w: Waveform, g: FrameGeometry = FrameGeometry(), pre_emphasis: float = 0.97) -> Spectrogram:
    """The full model front end: pre-emphasis followed by the spectrogram."""
    return spectrogram(pre_emphasize(w, pre_emphasis), g)


def speed_up_by_two(w: Waveform) -> Waveform:
    """Keep every second sample without low-pass filtering.

    The sample rate is left unchanged, so every frequency component appears
    at twice its original value and the duration halves.
    """
    if len(w) < 2:
        raise ValueError("speed-up needs at least two samples")
    return Waveform(w.samples[::2].copy(), w.sample_rate)


def read_wav(path: str | Path, expected_rate: int | None = CANONICAL_SAMPLE_RATE) -> Waveform:
    """Read a 16-bit PCM mono RIFF/WAVE file into [-1, 1) floats."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a PCM WAVE file ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise AudioFormatError(
            f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resampling is not supported)"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def wav_num_samples(path: str | Path) -> int:
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes()


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
