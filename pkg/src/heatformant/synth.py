"""Source-filter vowel synthesis with exact ground-truth formants.

An impulse train at f0 drives a cascade of second-order resonators. Formant
ranges per cohort below are illustrative priors (men < women < children),
not measured data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .dsp import CANONICAL_SAMPLE_RATE, FrameGeometry, Waveform
from .quantizer import FormantTrack

COHORTS = ("men", "women", "children")

# Uniform sampling ranges in Hz: F1, F2, F3 and f0.
COHORT_RANGES = {
    "men": {"f1": (250.0, 700.0), "f2": (850.0, 2300.0), "f3": (2200.0, 3000.0), "f0": (90.0, 150.0)},
    "women": {"f1": (300.0, 850.0), "f2": (950.0, 2800.0), "f3": (2500.0, 3400.0), "f0": (160.0, 240.0)},
    "children": {"f1": (350.0, 1000.0), "f2": (1050.0, 3300.0), "f3": (2800.0, 3900.0), "f0": (200.0, 300.0)},
}
MIN_GAP_HZ = 150.0
DEFAULT_BANDWIDTHS = (50.0, 70.0, 90.0)
BANDWIDTH_JITTER_HZ = 20.0
# Block size for time-varying resonator updates (1 ms at 16 kHz).
_BLOCK = 16


@dataclass(frozen=True)
class SyntheticSpec:
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS
    duration: float = 0.25
    # Formant values at the end of the utterance; linear ramp from `formants`.
    formants_end: tuple[float, ...] | None = None
    cohort: str = "men"
    phase: float = 0.0  # offset of the first glottal pulse, in periods

    def validate(self, sample_rate: int) -> None:
        nyquist = sample_rate / 2
        ends = [self.formants] if self.formants_end is None else [self.formants, self.formants_end]
        for fs in ends:
            if len(fs) != len(self.bandwidths):
                raise ValueError("need one bandwidth per formant")
            if any(b <= a for a, b in zip(fs, fs[1:])):
                raise ValueError("formants must be strictly increasing")
            if any(f <= 0 or f >= nyquist for f in fs):
                raise ValueError("formant must lie in (0, Nyquist)")
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be positive")
        if not 0 < self.f0 < nyquist:
            raise ValueError("f0 must lie in (0, Nyquist)")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.cohort not in COHORTS:
            raise ValueError(f"unknown cohort {self.cohort!r}")


@dataclass
class SyntheticUtterance:
    id: str
    spec: SyntheticSpec
    waveform: Waveform
    track: FormantTrack
    seed: int
    group: str = field(init=False)

    def __post_init__(self):
        self.group = self.spec.cohort

    def with_waveform(self, w: Waveform, track: FormantTrack | None = None) -> "SyntheticUtterance":
        return SyntheticUtterance(self.id, self.spec, w, self.track if track is None else track, self.seed)


def resonator_coefficients(freq: float, bandwidth: float, sample_rate: int):
    """(b, a) of a unity-DC-gain two-pole resonator.

    Poles sit at radius exp(-pi * bw / fs) and angle 2 pi f / fs.
    """
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2 * np.pi * freq / sample_rate
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    assert r < 1.0
    return np.array([a.sum()]), a


def impulse_train(f0: float, num_samples: int, sample_rate: int, phase: float = 0.0) -> np.ndarray:
    period = sample_rate / f0
    pulses = np.arange(phase * period, num_samples, period)
    x = np.zeros(num_samples)
    x[np.minimum(np.round(pulses).astype(int), num_samples - 1)] = 1.0
    return x


def formant_trajectory(spec: SyntheticSpec, times: np.ndarray) -> np.ndarray:
    """Formant values (len(times), K) at the given times in seconds."""
    start = np.asarray(spec.formants, dtype=np.float64)
    end = start if spec.formants_end is None else np.asarray(spec.formants_end, dtype=np.float64)
    frac = np.clip(np.asarray(times) / spec.duration, 0.0, 1.0)[:, None]
    return start + frac * (end - start)


def synthesize(
    spec: SyntheticSpec,
    sample_rate: int = CANONICAL_SAMPLE_RATE,
    geometry: FrameGeometry = FrameGeometry(),
) -> tuple[Waveform, FormantTrack]:
    """Render `spec` and return the waveform with its per-frame ground truth.

    The track holds the formant values at each analysis frame's centre.
    Static vowels are filtered in one pass; ramps update the resonator
    coefficients every 1 ms while carrying the filter state across blocks.
    """
    spec.validate(sample_rate)
    n = int(round(spec.duration * sample_rate))
    x = impulse_train(spec.f0, n, sample_rate, spec.phase)

    if spec.formants_end is None:
        y = x
        for f, bw in zip(spec.formants, spec.bandwidths):
            b, a = resonator_coefficients(f, bw, sample_rate)
            y = lfilter(b, a, y)
    else:
        starts = np.arange(0, n, _BLOCK)
        centres = (starts + np.minimum(_BLOCK, n - starts) / 2) / sample_rate
        traj = formant_trajectory(spec, centres)
        y = x.copy()
        for k, bw in enumerate(spec.bandwidths):
            out = np.empty(n)
            zi = np.zeros(2)
            for i, s in enumerate(starts):
                b, a = resonator_coefficients(traj[i, k], bw, sample_rate)
                out[s : s + _BLOCK], zi = lfilter(b, a, y[s : s + _BLOCK], zi=zi)
            y = out

    peak = np.max(np.abs(y))
    if peak > 0:
        y = 0.9 * y / peak
    w = Waveform(y, sample_rate)

    n_frames = geometry.num_frames(n)
    centres = geometry.frame_center(np.arange(n_frames), sample_rate)
    values = formant_trajectory(spec, centres)
    return w, FormantTrack(values, np.ones(values.shape, dtype=bool))


def sample_formants(rng: np.random.Generator, cohort: str) -> tuple[float, float, float]:
    """Draw (F1, F2, F3) from the cohort ranges with at least MIN_GAP_HZ between neighbours."""
    ranges = COHORT_RANGES[cohort]
    f1 = rng.uniform(*ranges["f1"])
    lo2, hi2 = ranges["f2"]
    f2 = rng.uniform(max(lo2, f1 + MIN_GAP_HZ), max(hi2, f1 + MIN_GAP_HZ))
    lo3, hi3 = ranges["f3"]
    f3 = rng.uniform(max(lo3, f2 + MIN_GAP_HZ), max(hi3, f2 + MIN_GAP_HZ))
    return f1, f2, f3


def random_spec(rng: np.random.Generator, cohort: str, duration: float = 0.25, drift: bool = True) -> SyntheticSpec:
    start = sample_formants(rng, cohort)
    end = sample_formants(rng, cohort) if drift and rng.random() < 0.5 else None
    if end is not None:
        # Keep the drift modest: move a third of the way toward a second target.
        end = tuple(s + (e - s) / 3 for s, e in zip(start, end))
    bws = tuple(b + rng.uniform(-BANDWIDTH_JITTER_HZ, BANDWIDTH_JITTER_HZ) for b in DEFAULT_BANDWIDTHS)
    return SyntheticSpec(
        f0=rng.uniform(*COHORT_RANGES[cohort]["f0"]),
        formants=start,
        bandwidths=bws,
        duration=duration,
        formants_end=end,
        cohort=cohort,
        phase=rng.random(),
    )


def vowel_category(f1: float, f2: float) -> str:
    """Coarse vowel-space quadrant used as the vowel label of synthetic items."""
    height = "high" if f1 < 500.0 else "low"
    backness = "front" if f2 >= 1500.0 else "back"
    return f"{height}-{backness}"


def _normalize_mix(cohort_mix) -> dict[str, float]:
    if isinstance(cohort_mix, str):
        cohort_mix = [cohort_mix]
    if not isinstance(cohort_mix, dict):
        cohort_mix = {c: 1.0 for c in cohort_mix}
    unknown = set(cohort_mix) - set(COHORTS)
    if unknown:
        raise ValueError(f"unknown cohorts: {sorted(unknown)}")
    total = sum(cohort_mix.values())
    if total <= 0:
        raise ValueError("cohort weights must sum to a positive number")
    return {c: w / total for c, w in cohort_mix.items() if w > 0}


def generate_corpus(
    n: int,
    cohort_mix=("men", "women"),
    seed: int = 0,
    duration: float = 0.25,
    sample_rate: int = CANONICAL_SAMPLE_RATE,
    geometry: FrameGeometry = FrameGeometry(),
    drift: bool = True,
    id_prefix: str = "syn",
) -> list[SyntheticUtterance]:
    """Generate `n` annotated synthetic vowels.

    Utterance i uses its own child seed derived from (seed, i), so any
    utterance can be regenerated independently of the others.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    mix = _normalize_mix(cohort_mix)
    names = sorted(mix)
    probs = np.array([mix[c] for c in names])
    children = np.random.SeedSequence(seed).spawn(n)
    corpus = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        cohort = names[int(rng.choice(len(names), p=probs))]
        spec = random_spec(rng, cohort, duration, drift)
        w, track = synthesize(spec, sample_rate, geometry)
        utt_seed = int(ss.generate_state(1)[0])
        corpus.append(SyntheticUtterance(f"{id_prefix}{i:05d}", spec, w, track, utt_seed))
    return corpus
