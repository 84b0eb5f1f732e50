import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatformant.dsp import FrameGeometry, features
from heatformant.synth import (
    COHORT_RANGES,
    MIN_GAP_HZ,
    SyntheticSpec,
    generate_corpus,
    impulse_train,
    resonator_coefficients,
    synthesize,
    vowel_category,
)

RAW = FrameGeometry(standardize=False)


def local_peak(column, target_bin, radius=4):
    lo = target_bin - radius
    return lo + int(np.argmax(column[lo : target_bin + radius + 1]))


@given(st.floats(100, 7000), st.floats(20, 400))
def test_resonator_poles_and_dc_gain(f, bw):
    b, a = resonator_coefficients(f, bw, 16000)
    poles = np.roots(a)
    np.testing.assert_allclose(np.abs(poles), np.exp(-np.pi * bw / 16000), rtol=1e-9)
    np.testing.assert_allclose(sorted(np.abs(np.angle(poles))), [2 * np.pi * f / 16000] * 2, rtol=1e-9)
    assert b.sum() / a.sum() == pytest.approx(1.0)


def test_impulse_train_period():
    x = impulse_train(100.0, 1000, 16000)
    assert np.flatnonzero(x).tolist() == list(range(0, 1000, 160))


@pytest.mark.parametrize("f0, tolerance_bins", [(100.0, 1), (120.0, 3)])
def test_spectral_peaks_at_formants(f0, tolerance_bins):
    # With f0 = 100 Hz a harmonic sits on every formant; otherwise the peak
    # lands on the nearest harmonic, up to f0/2 away.
    w, _ = synthesize(SyntheticSpec(f0, (500.0, 1500.0, 2500.0), (50.0, 70.0, 90.0), duration=0.3))
    s = features(w, RAW, pre_emphasis=0.0).values
    for f in (500.0, 1500.0, 2500.0):
        b = round(f / 31.25)
        peaks = [local_peak(s[:, t], b) for t in range(s.shape[1])]
        assert max(abs(p - b) for p in peaks) <= tolerance_bins


def test_ramp_track_is_exact():
    g = FrameGeometry()
    spec = SyntheticSpec(120.0, (400.0, 1500.0, 2500.0), duration=0.5, formants_end=(600.0, 1500.0, 2500.0))
    w, tr = synthesize(spec, geometry=g)
    t = (np.arange(tr.num_frames) * 160 + 256) / 16000
    np.testing.assert_allclose(tr.values[:, 0], 400 + 200 * t / 0.5, atol=1e-9)
    assert tr.num_frames == g.num_frames(len(w))


def test_ramp_moves_the_spectrum():
    spec = SyntheticSpec(100.0, (400.0, 1500.0, 2500.0), duration=0.5, formants_end=(700.0, 1500.0, 2500.0))
    w, _ = synthesize(spec)
    s = features(w, RAW, pre_emphasis=0.0).values
    first = 8 + np.argmax(s[8:28, 2])
    last = 8 + np.argmax(s[8:28, -3])
    assert last - first >= 6


@pytest.mark.parametrize(
    "kwargs",
    [
        {"formants": (1500.0, 500.0, 2500.0)},
        {"formants": (500.0, 1500.0, 9000.0)},
        {"bandwidths": (50.0, -1.0, 90.0)},
        {"f0": 0.0},
        {"duration": 0.0},
        {"cohort": "robots"},
        {"bandwidths": (50.0, 70.0)},
    ],
)
def test_invalid_specs(kwargs):
    base = dict(f0=120.0, formants=(500.0, 1500.0, 2500.0), bandwidths=(50.0, 70.0, 90.0))
    with pytest.raises(ValueError):
        synthesize(SyntheticSpec(**{**base, **kwargs}))


def test_output_is_normalised():
    w, _ = synthesize(SyntheticSpec(150.0, (600.0, 1200.0, 2600.0)))
    assert np.max(np.abs(w.samples)) == pytest.approx(0.9)


class TestCorpus:
    def test_deterministic(self):
        a = generate_corpus(4, seed=5, duration=0.1)
        b = generate_corpus(4, seed=5, duration=0.1)
        for x, y in zip(a, b):
            assert x.spec == y.spec and x.seed == y.seed
            np.testing.assert_array_equal(x.waveform.samples, y.waveform.samples)

    def test_prefix_stable(self):
        # Utterance i does not depend on how many were requested.
        a = generate_corpus(2, seed=5, duration=0.1)
        b = generate_corpus(5, seed=5, duration=0.1)
        assert [u.spec for u in a] == [u.spec for u in b[:2]]

    def test_seeds_differ(self):
        a = generate_corpus(3, seed=1, duration=0.1)
        b = generate_corpus(3, seed=2, duration=0.1)
        assert [u.spec for u in a] != [u.spec for u in b]

    def test_cohort_ranges(self):
        corpus = generate_corpus(40, cohort_mix=("children",), seed=0, duration=0.1, drift=False)
        for u in corpus:
            assert u.group == "children"
            r = COHORT_RANGES["children"]
            assert r["f0"][0] <= u.spec.f0 <= r["f0"][1]
            f1, f2, f3 = u.spec.formants
            assert r["f1"][0] <= f1 <= r["f1"][1]
            assert f2 - f1 >= MIN_GAP_HZ and f3 - f2 >= MIN_GAP_HZ
            u.track.check()

    def test_mix_weights(self):
        corpus = generate_corpus(30, cohort_mix={"men": 1.0, "women": 0.0}, seed=0, duration=0.1)
        assert {u.group for u in corpus} == {"men"}

    @pytest.mark.parametrize("mix", [("aliens",), {"men": 0.0}])
    def test_bad_mix(self, mix):
        with pytest.raises(ValueError):
            generate_corpus(2, cohort_mix=mix)

    def test_ids(self):
        assert [u.id for u in generate_corpus(2, duration=0.1, id_prefix="x")] == ["x00000", "x00001"]


@pytest.mark.parametrize(
    "f1, f2, label", [(300, 2200, "high-front"), (300, 900, "high-back"), (700, 1800, "low-front"), (700, 1100, "low-back")]
)
def test_vowel_category(f1, f2, label):
    assert vowel_category(f1, f2) == label
