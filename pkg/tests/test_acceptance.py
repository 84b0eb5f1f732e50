"""Acceptance criteria, each at its stated tolerance.

Every test prints one PASS/FAIL line (also collected in the terminal summary
under "acceptance criteria"). The two training criteria share four desk-scale
runs: speed-up augmentation on/off x seeds 0/1; the end-to-end criterion is
judged on the augmented seed-0 run.
"""
import time

import numpy as np
import pytest
import torch
from conftest import criterion

from heatformant.baseline import lpc_track
from heatformant.dsp import FrameGeometry, features, speed_up_by_two
from heatformant.evaluate import PhoneSegmentation, estimation_error, hillenbrand_gold, tracking_mae, transition_mae
from heatformant.inference import track
from heatformant.model import DecoderConfig, EncoderConfig, FormantModel, build_model, mask_lower
from heatformant.quantizer import BinSpec, FormantTrack, dequantize, quantize
from heatformant.synth import COHORT_RANGES, SyntheticSpec, SyntheticUtterance, generate_corpus, sample_formants, synthesize
from heatformant.train import (
    Example,
    TrainConfig,
    Trainer,
    learning_rate,
    prepare_examples,
    probe_mae,
    speed_up_utterance,
)

pytestmark = pytest.mark.slow

SPEC = BinSpec()
GEOMETRY = FrameGeometry()

# Desk-scale recipe: the reference schedule (1e-4, /10 twice) compressed to
# 24 epochs so four runs fit on one CPU core.
DESK_EPOCHS = 24
DESK_ANNEAL = (16, 21)
TRAIN_N, TEST_N, CHILD_N = 500, 100, 100
DURATION = 0.15
TIME_LIMIT_S = 3600


def desk_config(seed: int, speedup: float) -> TrainConfig:
    return TrainConfig(initial_lr=1e-4, anneal_epochs=DESK_ANNEAL, anneal_factor=10.0, smoothing_epsilon=0.1,
                       speedup_probability=speedup, batch_size=8, max_epochs=DESK_EPOCHS, seed=seed)


def heldout_mae(model: FormantModel, corpus) -> np.ndarray:
    """Per-formant frame MAE in Hz against the exact synthesis ground truth."""
    err = np.zeros(3)
    n = 0
    for u in corpus:
        pred, _ = track(features(u.waveform, GEOMETRY), model, SPEC)
        err += np.abs(pred.values - u.track.values).sum(axis=0)
        n += u.track.num_frames
    return err / n


@pytest.fixture(scope="module")
def corpora():
    return {
        "train": generate_corpus(TRAIN_N, ("men", "women"), seed=1000, duration=DURATION),
        "test": generate_corpus(TEST_N, ("men", "women"), seed=2000, duration=DURATION, id_prefix="test"),
        "children": generate_corpus(CHILD_N, ("children",), seed=3000, duration=DURATION, id_prefix="child"),
    }


@pytest.fixture(scope="module")
def runs(corpora):
    examples = prepare_examples(corpora["train"])
    cache = {}

    def get(speedup: float, seed: int):
        key = (speedup, seed)
        if key not in cache:
            cfg = desk_config(seed, speedup)
            trainer = Trainer(build_model(seed=seed), cfg, SPEC)
            start = time.perf_counter()
            history = trainer.fit(examples)
            elapsed = time.perf_counter() - start
            model = trainer.model
            cache[key] = {
                "model": model,
                "epochs": len(history),
                "seconds": elapsed,
                "test": heldout_mae(model, corpora["test"]),
                "children": heldout_mae(model, corpora["children"]),
            }
            print(f"run speedup={speedup} seed={seed}: {elapsed:.0f} s, test MAE {np.round(cache[key]['test'], 1)}, "
                  f"children MAE {np.round(cache[key]['children'], 1)}")
        return cache[key]

    return get


def test_synthetic_end_to_end(runs):
    with criterion("synthetic end-to-end (held-out MAE <= 60 Hz per formant, <= 100 epochs, <= 60 min)") as d:
        r = runs(0.2, 0)
        d["text"] = (f"MAE F1/F2/F3 = {r['test'][0]:.1f}/{r['test'][1]:.1f}/{r['test'][2]:.1f} Hz, "
                     f"{r['epochs']} epochs, {r['seconds'] / 60:.1f} min")
        assert r["epochs"] <= 100
        assert r["seconds"] <= TIME_LIMIT_S
        assert np.all(r["test"] <= 60.0)


def test_out_of_distribution_children(runs):
    with criterion("OOD children F1: augmentation on < off (mean of 2 seeds)") as d:
        on = [runs(0.2, s)["children"][0] for s in (0, 1)]
        off = [runs(0.0, s)["children"][0] for s in (0, 1)]
        d["text"] = (f"F1 MAE with speed-up {np.mean(on):.1f} Hz (seeds {on[0]:.1f}, {on[1]:.1f}) vs without "
                     f"{np.mean(off):.1f} Hz (seeds {off[0]:.1f}, {off[1]:.1f})")
        assert np.mean(on) < np.mean(off)


def test_lpc_oracle():
    with criterion("LPC oracle (>= 90% of frames within 30 Hz on all formants, < 10 s, 50 vowels)") as d:
        rng = np.random.default_rng(11)
        # Low-pitched (men) cohort: LPC resolves formants only when harmonics are dense.
        items = []
        for _ in range(50):
            spec = SyntheticSpec(
                f0=rng.uniform(*COHORT_RANGES["men"]["f0"]),
                formants=sample_formants(rng, "men"),
                bandwidths=tuple(rng.uniform(40.0, 100.0, 3)),
                duration=0.25,
                phase=rng.random(),
            )
            items.append(synthesize(spec))
        start = time.perf_counter()
        hits = []
        for w, truth in items:
            pred = lpc_track(w)
            close = pred.valid & (np.abs(np.nan_to_num(pred.values) - truth.values) <= 30.0)
            hits.append(close.all(axis=1))
        elapsed = time.perf_counter() - start
        rate = float(np.concatenate(hits).mean())
        d["text"] = f"{100 * rate:.1f}% of frames, {elapsed:.2f} s"
        assert rate >= 0.9 and elapsed < 10.0


def test_monotonicity_and_probability_sweep():
    violations = 0
    worst = 0.0
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for i in range(1000):
            model = build_model(seed=i)
            frames = int(torch.randint(1, 9, (1,), generator=g))
            x = torch.randn(1, 257, frames, generator=g) * float(torch.empty(1).uniform_(0.1, 10.0, generator=g))
            _, heatmaps = track(x[0].numpy(), model, SPEC)
            bins = heatmaps.maps.argmax(axis=1)
            violations += int(np.sum(~((bins[0] < bins[1]) & (bins[1] < bins[2]))))
            worst = max(worst, float(np.abs(heatmaps.maps.astype(np.float64).sum(axis=1) - 1.0).max()))
    with criterion("monotonicity b1 < b2 < b3 over 1000 random-weight models") as d:
        d["text"] = f"{violations} violations"
        assert violations == 0
    with criterion("probability columns sum to 1 +- 1e-5 over the same sweep") as d:
        d["text"] = f"max deviation {worst:.2e}"
        assert worst <= 1e-5


def test_quantizer_roundtrip():
    with criterion("quantizer roundtrip |dequantize(quantize(f)) - f| <= 15.625 Hz for 1e5 f") as d:
        f = np.random.default_rng(0).uniform(0.0, 8000.0, 100_000)
        f[:3] = (0.0, 8000.0, 15.625)
        err = np.abs(dequantize(quantize(f, SPEC), SPEC) - f)
        violations = int(np.sum(err > 15.625))
        d["text"] = f"{violations} violations, max error {err.max():.4f} Hz"
        assert violations == 0


def test_schedule_conformance():
    with criterion("schedule: metrics log lr 1e-4 / 1e-5 / 1e-6 at epochs 0 / 300 / 600") as d:
        cfg = TrainConfig()  # reference recipe
        torch.manual_seed(0)
        model = FormantModel(EncoderConfig(channel_plan=(1, 2, 1)), DecoderConfig(bottleneck_plan=(257, 4, 257)))
        trainer = Trainer(model, cfg, SPEC)
        rng = np.random.default_rng(0)
        example = Example(rng.normal(size=(257, 4)).astype(np.float32), np.tile([10, 40, 80], (4, 1)))
        logged = {}
        for epoch in (0, 300, 600):
            trainer.epoch = epoch
            row = trainer.train_epoch([example]).row()
            logged[int(row[0])] = float(row[1])
        expected = {0: 1e-4, 300: 1e-5, 600: 1e-6}
        d["text"] = ", ".join(f"epoch {e}: {lr:g}" for e, lr in logged.items())
        assert logged == expected
        assert [learning_rate(e, cfg) for e in (299, 599, 699)] == [1e-4, 1e-5, 1e-6]


def test_augmentation_labels():
    with criterion("augmentation: F1=400 Hz vowel peaks within 1 bin of 800 Hz, labels exactly doubled") as d:
        # f0 = 100 Hz places a harmonic on the resonance peak before and after speed-up.
        spec = SyntheticSpec(100.0, (400.0, 1500.0, 2500.0), (50.0, 70.0, 90.0), duration=0.3)
        w, truth = synthesize(spec)
        utt = SyntheticUtterance("f1_400", spec, w, truth, 0)
        fast = speed_up_utterance(utt)
        s = features(speed_up_by_two(w), FrameGeometry(standardize=False)).values
        lo, hi = 16, 40  # 500-1250 Hz search region around F1
        peaks = lo + np.argmax(s[lo:hi], axis=0)
        target = 800.0 / SPEC.bin_width
        d["text"] = (f"peak bins {sorted(set(peaks.tolist()))} vs {target:g}; "
                     f"labels {sorted(set(fast.track.values[:, 0].tolist()))} Hz")
        assert np.all(np.abs(peaks - target) <= 1)
        assert np.array_equal(fast.track.values, 2.0 * truth.values[: fast.track.num_frames])


def test_decoder_bias_removal():
    with criterion("decoder heads carry zero bias parameters") as d:
        inv = FormantModel().parameter_inventory()
        counts = {}
        for k in range(1, 4):
            names = [n for n in inv if n.startswith(f"decoder.head{k}.")]
            assert names
            counts[k] = sum(1 for n in names if "bias" in n)
        d["text"] = ", ".join(f"head{k}: {n} bias tensors" for k, n in counts.items())
        assert all(n == 0 for n in counts.values())


def test_overfit_smoke():
    with criterion("overfit one utterance: MAE < 2 bins within 2000 steps and 5 min") as d:
        spec = SyntheticSpec(130.0, (550.0, 1650.0, 2550.0), duration=0.25, formants_end=(650.0, 1450.0, 2450.0))
        w, truth = synthesize(spec)
        (ex,) = prepare_examples([SyntheticUtterance("one", spec, w, truth, 0)], with_speedup=False)
        # Capacity check: regularisers off (dropout, augmentation), inference-mode probe.
        model = build_model(EncoderConfig(dropout_rate=0.0), DecoderConfig(dropout_rate=0.0), seed=0)
        trainer = Trainer(model, TrainConfig(batch_size=1, speedup_probability=0.0), SPEC)
        start = time.perf_counter()
        steps, mae_bins = 0, float("inf")
        while steps < 2000 and time.perf_counter() - start < 300:
            trainer.train_epoch([ex])
            steps += 1
            if steps % 10 == 0:
                mae_bins = max(probe_mae(trainer.model, [ex], SPEC)) / SPEC.bin_width
                if mae_bins < 2:
                    break
        elapsed = time.perf_counter() - start
        d["text"] = f"worst-formant MAE {mae_bins:.2f} bins after {steps} steps, {elapsed:.0f} s"
        assert mae_bins < 2 and steps <= 2000 and elapsed < 300


def test_eval_golden():
    with criterion("eval golden fixtures (tracking, estimation, transition) reproduce exactly") as d:
        gv = np.ones((3, 3), bool)
        gv[1, 2] = False
        gold = FormantTrack([[500, 1500, 2500], [300, 1200, 2400], [400, 1400, 2600]], gv)
        pred = FormantTrack([[530, 1490, 2560], [320, 1250, 2300], [999, 999, 999]], np.ones((3, 3), bool))
        seg = PhoneSegmentation(((0, 1, "vowel"), (1, 2, "nasal"), (2, 3, "silence")))
        tm = tracking_mae(pred, gold, seg).table()
        assert tm["vowel"] == [30.0, 10.0, 60.0] and tm["nasal"] == [20.0, 50.0, None]

        est_pred = FormantTrack([[480, 1490, 2500], [500, 1510, 2500], [520, 1545, 2500]], np.ones((3, 3), bool))
        assert estimation_error(est_pred, [500, 1500, None], (0, 3)).errors == [0.0, 15.0, None]
        points = {"20": [600, 1400, 2400], "50": [510, 1490, 2480], "80": [560, 1600, 2550]}
        assert estimation_error(est_pred, hillenbrand_gold(points), (0, 3)).errors == [10.0, 25.0, 20.0]

        tg = FormantTrack([[500, 1500, 2500]] * 10, np.ones((10, 3), bool))
        tp = tg.values.copy()
        tp[:, 0] += np.arange(10) * 10.0
        tp[:, 1] += 5.0
        tseg = PhoneSegmentation(((0, 4, "stop"), (4, 8, "vowel"), (8, 10, "nasal")))
        tr = transition_mae(FormantTrack(tp, np.ones((10, 3), bool)), tg, tseg)
        assert tr.table()["CV"] == [35.0, 5.0, 0.0] and tr.table()["VC"] == [None, None, None] and tr.skipped == 1
        d["text"] = "tracking vowel [30, 10, 60], estimation [0, 15, -], transition CV [35, 5, 0]"


def test_gradient_check_miniature():
    with criterion("gradients vs central finite differences, 17-bin 5-frame miniature (autodiff build)") as d:
        torch.manual_seed(0)
        model = FormantModel(EncoderConfig(channel_plan=(1, 3, 1), dropout_rate=0.0),
                             DecoderConfig(bottleneck_plan=(17, 5, 17), dropout_rate=0.0)).double()
        x = torch.randn(2, 17, 5, dtype=torch.double)
        mask = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 1, 1, 0]])
        lower = torch.randint(-1, 6, (2, 5))
        target = torch.randint(7, 15, (2, 5))
        names = [n for n, _ in model.named_parameters()]
        buffers = dict(model.named_buffers())

        def loss(*values):
            state = {**dict(zip(names, values)), **buffers}
            enc = {n[len("encoder."):]: v for n, v in state.items() if n.startswith("encoder.")}
            z = torch.func.functional_call(model.encoder, enc, (x, mask, True))
            head = {n[len("decoder.head2."):]: v for n, v in state.items() if n.startswith("decoder.head2.")}
            scores = torch.func.functional_call(model.head(1), head, (mask_lower(z, lower), mask, True))
            logp = torch.log_softmax(scores, dim=-2)
            return -logp.gather(1, target.unsqueeze(1)).mean()

        inputs = tuple(p.detach().clone().requires_grad_(True) for p in model.parameters())
        ok = torch.autograd.gradcheck(loss, inputs, eps=1e-6, atol=1e-6, rtol=1e-4, raise_exception=False)
        d["text"] = f"gradcheck over {sum(p.numel() for p in inputs)} parameters (rtol 1e-4, atol 1e-6)"
        assert ok
