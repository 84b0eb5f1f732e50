"""Command-line entry point: ``heatformant <command> [options]``.

Exit status: 0 on success, 1 on validation errors (bad config, manifest,
audio or usage), 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import yaml

from . import data as data_mod
from .baseline import lpc_track
from .config import ConfigError, RunConfig, load_config
from .dsp import AudioFormatError, features, read_wav, write_wav
from .evaluate import evaluate_utterance, merge, vowel_polygon, write_polygon_csv
from .inference import read_track_csv, save_heatmaps, track, write_track_csv
from .model import CheckpointError, build_model, load_checkpoint
from .quantizer import FormantTrack
from .synth import generate_corpus, vowel_category
from .train import Trainer, prepare_examples

log = logging.getLogger("heatformant")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, data_mod.ManifestError, AudioFormatError, CheckpointError)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


@contextmanager
def atomic_dir(out: Path):
    """Yield a scratch directory that replaces `out` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    backup = None
    if out.exists():
        backup = out.with_name(f".{out.name}.old")
        shutil.rmtree(backup, ignore_errors=True)
        out.rename(backup)
    tmp.rename(out)
    if backup is not None:
        shutil.rmtree(backup, ignore_errors=True)


def _config(args, extra: dict | None = None) -> RunConfig:
    """Config file + common flags + ``--set`` items + command-specific overrides."""
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
        overrides["synth.seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key] = yaml.safe_load(value)
    overrides.update(extra or {})
    return load_config(args.config, overrides)


def _inputs(args, cfg: RunConfig):
    """(id, AnnotatedUtterance or None, wav path) triples from --wav/--manifest."""
    if bool(args.wav) == bool(args.manifest):
        raise UsageError("give exactly one of --wav or --manifest")
    if args.wav:
        path = Path(args.wav)
        if not path.exists():
            raise UsageError(f"{path}: no such file")
        return [(path.stem, None, path)]
    m = data_mod.load_manifest(args.manifest, cfg.geometry)
    if getattr(args, "split", None):
        m = m.subset(args.split)
    return [(e.id, e, e.audio_path) for e in m.entries]


def _map(fn, jobs, workers: int, initializer=None, initargs=()):
    if workers <= 1:
        if initializer:
            initializer(*initargs)
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# commands


def cmd_config(args) -> int:
    cfg = _config(args)
    if args.print_defaults:
        sys.stdout.write(RunConfig().to_yaml())
    else:
        sys.stdout.write(cfg.to_yaml())
    return EXIT_OK


def cmd_synth(args) -> int:
    overrides = {}
    if args.n is not None:
        if args.n <= 0:
            raise UsageError("--n must be positive")
        overrides["synth.n"] = args.n
    if args.cohorts:
        overrides["synth.cohorts"] = args.cohorts.split(",")
    if args.duration is not None:
        overrides["synth.duration"] = args.duration
    cfg = _config(args, overrides)
    s = cfg.synth
    corpus = generate_corpus(s.n, s.cohorts, s.seed, s.duration, cfg.audio.sample_rate, cfg.geometry, s.drift)
    entries = [
        data_mod.AnnotatedUtterance(u.id, None, u.track, group=u.group,
                                    vowel=vowel_category(*u.spec.formants[:2]))
        for u in corpus
    ]
    if s.test_fraction > 0:
        train, test = data_mod.split_by_speaker_group(data_mod.Manifest(entries), s.test_fraction, s.seed)
        split_of = {e.id: e.split for e in train.entries + test.entries}
        for e in entries:
            e.split = split_of[e.id]
    out = Path(args.out)
    with atomic_dir(out) as tmp:
        (tmp / "wav").mkdir()
        (tmp / "annotations").mkdir()
        with open(tmp / "synth_params.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "cohort", "seed", "f0", "f1", "f2", "f3", "f1_end", "f2_end", "f3_end", "b1", "b2", "b3"])
            for u, e in zip(corpus, entries):
                wav = tmp / "wav" / f"{u.id}.wav"
                ann = tmp / "annotations" / f"{u.id}.csv"
                write_wav(wav, u.waveform)
                data_mod.write_annotation(ann, u.track)
                e.audio_path, e.annotation_path = wav, ann
                end = u.spec.formants_end or u.spec.formants
                w.writerow([u.id, u.group, u.seed, f"{u.spec.f0:.4f}",
                            *(f"{v:.4f}" for v in (*u.spec.formants, *end, *u.spec.bandwidths))])
        data_mod.save_manifest(tmp / "manifest.csv", data_mod.Manifest(entries, "synthetic"))
        (tmp / "config.yaml").write_text(cfg.to_yaml())
    manifest = out / "manifest.csv"
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]
    print(f"{manifest}  ({len(entries)} utterances, sha256 {digest})")
    return EXIT_OK


def _examples(manifest: data_mod.Manifest, cfg: RunConfig, with_speedup: bool):
    return prepare_examples(manifest.entries, cfg.geometry, cfg.bin_spec, cfg.audio.pre_emphasis, with_speedup)


def cmd_train(args) -> int:
    cfg = _config(args, {"train.max_epochs": args.epochs} if args.epochs is not None else None)
    m = data_mod.load_manifest(args.manifest, cfg.geometry)
    train_set = m.subset("train") if any(e.split == "train" for e in m.entries) else m
    if args.probe:
        probe_set = data_mod.load_manifest(args.probe, cfg.geometry)
    else:
        probe_set = m.subset("test")
    if not len(train_set):
        raise UsageError("manifest has no training utterances")
    out = Path(args.out)
    ckpt = out / "checkpoint.pt"
    if args.resume:
        if not ckpt.exists():
            raise UsageError(f"--resume given but {ckpt} does not exist")
        trainer = Trainer.resume(ckpt, cfg.train)
        print(f"resuming at epoch {trainer.epoch}")
    else:
        if (out / "metrics.csv").exists():
            raise UsageError(f"{out} already holds a run; use --resume or a new --out")
        trainer = Trainer(build_model(cfg.encoder, cfg.decoder, cfg.train.seed), cfg.train, cfg.bin_spec)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    train_ex = _examples(train_set, cfg, cfg.train.speedup_probability > 0)
    probe_ex = _examples(probe_set, cfg, False) if len(probe_set) else []
    trainer.fit(train_ex, probe_ex, cfg.train.max_epochs, out,
                on_epoch=lambda mtr: print(" ".join(str(v) for v in mtr.row()), flush=True))
    trainer.save(ckpt)
    print(ckpt)
    return EXIT_OK


_WORKER_MODEL = {}


def _init_tracker(checkpoint):
    model, spec, _ = load_checkpoint(checkpoint)
    _WORKER_MODEL["model"], _WORKER_MODEL["spec"] = model, spec


def _track_job(job):
    uid, wav, out, heatmaps, cfg = job
    w = read_wav(wav, cfg.audio.sample_rate)
    s = features(w, cfg.geometry, cfg.audio.pre_emphasis)
    tr, hm = track(s, _WORKER_MODEL["model"], _WORKER_MODEL["spec"])
    write_track_csv(Path(out) / f"{uid}.csv", tr, cfg.geometry.hop, w.sample_rate)
    if heatmaps:
        save_heatmaps(Path(out) / f"{uid}.heatmaps.npz", hm)
    return uid


def cmd_track(args) -> int:
    cfg = _config(args)
    if not Path(args.checkpoint).exists():
        raise UsageError(f"{args.checkpoint}: no such checkpoint")
    load_checkpoint(args.checkpoint)  # validate before doing any work
    items = _inputs(args, cfg)
    for _, _, wav in items:
        read_wav(wav, cfg.audio.sample_rate)
    with atomic_dir(Path(args.out)) as tmp:
        jobs = [(uid, wav, tmp, args.heatmaps, cfg) for uid, _, wav in items]
        _map(_track_job, jobs, cfg.workers, _init_tracker, (args.checkpoint,))
    print(f"{len(items)} track(s) written to {args.out}")
    return EXIT_OK


def _baseline_job(job):
    uid, wav, out, cfg = job
    w = read_wav(wav, cfg.audio.sample_rate)
    tr = lpc_track(w, cfg.geometry, cfg.baseline)
    write_track_csv(Path(out) / f"{uid}.csv", tr, cfg.geometry.hop, w.sample_rate)
    return uid


def cmd_baseline(args) -> int:
    cfg = _config(args)
    items = _inputs(args, cfg)
    for _, _, wav in items:
        read_wav(wav, cfg.audio.sample_rate)
    with atomic_dir(Path(args.out)) as tmp:
        _map(_baseline_job, [(uid, wav, tmp, cfg) for uid, _, wav in items], cfg.workers)
    print(f"{len(items)} track(s) written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    m = data_mod.load_manifest(args.manifest, cfg.geometry, validate_audio=False)
    if args.split:
        m = m.subset(args.split)
    pred_dir = Path(args.pred)
    preds = {}
    for e in m.entries:
        p = pred_dir / f"{e.id}.csv"
        if not p.exists():
            raise data_mod.ManifestError(f"no prediction for utterance {e.id!r} (expected {p})")
        preds[e.id] = read_track_csv(p)
        if preds[e.id].num_frames != e.track.num_frames:
            raise data_mod.ManifestError(
                f"utterance {e.id!r}: prediction has {preds[e.id].num_frames} frames, annotation {e.track.num_frames}"
            )
    reports = [evaluate_utterance(preds[e.id], e.track, e.segmentation, e.vowel_interval()) for e in m.entries]
    report = merge(reports)
    with atomic_dir(Path(args.out)) as tmp:
        (tmp / "report.txt").write_text(report.to_text())
        (tmp / "report.csv").write_text(report.to_csv())
        if args.polygons:
            items = []
            for e in m.entries:
                iv = e.vowel_interval() or (0, e.track.num_frames)
                sl = slice(*iv)
                items.append((FormantTrack(preds[e.id].values[sl], preds[e.id].valid[sl]), e.vowel, e.group))
            write_polygon_csv(tmp / "polygons.csv", vowel_polygon(items))
    sys.stdout.write(report.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override train.seed and synth.seed")
    common.add_argument("--workers", type=int, help="worker processes for per-utterance work")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")

    p = _Parser(prog="heatformant", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("config", parents=[common], help="print the effective or default configuration")
    c.add_argument("--print-defaults", action="store_true")
    c.set_defaults(func=cmd_config)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic vowel corpus")
    s.add_argument("--n", type=int)
    s.add_argument("--cohorts", help="comma-separated cohorts, e.g. men,women")
    s.add_argument("--duration", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--probe", help="held-out manifest for per-epoch MAE (default: split=test rows)")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("track", cmd_track, "track formants with a trained model"),
                                 ("baseline", cmd_baseline, "track formants with the LPC baseline")):
        q = sub.add_parser(name, parents=[common], help=helptext)
        if name == "track":
            q.add_argument("--checkpoint", required=True)
            q.add_argument("--heatmaps", action="store_true", help="also write per-head and aggregated heatmaps")
        q.add_argument("--wav")
        q.add_argument("--manifest")
        q.add_argument("--split")
        q.add_argument("--out", required=True)
        q.set_defaults(func=func)

    e = sub.add_parser("eval", parents=[common], help="score predicted tracks against a manifest")
    e.add_argument("--pred", required=True, help="directory of <id>.csv tracks")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split")
    e.add_argument("--out", required=True)
    e.add_argument("--polygons", action="store_true", help="also write per-group vowel means")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
