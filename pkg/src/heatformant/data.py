"""Canonical annotation files and dataset manifests.

Annotation CSV (one per utterance, zero-based frames on the 10 ms grid)::

    frame,f1_hz,f2_hz,f3_hz,valid1,valid2,valid3[,phone_class]

Manifest CSV (paths relative to the manifest's directory)::

    id,audio_path,annotation_path,group,vowel,split[,speaker]

Unannotated formants are written as ``0`` with their valid flag ``0``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import FrameGeometry, Waveform, read_wav, wav_num_samples
from .evaluate import BROAD_CLASSES, PhoneSegmentation
from .quantizer import FormantTrack

ANNOTATION_HEADER = ["frame", "f1_hz", "f2_hz", "f3_hz", "valid1", "valid2", "valid3"]
MANIFEST_HEADER = ["id", "audio_path", "annotation_path", "group", "vowel", "split"]


class ManifestError(ValueError):
    """Base class for manifest and annotation validation failures."""


class AnnotationParseError(ManifestError):
    pass


class MissingAudioError(ManifestError):
    pass


class FrameMismatchError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


@dataclass
class AnnotatedUtterance:
    id: str
    audio_path: Path | None
    track: FormantTrack
    segmentation: PhoneSegmentation | None = None
    group: str = ""
    vowel: str = ""
    split: str = "train"
    speaker: str = ""
    annotation_path: Path | None = None
    _waveform: Waveform | None = field(default=None, repr=False, compare=False)

    @property
    def waveform(self) -> Waveform:
        if self._waveform is None:
            if self.audio_path is None:
                raise ValueError(f"{self.id}: no audio attached")
            self._waveform = read_wav(self.audio_path)
        return self._waveform

    def with_waveform(self, w: Waveform, track: FormantTrack | None = None) -> "AnnotatedUtterance":
        return replace(self, _waveform=w, track=self.track if track is None else track)

    def vowel_interval(self) -> tuple[int, int] | None:
        """First vowel interval of the segmentation, else the whole track for vowel-only items."""
        if self.segmentation is not None:
            for s, e, c in self.segmentation.intervals:
                if c == "vowel":
                    return s, e
            return None
        return (0, self.track.num_frames) if self.vowel else None


@dataclass
class Manifest:
    entries: list[AnnotatedUtterance]
    source_name: str = ""

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DuplicateIdError(f"duplicate utterance id {e.id!r}")
            seen.add(e.id)

    def by_id(self) -> dict[str, AnnotatedUtterance]:
        return {e.id: e for e in self.entries}

    def subset(self, split: str) -> "Manifest":
        return Manifest([e for e in self.entries if e.split == split], self.source_name)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# annotation files


def write_annotation(path, track: FormantTrack, segmentation: PhoneSegmentation | None = None) -> None:
    if track.num_formants != 3:
        raise ValueError("annotation files hold exactly three formants")
    header = ANNOTATION_HEADER + (["phone_class"] if segmentation is not None else [])
    labels = segmentation.frame_classes(track.num_frames) if segmentation is not None else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(track.num_frames):
            vals = [repr(float(v)) if ok else "0" for v, ok in zip(track.values[t], track.valid[t])]
            row = [t, *vals, *(int(ok) for ok in track.valid[t])]
            if labels is not None:
                row.append(labels[t] or "")
            w.writerow(row)


def read_annotation(path) -> tuple[FormantTrack, PhoneSegmentation | None]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise AnnotationParseError(f"{path}:1: empty file")
    header = rows[0]
    has_class = header == ANNOTATION_HEADER + ["phone_class"]
    if header != ANNOTATION_HEADER and not has_class:
        raise AnnotationParseError(f"{path}:1: expected header {','.join(ANNOTATION_HEADER)}[,phone_class]")
    ncol = len(header)
    values, valid, labels = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != ncol:
            raise AnnotationParseError(f"{path}:{lineno}: expected {ncol} columns, got {len(row)}")
        try:
            frame = int(row[0])
            f = [float(v) for v in row[1:4]]
            flags = [int(v) for v in row[4:7]]
        except ValueError as exc:
            raise AnnotationParseError(f"{path}:{lineno}: {exc}") from None
        if frame != lineno - 2:
            raise AnnotationParseError(f"{path}:{lineno}: frames must be consecutive from 0, got {frame}")
        if any(v not in (0, 1) for v in flags):
            raise AnnotationParseError(f"{path}:{lineno}: valid flags must be 0 or 1")
        values.append(f)
        valid.append([bool(v) for v in flags])
        if has_class:
            cls = row[7] or None
            if cls is not None and cls not in BROAD_CLASSES:
                raise AnnotationParseError(f"{path}:{lineno}: unknown phone class {cls!r}")
            labels.append(cls)
    track = FormantTrack(np.array(values, dtype=np.float64).reshape(-1, 3), np.array(valid, dtype=bool).reshape(-1, 3))
    seg = PhoneSegmentation.from_frame_labels(labels) if has_class else None
    return track, seg


# ---------------------------------------------------------------------------
# manifests


def save_manifest(path, m: Manifest) -> None:
    """Write the manifest CSV; entries must already have audio and annotation paths."""
    path = Path(path)
    base = path.parent
    with_speaker = any(e.speaker for e in m.entries)
    header = MANIFEST_HEADER + (["speaker"] if with_speaker else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for e in m.entries:
            if e.audio_path is None or e.annotation_path is None:
                raise ValueError(f"{e.id}: audio and annotation paths are required to save a manifest")
            row = [e.id, _rel(e.audio_path, base), _rel(e.annotation_path, base), e.group, e.vowel, e.split]
            if with_speaker:
                row.append(e.speaker)
            w.writerow(row)


def _rel(p, base: Path) -> str:
    p = Path(p)
    try:
        return Path(os.path.relpath(p.resolve(), base.resolve())).as_posix()
    except ValueError:
        return p.as_posix()


def load_manifest(path, geometry: FrameGeometry = FrameGeometry(), validate_audio: bool = True) -> Manifest:
    """Parse and validate a manifest. Any failure raises; nothing partial is returned.

    Checks: unique ids, audio files present, annotation files parse, and the
    annotation frame count equals the frame count of the audio under
    `geometry`.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"{path}: manifest not found")
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][: len(MANIFEST_HEADER)] != MANIFEST_HEADER or len(rows[0]) not in (6, 7):
        raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}[,speaker]")
    ncol = len(rows[0])
    entries, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != ncol:
            raise ManifestError(f"{path}:{lineno}: expected {ncol} columns, got {len(row)}")
        uid, audio, ann, group, vowel, split = row[:6]
        if uid in seen:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate utterance id {uid!r}")
        seen.add(uid)
        audio_path = (base / audio).resolve()
        ann_path = (base / ann).resolve()
        if validate_audio and not audio_path.exists():
            raise MissingAudioError(f"utterance {uid!r}: audio file {audio_path} not found")
        if not ann_path.exists():
            raise ManifestError(f"utterance {uid!r}: annotation file {ann_path} not found")
        track, seg = read_annotation(ann_path)
        if validate_audio:
            expected = geometry.num_frames(wav_num_samples(audio_path))
            if expected != track.num_frames:
                raise FrameMismatchError(
                    f"utterance {uid!r}: annotation has {track.num_frames} frames, audio yields {expected}"
                )
        entries.append(
            AnnotatedUtterance(uid, audio_path, track, seg, group, vowel, split,
                               row[6] if ncol == 7 else "", ann_path)
        )
    return Manifest(entries, path.stem)


def split_by_speaker_group(m: Manifest, fraction: float, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Send a seeded `fraction` of each group's speakers to the test split.

    Speakers (utterance ids when no speaker is recorded) never straddle the
    two splits. The per-group test count is round(fraction * speakers).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]] = {}
    for e in m.entries:
        key = e.speaker or e.id
        members = groups.setdefault(e.group, [])
        if key not in members:
            members.append(key)
    test_keys = set()
    for group in sorted(groups):
        keys = sorted(groups[group])
        n_test = int(np.floor(fraction * len(keys) + 0.5))
        picked = rng.permutation(len(keys))[:n_test]
        test_keys.update((group, keys[i]) for i in picked)
    train, test = [], []
    for e in m.entries:
        if (e.group, e.speaker or e.id) in test_keys:
            test.append(replace(e, split="test"))
        else:
            train.append(replace(e, split="train"))
    return Manifest(train, m.source_name), Manifest(test, m.source_name)
