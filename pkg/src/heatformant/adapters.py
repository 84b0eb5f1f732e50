"""Seams for license-gated corpora. Neither corpus ships with this package;
the readers only convert files the user already has into the canonical
FormantTrack / PhoneSegmentation types.

VTR formant files (``*.fb``)
    Expected layout: an optional 8-byte header is NOT assumed; the file is a
    flat little-endian float32 stream of frames at a 10 ms rate, each frame
    holding ``F1..F4`` then ``B1..B4`` in kHz. Only F1-F3 are kept.

Hillenbrand-style vowel table (``vowdata.dat``-like, whitespace separated)
    ``filename duration_ms f0 F1 F2 F3 F4 F1_20 F2_20 F3_20 F1_50 F2_50 F3_50 F1_80 F2_80 F3_80``
    where the first F1-F4 are the steady-state measurements and ``0`` means
    "not measured". Lines starting with ``#`` are ignored.

TIMIT ``.phn`` files
    ``start_sample end_sample phone`` per line at 16 kHz; converted to broad
    classes with the bundled mapping and to the 10 ms frame grid by
    nearest-frame rounding of the boundaries.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .evaluate import PhoneSegmentation
from .quantizer import FormantTrack

VTR_VALUES_PER_FRAME = 8


def load_broad_class_map() -> dict[str, str]:
    """TIMIT phone symbol -> broad class."""
    text = resources.files("heatformant").joinpath("timit_broad_classes.csv").read_text(encoding="utf-8")
    rows = csv.DictReader(text.splitlines())
    return {r["phone"]: r["broad_class"] for r in rows}


def read_vtr_fb(path, num_formants: int = 3) -> FormantTrack:
    raw = np.fromfile(Path(path), dtype="<f4")
    if raw.size % VTR_VALUES_PER_FRAME:
        raise ValueError(f"{path}: {raw.size} values is not a whole number of {VTR_VALUES_PER_FRAME}-value frames")
    frames = raw.reshape(-1, VTR_VALUES_PER_FRAME).astype(np.float64)
    hz = frames[:, :num_formants] * 1000.0
    return FormantTrack(hz, hz > 0)


@dataclass(frozen=True)
class HillenbrandRecord:
    filename: str
    duration_ms: float
    f0: float
    steady: tuple[float | None, ...]
    points: dict[str, tuple[float | None, ...]]  # "20" / "50" / "80" -> (F1, F2, F3)

    @property
    def group(self) -> str:
        """Speaker group from the file-name prefix (m, w, b, g)."""
        return {"m": "men", "w": "women", "b": "children", "g": "children"}.get(self.filename[:1], "")

    @property
    def vowel(self) -> str:
        return self.filename[3:5]


def _measured(v: str) -> float | None:
    x = float(v)
    return x if x > 0 else None


def read_hillenbrand_table(path) -> list[HillenbrandRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 16:
            raise ValueError(f"{path}:{lineno}: expected 16 fields, got {len(parts)}")
        vals = [_measured(v) for v in parts[3:]]
        records.append(
            HillenbrandRecord(
                filename=parts[0],
                duration_ms=float(parts[1]),
                f0=float(parts[2]),
                steady=tuple(vals[0:3]),
                points={"20": tuple(vals[4:7]), "50": tuple(vals[7:10]), "80": tuple(vals[10:13])},
            )
        )
    return records


def read_timit_phn(path, num_frames: int, hop: int = 160, class_map: dict[str, str] | None = None) -> PhoneSegmentation:
    class_map = class_map or load_broad_class_map()
    labels: list[str | None] = [None] * num_frames
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            start, end, phone = line.split()
            start_f = int(round(int(start) / hop))
            end_f = int(round(int(end) / hop))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'start end phone'") from None
        if phone not in class_map:
            raise ValueError(f"{path}:{lineno}: unknown phone {phone!r}")
        for t in range(max(0, start_f), min(end_f, num_frames)):
            labels[t] = class_map[phone]
    return PhoneSegmentation.from_frame_labels(labels)
