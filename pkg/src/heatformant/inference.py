"""Greedy sequential decoding: F1 first, then each higher formant above the last."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dsp import Spectrogram
from .model import FormantModel, mask_lower, to_numpy
from .quantizer import BinSpec, FormantTrack, dequantize

TRACK_HEADER = ["frame", "time_sec", "f1_hz", "f2_hz", "f3_hz", "valid"]


@dataclass(frozen=True)
class HeatmapSet:
    maps: np.ndarray  # (K, D, T); every column is a distribution over bins

    @property
    def num_heads(self) -> int:
        return self.maps.shape[0]


def _as_input(s: Spectrogram | np.ndarray) -> torch.Tensor:
    values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
    return torch.as_tensor(values, dtype=torch.float32)[None]


@torch.no_grad()
def encode(s: Spectrogram | np.ndarray, model: FormantModel) -> np.ndarray:
    """Latent map of the same (D, T) shape as the input, evaluation mode."""
    x = _as_input(s)
    if x.shape[1] != model.num_bins:
        raise ValueError(f"model expects {model.num_bins} bins, input has {x.shape[1]}")
    return to_numpy(model.encode(x, train=False)[0])


@torch.no_grad()
def decode_head(k: int, z_masked: np.ndarray, model: FormantModel, lower_bins: np.ndarray | None = None) -> np.ndarray:
    """(D, T) probability map of head `k` for an already-masked latent map.

    `lower_bins` restricts the output support to rows above the lower
    formant; by default nothing is restricted beyond the top-row reserve.
    """
    z = torch.as_tensor(np.asarray(z_masked), dtype=torch.float32)[None]
    if z.shape[1] != model.num_bins:
        raise ValueError(f"head expects {model.num_bins} rows, got {z.shape[1]}")
    T = z.shape[-1]
    lower = torch.full((1, T), -1, dtype=torch.long) if lower_bins is None else torch.as_tensor(lower_bins)[None]
    lower = lower.long()
    # Masking an already-masked map again is a no-op.
    lp = model.head_log_probs(k, mask_lower(z, lower), lower, train=False)
    return to_numpy(lp.exp()[0])


@torch.no_grad()
def track(s: Spectrogram | np.ndarray, model: FormantModel, bin_spec: BinSpec = BinSpec()) -> tuple[FormantTrack, HeatmapSet]:
    """Per-frame formants via argmax of each head, lowest bin winning ties."""
    x = _as_input(s)
    if x.shape[1] != bin_spec.num_bins or x.shape[1] != model.num_bins:
        raise ValueError(f"expected {bin_spec.num_bins} bins, got {x.shape[1]}")
    z = model.encode(x, train=False)
    bins, logps = model.decode_greedy(z)
    bins = to_numpy(bins[0]).T  # (T, K)
    values = dequantize(bins, bin_spec)
    return FormantTrack(values, np.ones(values.shape, dtype=bool)), HeatmapSet(to_numpy(logps[0].exp()))


def aggregate_heatmaps(h: HeatmapSet | np.ndarray) -> np.ndarray:
    """Elementwise maximum over the K maps, for display."""
    maps = h.maps if isinstance(h, HeatmapSet) else np.asarray(h)
    return maps.max(axis=0)


def write_track_csv(path, track: FormantTrack, hop: int = 160, sample_rate: int = 16000) -> None:
    """Export in the ``frame,time_sec,f1_hz,f2_hz,f3_hz,valid`` schema.

    `valid` is 1 only when all three formants are valid; invalid values are
    written as 0.
    """
    if track.num_formants != 3:
        raise ValueError("track export expects exactly three formants")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_HEADER)
        for t in range(track.num_frames):
            vals = [repr(float(v)) if ok else "0" for v, ok in zip(track.values[t], track.valid[t])]
            w.writerow([t, repr(t * hop / sample_rate), *vals, int(track.valid[t].all())])


def read_track_csv(path) -> FormantTrack:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRACK_HEADER:
        raise ValueError(f"{path}: expected header {','.join(TRACK_HEADER)}")
    values, valid = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(TRACK_HEADER):
            raise ValueError(f"{path}:{lineno}: expected {len(TRACK_HEADER)} columns, got {len(row)}")
        if int(row[0]) != lineno - 2:
            raise ValueError(f"{path}:{lineno}: frames must be consecutive from 0")
        f = [float(v) for v in row[2:5]]
        per_formant = [v > 0 for v in f]
        if row[5] not in ("0", "1") or (row[5] == "1") != all(per_formant):
            raise ValueError(f"{path}:{lineno}: valid flag disagrees with the formant values")
        values.append(f)
        valid.append(per_formant)
    return FormantTrack(np.array(values).reshape(-1, 3), np.array(valid).reshape(-1, 3))


def save_heatmaps(path, h: HeatmapSet) -> None:
    """NumPy .npz with ``maps`` (K, D, T) and ``aggregate`` (D, T)."""
    np.savez_compressed(path, maps=h.maps.astype(np.float32), aggregate=aggregate_heatmaps(h).astype(np.float32))
