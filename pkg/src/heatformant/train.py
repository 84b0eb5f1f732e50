"""Optimisation loop: teacher-forced masked cross-entropy, Adam with step
annealing, label smoothing and 2x speed-up augmentation."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dsp import FrameGeometry, features, speed_up_by_two
from .model import FormantModel, allowed_rows, argmax_lowest, load_checkpoint, save_checkpoint
from .quantizer import BinSpec, FormantTrack, make_targets, track_bins

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "train_loss", "probe_mae_f1", "probe_mae_f2", "probe_mae_f3"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    anneal_epochs: tuple[int, ...] = (300, 600)
    anneal_factor: float = 10.0
    smoothing_epsilon: float = 0.1
    speedup_probability: float = 0.2
    batch_size: int = 8
    max_epochs: int = 700
    seed: int = 0
    # Probability of conditioning a head on predicted instead of
    # ground-truth lower bins; ramps linearly from 0 to this over training.
    scheduled_sampling: float = 0.0
    noise_std: float = 0.0
    crop_probability: float = 0.0
    min_crop_frames: int = 8
    reverse_probability: float = 0.0
    checkpoint_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "anneal_epochs", tuple(int(e) for e in self.anneal_epochs))
        if self.initial_lr <= 0 or self.anneal_factor <= 0:
            raise ValueError("learning rate and anneal factor must be positive")
        for name in ("speedup_probability", "scheduled_sampling", "crop_probability", "reverse_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.smoothing_epsilon < 1.0:
            raise ValueError("smoothing_epsilon must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """initial_lr / anneal_factor ** (number of anneal epochs already reached)."""
    passed = sum(1 for e in cfg.anneal_epochs if e <= epoch)
    return cfg.initial_lr / cfg.anneal_factor**passed


# ---------------------------------------------------------------------------
# losses


def cross_entropy(log_probs: torch.Tensor, targets: torch.Tensor, include: torch.Tensor) -> torch.Tensor:
    """Mean over included columns of -sum_d target * log_prob.

    ``log_probs`` and ``targets`` are (..., D, T), ``include`` is (..., T).
    Zero-mass target rows contribute nothing even where log_prob is -inf.
    """
    terms = torch.where(targets > 0, targets * log_probs, torch.zeros_like(log_probs))
    per_column = -terms.sum(dim=-2)
    n = include.sum()
    if n == 0:
        raise ValueError("no supervised frames")
    return (per_column * include).sum() / n


def loss(heatmaps, targets) -> float:
    """Cross-entropy between a HeatmapSet (probabilities) and a TargetHeatmapSet."""
    maps = np.asarray(getattr(heatmaps, "maps", heatmaps), dtype=np.float64)
    tgt = np.asarray(targets.targets, dtype=np.float64)
    if maps.shape != tgt.shape:
        raise ValueError(f"shape mismatch: heatmaps {maps.shape} vs targets {tgt.shape}")
    with np.errstate(divide="ignore"):
        logp = np.log(maps)
    return float(cross_entropy(torch.from_numpy(logp), torch.from_numpy(tgt), torch.from_numpy(targets.include)))


# ---------------------------------------------------------------------------
# augmentation


def speed_up_track(track: FormantTrack, new_frames: int, max_hz: float,
                   geometry: FrameGeometry = FrameGeometry()) -> FormantTrack:
    """Labels for the 2x sped-up signal.

    New frame t is centred on original sample 2*t*hop + window_length, i.e.
    original frame 2t + window_length / (2 * hop). Values are linearly
    interpolated there and doubled; an interpolated value is valid only when
    both neighbouring frames are, and only up to `max_hz`.
    """
    pos = 2.0 * np.arange(new_frames) + geometry.window_length / (2 * geometry.hop)
    last = track.num_frames - 1
    pos = np.clip(pos, 0, last)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, last)
    frac = (pos - lo)[:, None]
    v = track.values
    values = 2.0 * np.where(frac > 0, (1 - frac) * v[lo] + frac * v[hi], v[lo])
    valid = track.valid[lo] & (track.valid[hi] | (frac == 0)) & ~np.isnan(values)
    with np.errstate(invalid="ignore"):
        valid &= values <= max_hz
    return FormantTrack(values, valid)


def speed_up_utterance(u, geometry: FrameGeometry = FrameGeometry(), bin_spec: BinSpec = BinSpec()):
    w = speed_up_by_two(u.waveform)
    new_frames = geometry.num_frames(len(w))
    return u.with_waveform(w, speed_up_track(u.track, new_frames, bin_spec.max_hz, geometry))


def augment_sample(u, rng: np.random.Generator, cfg: TrainConfig = TrainConfig(),
                   geometry: FrameGeometry = FrameGeometry(), bin_spec: BinSpec = BinSpec()):
    """With probability ``cfg.speedup_probability`` return the 2x sped-up utterance."""
    if rng.random() < cfg.speedup_probability:
        return speed_up_utterance(u, geometry, bin_spec)
    return u


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class Example:
    spec: np.ndarray  # (D, T) float32
    bins: np.ndarray  # (T, K) int, -1 where unsupervised
    fast_spec: np.ndarray | None = None
    fast_bins: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.spec.shape[1]


def prepare_examples(utterances, geometry: FrameGeometry = FrameGeometry(), bin_spec: BinSpec = BinSpec(),
                     pre_emphasis: float = 0.97, with_speedup: bool = True) -> list[Example]:
    """Precompute features and label bins, including the sped-up variant.

    The augmentation itself is deterministic, so only the per-epoch choice
    of variant is random.
    """
    out = []
    for u in utterances:
        s = features(u.waveform, geometry, pre_emphasis).values.astype(np.float32)
        if u.track.num_frames != s.shape[1]:
            raise ValueError(f"{getattr(u, 'id', '?')}: track has {u.track.num_frames} frames, audio {s.shape[1]}")
        ex = Example(s, track_bins(u.track, bin_spec))
        if with_speedup and geometry.num_frames(math.ceil(len(u.waveform) / 2)) > 0:
            fast = speed_up_utterance(u, geometry, bin_spec)
            ex.fast_spec = features(fast.waveform, geometry, pre_emphasis).values.astype(np.float32)
            ex.fast_bins = track_bins(fast.track, bin_spec)
        out.append(ex)
    return out


def _choose_variant(ex: Example, rng: np.random.Generator, cfg: TrainConfig):
    spec, bins = ex.spec, ex.bins
    if rng.random() < cfg.speedup_probability and ex.fast_spec is not None:
        spec, bins = ex.fast_spec, ex.fast_bins
    if cfg.crop_probability and rng.random() < cfg.crop_probability and spec.shape[1] > cfg.min_crop_frames:
        length = int(rng.integers(cfg.min_crop_frames, spec.shape[1] + 1))
        start = int(rng.integers(0, spec.shape[1] - length + 1))
        spec, bins = spec[:, start : start + length], bins[start : start + length]
    if cfg.reverse_probability and rng.random() < cfg.reverse_probability:
        spec, bins = spec[:, ::-1], bins[::-1]
    if cfg.noise_std:
        spec = spec + rng.normal(0.0, cfg.noise_std, spec.shape).astype(np.float32)
    return spec, bins


@dataclass
class Batch:
    x: torch.Tensor  # (B, D, T)
    frame_mask: torch.Tensor  # (B, T) bool
    bins: torch.Tensor  # (B, K, T) long, -1 = unsupervised or padding


def collate(items) -> Batch:
    D = items[0][0].shape[0]
    K = items[0][1].shape[1]
    T = max(s.shape[1] for s, _ in items)
    x = np.zeros((len(items), D, T), np.float32)
    mask = np.zeros((len(items), T), bool)
    bins = np.full((len(items), K, T), -1, np.int64)
    for i, (s, b) in enumerate(items):
        n = s.shape[1]
        x[i, :, :n] = s
        mask[i, :n] = True
        bins[i, :, :n] = b.T
    return Batch(torch.from_numpy(x), torch.from_numpy(mask), torch.from_numpy(bins))


def epoch_batches(examples: list[Example], cfg: TrainConfig, rng: np.random.Generator, augment: bool = True):
    """Shuffle, pick augmentation variants, and group similar lengths together."""
    order = rng.permutation(len(examples))
    no_aug = dataclasses.replace(cfg, speedup_probability=0.0, crop_probability=0.0,
                                 reverse_probability=0.0, noise_std=0.0)
    items = [_choose_variant(examples[i], rng, cfg if augment else no_aug) for i in order]
    # Sort within windows of 50 batches to limit padding.
    window = 50 * cfg.batch_size
    batches = []
    for start in range(0, len(items), window):
        chunk = sorted(items[start : start + window], key=lambda it: it[0].shape[1])
        batches += [chunk[i : i + cfg.batch_size] for i in range(0, len(chunk), cfg.batch_size)]
    return [collate(batches[i]) for i in rng.permutation(len(batches))]


# ---------------------------------------------------------------------------
# forward passes


def teacher_forced_forward(model: FormantModel, x: torch.Tensor, bins: torch.Tensor, frame_mask=None,
                           train: bool = True, sampling_prob: float = 0.0, generator: torch.Generator | None = None):
    """Run all heads with masks built from ground-truth lower bins.

    Where the lower label is missing (or, with probability `sampling_prob`,
    anyway) the previous head's own argmax is used instead. Returns
    ``(log_probs (B, K, D, T), lower (B, K, T))``.
    """
    B, D, T = x.shape
    z = model.encode(x, frame_mask, train)
    lower = torch.full((B, T), -1, dtype=torch.long)
    logps, lowers = [], []
    for k in range(model.num_heads):
        lp = model.head_log_probs(k, z, lower, frame_mask, train)
        logps.append(lp)
        lowers.append(lower)
        if k + 1 < model.num_heads:
            pred = argmax_lowest(lp.detach(), dim=-2)
            gt = bins[:, k]
            use_pred = gt < 0
            if sampling_prob > 0:
                use_pred = use_pred | (torch.rand(gt.shape, generator=generator) < sampling_prob)
            lower = torch.where(use_pred, pred, gt)
    return torch.stack(logps, 1), torch.stack(lowers, 1)


def smoothed_targets(bins: torch.Tensor, lower: torch.Tensor, num_bins: int, epsilon: float):
    """Label-smoothed targets restricted to the rows each head may predict.

    Returns ``(targets (B, K, D, T), include (B, K, T))``; a column is
    excluded when unlabelled or when its label row is not admissible.
    """
    B, K, T = bins.shape
    allowed = torch.stack([allowed_rows(lower[:, k], num_bins, k, K) for k in range(K)], 1)
    labelled = bins >= 0
    onehot = torch.zeros(B, K, num_bins, T)
    onehot.scatter_(2, bins.clamp(min=0).unsqueeze(2), 1.0)
    onehot = onehot * labelled.unsqueeze(2)
    hit = (onehot * allowed).sum(2) > 0
    include = labelled & hit
    tgt = ((1 - epsilon) * onehot + epsilon / num_bins) * allowed
    tgt = tgt / tgt.sum(2, keepdim=True).clamp(min=1e-12)
    return tgt * include.unsqueeze(2), include


def batch_loss(model: FormantModel, batch: Batch, cfg: TrainConfig, train: bool = True,
               sampling_prob: float = 0.0, generator=None) -> torch.Tensor:
    logp, lower = teacher_forced_forward(model, batch.x, batch.bins, batch.frame_mask, train, sampling_prob, generator)
    targets, include = smoothed_targets(batch.bins, lower, model.num_bins, cfg.smoothing_epsilon)
    return cross_entropy(logp, targets, include)


@torch.no_grad()
def predict_bins(model: FormantModel, batch: Batch) -> torch.Tensor:
    z = model.encode(batch.x, batch.frame_mask, train=False)
    return model.decode_greedy(z, batch.frame_mask)[0]


def probe_mae(model: FormantModel, examples: list[Example], bin_spec: BinSpec, batch_size: int = 16) -> list[float]:
    """Per-formant frame MAE in Hz over labelled frames, unaugmented."""
    if not examples:
        return [math.nan] * model.num_heads
    err = np.zeros(model.num_heads)
    cnt = np.zeros(model.num_heads)
    ordered = sorted(examples, key=lambda e: e.num_frames)
    for i in range(0, len(ordered), batch_size):
        batch = collate([(e.spec, e.bins) for e in ordered[i : i + batch_size]])
        pred = predict_bins(model, batch).numpy()
        gold = batch.bins.numpy()
        ok = gold >= 0
        err += (np.abs(pred - gold) * ok).sum(axis=(0, 2)) * bin_spec.bin_width
        cnt += ok.sum(axis=(0, 2))
    return [float(e / c) if c else math.nan for e, c in zip(err, cnt)]


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    probe_mae: list[float]

    def row(self) -> list:
        return [self.epoch, repr(self.lr), f"{self.train_loss:.6f}", *(f"{m:.3f}" for m in self.probe_mae)]


class Trainer:
    """Owns the model, optimiser and RNG state; the single writer of the parameters."""

    def __init__(self, model: FormantModel, cfg: TrainConfig = TrainConfig(), bin_spec: BinSpec = BinSpec()):
        self.model = model
        self.cfg = cfg
        self.bin_spec = bin_spec
        self.rng = np.random.default_rng(cfg.seed)
        # Dropout draws from torch's global RNG; keep a private copy of its
        # state so interleaved trainers stay reproducible.
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.torch_state = torch.get_rng_state()
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr)
        self.epoch = 0

    def sampling_prob(self, epoch: int) -> float:
        if not self.cfg.scheduled_sampling or not self.cfg.max_epochs:
            return 0.0
        return self.cfg.scheduled_sampling * min(1.0, epoch / self.cfg.max_epochs)

    def train_epoch(self, examples: list[Example], probe: list[Example] | None = None) -> EpochMetrics:
        if not examples:
            raise ValueError("empty training set")
        epoch = self.epoch
        lr = learning_rate(epoch, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        total, steps = 0.0, 0
        with torch.random.fork_rng(devices=[]):
            torch.set_rng_state(self.torch_state)
            for step, batch in enumerate(epoch_batches(examples, self.cfg, self.rng)):
                value = batch_loss(self.model, batch, self.cfg, True, self.sampling_prob(epoch), self.generator)
                if not torch.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss {value.item()} at epoch {epoch}, step {step} (lr {lr})")
                self.optimizer.zero_grad(set_to_none=True)
                value.backward()
                self.optimizer.step()
                total += value.item()
                steps += 1
            self.torch_state = torch.get_rng_state()
        maes = probe_mae(self.model, probe or [], self.bin_spec)
        self.epoch += 1
        return EpochMetrics(epoch, lr, total / steps, maes)

    def fit(self, examples, probe=None, epochs: int | None = None, out_dir=None, on_epoch=None):
        """Train until ``epochs`` (default cfg.max_epochs) epochs have run in total.

        With `out_dir`, appends to ``metrics.csv`` and writes
        ``checkpoint.pt`` every ``checkpoint_every`` epochs and at the end.
        """
        target = self.cfg.max_epochs if epochs is None else epochs
        out = Path(out_dir) if out_dir is not None else None
        history = []
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.csv"
            if not metrics_path.exists():
                with open(metrics_path, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)
        while self.epoch < target:
            m = self.train_epoch(examples, probe)
            history.append(m)
            log.info("epoch %d lr %.1e loss %.4f probe MAE %s", m.epoch, m.lr, m.train_loss,
                     " ".join(f"{v:.1f}" for v in m.probe_mae))
            if on_epoch is not None:
                on_epoch(m)
            if out is not None:
                with open(out / "metrics.csv", "a", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(m.row())
                if self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == target:
                    self.save(out / "checkpoint.pt")
        return history

    def state(self) -> dict:
        return {
            "epoch": self.epoch,
            "optimizer": self.optimizer.state_dict(),
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": self.torch_state,
            "generator": self.generator.get_state(),
            "train_config": dataclasses.asdict(self.cfg),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.bin_spec, {"trainer": self.state()})

    @classmethod
    def resume(cls, path, cfg: TrainConfig | None = None) -> "Trainer":
        model, spec, extra = load_checkpoint(path)
        state = extra.get("trainer")
        if state is None:
            raise ValueError(f"{path}: checkpoint carries no trainer state")
        cfg = cfg or TrainConfig(**state["train_config"])
        trainer = cls(model, cfg, spec)
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.rng.bit_generator.state = state["numpy_rng"]
        trainer.torch_state = state["torch_rng"]
        trainer.generator.set_state(state["generator"])
        trainer.epoch = int(state["epoch"])
        return trainer
