"""Shared convolutional encoder and per-formant decoder heads.

Tensors follow (batch, channels, freq, time) for the encoder and
(batch, freq, time) for the latent map and head outputs, with the frequency
axis acting as the channel axis of the 1-D decoder convolutions.

Every forward method takes an explicit ``train`` flag; module train/eval
state is never consulted.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .quantizer import BinSpec

CHECKPOINT_FORMAT = "heatformant-checkpoint/1"
# Logit value for rows a head may not predict; exp() underflows to exactly 0.
_MASKED_LOGIT = -1e30


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    channel_plan: tuple[int, ...] = (1, 16, 32, 64, 128, 128, 64, 32, 1)
    kernel: int = 3
    dropout_rate: float = 0.2
    uses_batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_plan", tuple(int(c) for c in self.channel_plan))
        if len(self.channel_plan) < 2 or self.channel_plan[0] != 1 or self.channel_plan[-1] != 1:
            raise ValueError("encoder channel plan must start and end with 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("encoder kernel must be odd so that shapes are preserved")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class DecoderConfig:
    bottleneck_plan: tuple[int, ...] = (257, 64, 257)
    time_kernel: int = 3
    bias_enabled: bool = False
    num_heads: int = 3
    dropout_rate: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "bottleneck_plan", tuple(int(c) for c in self.bottleneck_plan))
        plan = self.bottleneck_plan
        if len(plan) < 2 or plan[0] != plan[-1]:
            raise ValueError("bottleneck must start and end at num_bins")
        if self.bias_enabled:
            raise ValueError("decoder heads must not carry bias terms")
        if self.time_kernel < 1 or self.time_kernel % 2 == 0:
            raise ValueError("time_kernel must be odd")
        if self.num_heads < 1:
            raise ValueError("need at least one head")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def num_bins(self) -> int:
        return self.bottleneck_plan[0]


class MaskedBatchNorm(nn.Module):
    """Batch norm whose statistics ignore padded positions.

    ``mask`` is a float tensor broadcastable to the input with 1 on real
    frames and 0 on padding.
    """

    def __init__(self, num_features: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        if affine:
            self.weight = nn.Parameter(torch.ones(num_features))
            self.bias = nn.Parameter(torch.zeros(num_features))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None, train: bool) -> torch.Tensor:
        if not train or mask is None:
            return F.batch_norm(
                x, self.running_mean, self.running_var, self.weight, self.bias,
                training=train, momentum=self.momentum, eps=self.eps,
            )
        shape = (1, -1) + (1,) * (x.dim() - 2)
        dims = [d for d in range(x.dim()) if d != 1]
        mask = mask.expand_as(x[:, :1])
        count = mask.sum() * 1.0
        mean = (x * mask).sum(dims) / count
        centred = (x - mean.view(shape)) * mask
        var = (centred * centred).sum(dims) / count
        with torch.no_grad():
            unbiased = var * count / torch.clamp(count - 1, min=1.0)
            self.running_mean.lerp_(mean.detach(), self.momentum)
            self.running_var.lerp_(unbiased.detach(), self.momentum)
        out = (x - mean.view(shape)) * torch.rsqrt(var.view(shape) + self.eps)
        if self.weight is not None:
            out = out * self.weight.view(shape) + self.bias.view(shape)
        return out


class EncoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, last: bool, cfg: EncoderConfig):
        super().__init__()
        use_bn = cfg.uses_batchnorm and not last
        self.conv = nn.Conv2d(c_in, c_out, kernel, padding=kernel // 2, bias=not use_bn)
        self.bn = MaskedBatchNorm(c_out) if use_bn else None
        self.proj = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else None
        self.last = last
        self.dropout_rate = cfg.dropout_rate

    def forward(self, x, mask, train: bool):
        h = self.conv(x)
        if not self.last:
            if self.bn is not None:
                h = self.bn(h, mask, train)
            h = F.relu(h)
            h = F.dropout(h, self.dropout_rate, training=train)
        h = h + (x if self.proj is None else self.proj(x))
        return h if mask is None else h * mask


class Encoder(nn.Module):
    """Shape-preserving residual 2-D CNN: (B, 1, D, T) -> (B, D, T)."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        plan = cfg.channel_plan
        self.num_blocks = len(plan) - 1
        for i, (c_in, c_out) in enumerate(zip(plan[:-1], plan[1:])):
            self.add_module(f"block{i}", EncoderBlock(c_in, c_out, cfg.kernel, i == self.num_blocks - 1, cfg))

    def forward(self, x: torch.Tensor, frame_mask: torch.Tensor | None = None, train: bool = False):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        mask = None if frame_mask is None else frame_mask[:, None, None, :].to(x.dtype)
        h = x.contiguous(memory_format=torch.channels_last)
        if mask is not None:
            h = h * mask
        for i in range(self.num_blocks):
            h = getattr(self, f"block{i}")(h, mask, train)
        return h[:, 0].contiguous()


class DecoderHead(nn.Module):
    """Bias-free temporal bottleneck over the frequency-as-channel latent map.

    Returns unnormalised scores (B, D, T); the residual adds the masked input
    back onto the bottleneck output.
    """

    def __init__(self, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        plan = cfg.bottleneck_plan
        self.num_layers = len(plan) - 1
        self.dropout_rate = cfg.dropout_rate
        for i, (c_in, c_out) in enumerate(zip(plan[:-1], plan[1:])):
            self.add_module(f"conv{i}", nn.Conv1d(c_in, c_out, cfg.time_kernel, padding=cfg.time_kernel // 2, bias=False))
            if i < self.num_layers - 1:
                self.add_module(f"bn{i}", MaskedBatchNorm(c_out, affine=False))

    def forward(self, z: torch.Tensor, frame_mask: torch.Tensor | None = None, train: bool = False):
        mask = None if frame_mask is None else frame_mask[:, None, :].to(z.dtype)
        h = z
        for i in range(self.num_layers):
            h = getattr(self, f"conv{i}")(h)
            if i < self.num_layers - 1:
                h = getattr(self, f"bn{i}")(h, mask, train)
                h = F.relu(h)
                h = F.dropout(h, self.dropout_rate, training=train)
                if mask is not None:
                    h = h * mask
        return z + h


def mask_lower(z: torch.Tensor, lower_bins: torch.Tensor) -> torch.Tensor:
    """Zero rows 0..lower_bins[t] (inclusive) of every column t.

    ``z`` is (..., D, T) and ``lower_bins`` (..., T); -1 leaves a column intact.
    """
    rows = torch.arange(z.shape[-2], device=z.device)
    keep = rows[:, None] > lower_bins.unsqueeze(-2)
    return z * keep.to(z.dtype)


def allowed_rows(lower_bins: torch.Tensor, num_bins: int, head: int, num_heads: int) -> torch.Tensor:
    """Rows head `head` may predict: above the lower formant and low enough
    to leave one free row for every head above it.

    Returns a (..., D, T) bool tensor. A column with no admissible row (only
    reachable when a ground-truth lower label sits at the top) admits the
    top reserved row so the column stays a valid distribution.
    """
    rows = torch.arange(num_bins, device=lower_bins.device)[:, None]
    top = num_bins - num_heads + head
    allowed = (rows > lower_bins.unsqueeze(-2)) & (rows <= top)
    empty = ~allowed.any(dim=-2, keepdim=True)
    return allowed | (empty & (rows == top))


class FormantModel(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig = EncoderConfig(), decoder_cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.encoder = Encoder(encoder_cfg)
        self.decoder = nn.Module()
        for k in range(decoder_cfg.num_heads):
            self.decoder.add_module(f"head{k + 1}", DecoderHead(decoder_cfg))

    @property
    def num_heads(self) -> int:
        return self.decoder_cfg.num_heads

    @property
    def num_bins(self) -> int:
        return self.decoder_cfg.num_bins

    def head(self, k: int) -> DecoderHead:
        return getattr(self.decoder, f"head{k + 1}")

    def encode(self, x, frame_mask=None, train: bool = False):
        return self.encoder(x, frame_mask, train)

    def head_log_probs(self, k: int, z: torch.Tensor, lower_bins: torch.Tensor, frame_mask=None, train: bool = False):
        """Mask `z` below `lower_bins`, run head `k` and normalise over frequency."""
        scores = self.head(k)(mask_lower(z, lower_bins), frame_mask, train)
        allowed = allowed_rows(lower_bins, self.num_bins, k, self.num_heads)
        scores = scores.masked_fill(~allowed, _MASKED_LOGIT)
        return F.log_softmax(scores, dim=-2)

    def decode_greedy(self, z: torch.Tensor, frame_mask=None):
        """Sequential argmax decoding; returns (bins (B, K, T), log_probs (B, K, D, T))."""
        B, D, T = z.shape
        lower = torch.full((B, T), -1, dtype=torch.long)
        bins, logps = [], []
        for k in range(self.num_heads):
            lp = self.head_log_probs(k, z, lower, frame_mask, train=False)
            b = argmax_lowest(lp, dim=-2)
            bins.append(b)
            logps.append(lp)
            lower = b
        return torch.stack(bins, 1), torch.stack(logps, 1)

    def parameter_inventory(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.named_parameters()}


def build_model(encoder_cfg: EncoderConfig = EncoderConfig(), decoder_cfg: DecoderConfig = DecoderConfig(),
                seed: int = 0) -> FormantModel:
    """Model with weights initialised from `seed`, leaving the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FormantModel(encoder_cfg, decoder_cfg)


def argmax_lowest(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Argmax along `dim` returning the lowest index among ties."""
    best = x.max(dim=dim, keepdim=True).values
    idx = torch.arange(x.shape[dim], device=x.device).view([-1 if d == (dim % x.dim()) else 1 for d in range(x.dim())])
    big = torch.full_like(idx, x.shape[dim])
    return torch.where(x == best, idx, big).min(dim=dim).values


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model: FormantModel, bin_spec: BinSpec, extra: dict | None = None) -> None:
    """Write a single-file checkpoint: named tensors plus the configs needed to rebuild."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder_config": asdict(model.encoder_cfg),
        "decoder_config": asdict(model.decoder_cfg),
        "bin_spec": asdict(bin_spec),
        "tensors": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[FormantModel, BinSpec, dict]:
    """Rebuild the model from a checkpoint, validating every tensor shape."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    enc = EncoderConfig(**payload["encoder_config"])
    dec = DecoderConfig(**payload["decoder_config"])
    spec = BinSpec(**payload["bin_spec"])
    if dec.num_bins != spec.num_bins:
        raise CheckpointError(f"decoder width {dec.num_bins} does not match {spec.num_bins} bins")
    model = FormantModel(enc, dec)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    found = {k: tuple(v.shape) for k, v in payload["tensors"].items()}
    problems = [f"missing tensor {k}" for k in expected if k not in found]
    problems += [f"unexpected tensor {k}" for k in found if k not in expected]
    problems += [
        f"shape mismatch for {k}: expected {expected[k]}, found {found[k]}"
        for k in expected
        if k in found and expected[k] != found[k]
    ]
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    model.load_state_dict(payload["tensors"])
    return model, spec, payload.get("extra", {})


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()
