"""Formant tracking with per-formant heatmap classifiers over a shared encoder."""

from .dsp import FrameGeometry, Spectrogram, Waveform, features, pre_emphasize, spectrogram, speed_up_by_two
from .inference import HeatmapSet, aggregate_heatmaps, track
from .model import DecoderConfig, EncoderConfig, FormantModel, build_model, load_checkpoint, save_checkpoint
from .quantizer import BinSpec, FormantTrack, dequantize, make_targets, quantize

__all__ = [
    "BinSpec",
    "DecoderConfig",
    "EncoderConfig",
    "FormantModel",
    "FormantTrack",
    "FrameGeometry",
    "HeatmapSet",
    "Spectrogram",
    "Waveform",
    "aggregate_heatmaps",
    "build_model",
    "dequantize",
    "features",
    "load_checkpoint",
    "make_targets",
    "pre_emphasize",
    "quantize",
    "save_checkpoint",
    "spectrogram",
    "speed_up_by_two",
    "track",
]

__version__ = "0.1.0"
