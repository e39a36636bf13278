"""Hierarchical cycle decoder for motor-imagery EEG with per-cycle reliability
estimation and adaptive halting."""
from .data import SynthConfig, TrialSet, load_trialset, loso_splits, save_trialset, synth_generate
from .estimator import CycleDecoderClassifier
from .model import Decoder, DecoderConfig
from .report import summarize_accuracy
from .train import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "Checkpoint", "CycleDecoderClassifier", "Decoder", "DecoderConfig", "SynthConfig",
    "TrialSet", "load_checkpoint", "load_trialset", "loso_splits", "save_checkpoint",
    "save_trialset", "summarize_accuracy", "synth_generate",
]
__version__ = "0.1.0"
