"""Hyperspectral unmixing with a spatial-attention weighted autoencoder.

Modules: ``tensor`` (reverse-mode autodiff and Adam), ``data`` (cube I/O,
windows, synthetic scenes), ``model`` (network, training, checkpoints),
``vca`` and ``baselines``, ``metrics``, ``experiments`` and ``cli``.
"""
from .data import GroundTruth, HsiCube, generate_synthetic, load_cube, save_cube
from .metrics import evaluate, match_endmembers
from .model import ModelConfig, infer_abundances, load_checkpoint, save_checkpoint, train
from .vca import vca

__version__ = "0.1.0"

__all__ = [
    "GroundTruth", "HsiCube", "ModelConfig", "evaluate", "generate_synthetic", "infer_abundances",
    "load_checkpoint", "load_cube", "match_endmembers", "save_checkpoint", "save_cube", "train", "vca",
]
