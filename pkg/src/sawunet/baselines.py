"""Classical baselines: VCA and the attention-free three-layer autoencoder."""
from __future__ import annotations

from .data import HsiCube
from .model import ModelConfig, TrainResult, train
from .vca import VcaResult, estimate_snr, vca

__all__ = ["VcaResult", "estimate_snr", "vca", "baseline_ae_train"]


def baseline_ae_train(cube: HsiCube, config: ModelConfig) -> TrainResult:
    """Same schedule, loss and initialization as the full model, minus the attention branch.

    Each pixel is encoded on its own, l1-normalized and decoded.
    """
    return train(cube, config, attention=False)
