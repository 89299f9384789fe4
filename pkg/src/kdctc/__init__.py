"""Shared-weight local/global self-distillation for texture classification
with very few labelled images."""

from .backbone import build_model, load_checkpoint, save_checkpoint
from .data_manifest import (
    DatasetIndex,
    SplitManifest,
    read_manifest,
    sample_low_data,
    scan_dataset,
    stratified_split,
    subsample_balanced,
    write_manifest,
)
from .objectives import LossConfig, cross_entropy, distillation_loss, focal_loss, total_loss
from .trainer import TrainConfig, train, train_step

__version__ = "0.1.0"
