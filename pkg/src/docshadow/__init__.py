"""Document shadow removal: mask-conditioned token remapping with
pixel-level refinement, plus training, synthetic data and evaluation."""

from .dataio import SynthConfig, Triplet, load_dataset, load_image, save_image
from .detection import load_mask, otsu_detect
from .metrics import levenshtein, psnr, rmse, ssim
from .objective import LossConfig
from .pipeline import (Checkpoint, Model, PipelineOutput, TrainConfig, infer,
                       load_checkpoint, save_checkpoint, train)

__all__ = [
    "SynthConfig", "Triplet", "load_dataset", "load_image", "save_image",
    "load_mask", "otsu_detect", "levenshtein", "psnr", "rmse", "ssim",
    "LossConfig", "Checkpoint", "Model", "PipelineOutput", "TrainConfig",
    "infer", "load_checkpoint", "save_checkpoint", "train",
]

__version__ = "0.1.0"
