"""Losses, metrics, Adam and the training stages."""
from .adam import OptState, adam_step
from .config import LossWeights, TrainConfig
from .metrics import dssim, psnr, ssim
from .morphology import mask_morphology

__all__ = ["OptState", "adam_step", "LossWeights", "TrainConfig", "dssim", "psnr", "ssim", "mask_morphology"]
