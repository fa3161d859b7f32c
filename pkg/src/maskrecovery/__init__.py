"""Masked-face recovery through a fixed style-based generator."""
from .encoder import EncoderParams, EncoderSpec, build_encoder, encode, initialize_from
from .evaluation import EvalReport, auc, build_trials, evaluate, psnr, ssim
from .generator import Generator, GeneratorSpec, build_generator, generate
from .losses import (LossWeights, baseline_loss, identity_loss, latent_reconstruction_loss, perceptual_loss,
                     periorbital_loss, reconstruction_loss, unmasking_loss)
from .training import (Checkpoint, cascade_train, estimate_unmasked_latent, finetune_rmfrd, train_baseline,
                       train_unmasking)

__all__ = [
    "EncoderParams", "EncoderSpec", "build_encoder", "encode", "initialize_from",
    "EvalReport", "auc", "build_trials", "evaluate", "psnr", "ssim",
    "Generator", "GeneratorSpec", "build_generator", "generate",
    "LossWeights", "baseline_loss", "identity_loss", "latent_reconstruction_loss", "perceptual_loss",
    "periorbital_loss", "reconstruction_loss", "unmasking_loss",
    "Checkpoint", "cascade_train", "estimate_unmasked_latent", "finetune_rmfrd", "train_baseline",
    "train_unmasking",
]
