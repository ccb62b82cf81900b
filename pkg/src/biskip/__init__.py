"""Bi-Skip motion deblurring toolkit with self-paced adversarial training."""

__version__ = "0.1.0"

from .models import (
    BiSkipGenerator,
    Critic,
    GeneratorSpec,
    ModelVariant,
    build_critic,
    build_generator,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    PerceptualExtractor,
    adversarial_loss,
    bilevel_loss,
    content_loss,
    gradient_penalty,
    perceptual_loss,
    pixel_loss,
    total_loss,
)
from .selfpaced import SelfPacedState, dynamic_q, optimal_weight, regularizer_value, update_state
from .trainer import Scheme, TrainConfig, TrainReport, fit_deep_prior, lr_at, train
from .data import ImagePair, MotionKernel, generate_motion_kernel, load_paired_dataset, random_crop_pair, synth_blur
from .metrics import EvalReport, evaluate, msssim, psnr, saliency_map, ssim
