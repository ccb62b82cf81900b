"""Bi-level content loss, self-paced adversarial loss, and gradient penalty."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .models import Critic, _xavier_init


@dataclass
class LossWeights:
    gamma1: float = 100.0   # pixel-loss weight
    gamma2: float = 0.1     # perceptual-loss weight
    beta: float = 10.0      # gradient-penalty weight

    def validate(self) -> None:
        for name in ("gamma1", "gamma2", "beta"):
            v = getattr(self, name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    pixel: float = 0.0
    perceptual: float = 0.0
    content: float = 0.0
    adversarial: float = 0.0
    penalty: float = 0.0
    total: float = 0.0
    per_sample_bilevel: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pixel": self.pixel,
            "perceptual": self.perceptual,
            "content": self.content,
            "adversarial": self.adversarial,
            "penalty": self.penalty,
            "total": self.total,
        }


class PerceptualExtractor(nn.Module):
    """Feature extractor for the perceptual loss term.

    Two backends: ``pretrained_vgg19`` (taps the last activation of the
    third conv block) and ``seeded_random_cnn``, a small fixed random conv
    stack so the loss is testable without pretrained weights.
    """

    def __init__(self, backend: str = "seeded_random_cnn", seed: int = 0,
                 layer_tag: str = "relu3_4"):
        super().__init__()
        self.backend = backend
        self.layer_tag = layer_tag
        self.seed = seed
        if backend == "seeded_random_cnn":
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
            )
            _xavier_init(self.features)
        elif backend == "pretrained_vgg19":
            from torchvision.models import VGG19_Weights, vgg19

            vgg = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
            # features[17] is the ReLU closing the third conv block
            self.features = vgg.features[:18]
        else:
            raise ValueError(f"unknown perceptual backend {backend!r}")
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.features.eval()

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return self.features(x)


class ZeroExtractor(nn.Module):
    """Extractor whose features are identically zero (disables the term)."""

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return torch.zeros(x.shape[0], 1, 1, 1, device=x.device, dtype=x.dtype)


def _check_same_shape(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def pixel_loss(x: torch.Tensor, x_hat: torch.Tensor, norm: int = 1) -> torch.Tensor:
    """Mean per-entry pixel distance; L1 by default, L2 with norm=2."""
    _check_same_shape(x, x_hat)
    diff = x - x_hat
    if norm == 1:
        return diff.abs().mean()
    if norm == 2:
        return diff.pow(2).mean()
    raise ValueError(f"norm must be 1 or 2, got {norm}")


def perceptual_loss(extractor: nn.Module, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared feature distance under the given extractor."""
    _check_same_shape(x, x_hat)
    fx = extractor(x)
    fy = extractor(x_hat)
    return (fx - fy).pow(2).mean()


def bilevel_loss(extractor: nn.Module, x: torch.Tensor, x_hat: torch.Tensor,
                 weights: LossWeights, pixel_norm: int = 1,
                 use_pixel: bool = True, use_perceptual: bool = True) -> torch.Tensor:
    """Per-sample content loss: gamma1 * pixel + gamma2 * perceptual.

    This scalar is the l_i consumed by the self-paced weight solver. The
    use_* flags let training schemes drop either term.
    """
    total = x.new_zeros(())
    if use_pixel:
        total = total + weights.gamma1 * pixel_loss(x, x_hat, norm=pixel_norm)
    if use_perceptual:
        total = total + weights.gamma2 * perceptual_loss(extractor, x, x_hat)
    return total


def _check_weights(v):
    for vi in v:
        if not (0.0 <= float(vi) <= 1.0):
            raise ValueError(f"self-paced weight {vi} outside [0, 1]")


def content_loss(pairs, v, extractor, weights: LossWeights,
                 pixel_norm: int = 1, use_pixel: bool = True,
                 use_perceptual: bool = True) -> torch.Tensor:
    """Weighted sum of per-sample bi-level losses."""
    if len(pairs) != len(v):
        raise ValueError(f"{len(pairs)} pairs but {len(v)} weights")
    _check_weights(v)
    total = None
    for (x, x_hat), vi in zip(pairs, v):
        term = float(vi) * bilevel_loss(extractor, x, x_hat, weights,
                                        pixel_norm=pixel_norm,
                                        use_pixel=use_pixel,
                                        use_perceptual=use_perceptual)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def adversarial_loss(critic: Critic, reals, fakes, v) -> torch.Tensor:
    """Weighted Wasserstein gap: mean_i v_i D(x_i) - mean_i v_i D(x~_i).

    The weight scales the per-sample critic score; the critic itself never
    sees v.
    """
    if len(reals) != len(fakes) or len(reals) != len(v):
        raise ValueError("reals, fakes and v must have equal lengths")
    _check_weights(v)
    vt = torch.as_tensor([float(x) for x in v], dtype=torch.float32)
    real_scores = critic(torch.stack([r for r in reals]))
    fake_scores = critic(torch.stack([f for f in fakes]))
    return (vt * real_scores).mean() - (vt * fake_scores).mean()


def gradient_penalty(critic: Critic, reals, fakes, v, beta: float,
                     seed: int | None = None,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Weighted WGAN-GP term on per-sample random interpolates."""
    if len(reals) != len(fakes) or len(reals) != len(v):
        raise ValueError("reals, fakes and v must have equal lengths")
    _check_weights(v)
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if beta == 0:
        return torch.zeros(())
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    terms = []
    for xr, xf, vi in zip(reals, fakes, v):
        alpha = torch.rand((), generator=generator)
        x_mid = (alpha * xr + (1 - alpha) * xf).detach().unsqueeze(0)
        x_mid.requires_grad_(True)
        score = critic(x_mid).sum()
        (grad,) = torch.autograd.grad(score, x_mid, create_graph=True)
        gnorm = grad.flatten().norm(2)
        terms.append(float(vi) * (gnorm - 1.0) ** 2)
    return beta * torch.stack(terms).mean()


def total_loss(adv: float | torch.Tensor, cont: float | torch.Tensor, n: int):
    """Combine adversarial and content terms: adv + cont / n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return adv + cont / n
