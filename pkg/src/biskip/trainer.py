"""Self-paced adversarial training loop and the deep-prior fitting experiment."""

from __future__ import annotations

import json
import math
import random
import re
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from . import selfpaced
from .data import ImagePair, random_crop_pair
from .losses import (
    LossBreakdown,
    LossWeights,
    PerceptualExtractor,
    adversarial_loss,
    bilevel_loss,
    gradient_penalty,
    perceptual_loss,
    pixel_loss,
)
from .models import (
    Critic,
    GeneratorSpec,
    ModelVariant,
    build_critic,
    build_generator,
    save_checkpoint,
)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic state dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


_SCHEME_RE = re.compile(r"^(S)?(A)?([12])?(P)?$")


@dataclass(frozen=True)
class Scheme:
    """Loss-scheme flags, parsed from Table-style shorthand like 'SA1P'."""

    selfpaced: bool = False
    adversarial: bool = False
    pixel_norm: int | None = 1   # 1, 2, or None when no pixel term
    perceptual: bool = False

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        m = _SCHEME_RE.match(text.strip())
        if not m:
            raise ValueError(f"cannot parse scheme {text!r}")
        sp, adv, pix, perc = m.groups()
        scheme = cls(
            selfpaced=sp is not None,
            adversarial=adv is not None,
            pixel_norm=int(pix) if pix else None,
            perceptual=perc is not None,
        )
        scheme.validate()
        return scheme

    def validate(self) -> None:
        if not self.has_content:
            if self.adversarial:
                raise ValueError("adversarial scheme needs at least one content term")
            raise ValueError("scheme must name at least one loss term")

    @property
    def has_content(self) -> bool:
        return self.pixel_norm is not None or self.perceptual

    def __str__(self) -> str:
        return (("S" if self.selfpaced else "")
                + ("A" if self.adversarial else "")
                + (str(self.pixel_norm) if self.pixel_norm else "")
                + ("P" if self.perceptual else ""))


@dataclass
class TrainConfig:
    variant: ModelVariant = ModelVariant.BS
    scheme: Scheme = field(default_factory=lambda: Scheme.parse("SA1P"))
    weights: LossWeights = field(default_factory=LossWeights)
    lr0: float = 1e-4
    d_g_ratio: int = 2
    epochs: int = 300
    crop: int = 256
    batch: int = 1
    seed_init: int = 0
    seed_data: int = 0
    seed_alpha: int = 0
    perceptual_backend: str = "seeded_random_cnn"
    checkpoint_every: int = 10
    spec: GeneratorSpec | None = None

    def validate(self) -> None:
        self.scheme.validate()
        self.weights.validate()
        if self.epochs < 2:
            raise ValueError("epochs must be >= 2")
        if self.d_g_ratio < 1:
            raise ValueError("d_g_ratio must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")

    def generator_spec(self) -> GeneratorSpec:
        spec = self.spec or GeneratorSpec()
        spec.variant = self.variant
        return spec

    def run_tag(self) -> str:
        return f"{self.scheme}-{self.variant.value}"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "scheme": str(self.scheme),
            "gamma1": self.weights.gamma1,
            "gamma2": self.weights.gamma2,
            "beta": self.weights.beta,
            "lr0": self.lr0,
            "d_g_ratio": self.d_g_ratio,
            "epochs": self.epochs,
            "crop": self.crop,
            "batch": self.batch,
            "seed_init": self.seed_init,
            "seed_data": self.seed_data,
            "seed_alpha": self.seed_alpha,
            "perceptual_backend": self.perceptual_backend,
            "checkpoint_every": self.checkpoint_every,
        }


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.epochs.append(record)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(rec, sort_keys=True) for rec in self.epochs) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainReport":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return cls(epochs=records)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Constant lr0 for the first half of training, then linear decay to 0."""
    total = config.epochs
    if not 1 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [1, {total}]")
    half = total / 2.0
    if epoch <= half:
        return config.lr0
    return config.lr0 * (total - epoch) / (total - half)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(value: torch.Tensor, what: str, diagnostics: dict) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite {what}: {value}", diagnostics)


@contextmanager
def _frozen_norm_stats(module: torch.nn.Module):
    """Disable running-stat updates in batch-norm layers within the block.

    Batch statistics are still used for normalization in training mode, so
    forward outputs are unchanged; only the buffer updates are suppressed.
    """
    norms = [m for m in module.modules()
             if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)
             and m.track_running_stats]
    for m in norms:
        m.track_running_stats = False
    try:
        yield
    finally:
        for m in norms:
            m.track_running_stats = True


def critic_step(critic, generator, batch, v, weights: LossWeights, opt,
                alpha_generator: torch.Generator,
                diagnostics: dict | None = None) -> LossBreakdown:
    """One critic update: minimize -L_adv + gradient penalty. G untouched."""
    reals = [pair.sharp for pair in batch]
    with torch.no_grad(), _frozen_norm_stats(generator):
        # zero-weight pairs contribute nothing to either loss term, so a
        # placeholder stands in for the fake and the generator is never run
        fakes = [generator(pair.blurred.unsqueeze(0)).squeeze(0)
                 if float(vi) > 0 else pair.blurred
                 for pair, vi in zip(batch, v)]
    adv = adversarial_loss(critic, reals, fakes, v)
    penalty = gradient_penalty(critic, reals, fakes, v, weights.beta,
                               generator=alpha_generator)
    loss = -adv + penalty
    _check_finite(loss, "critic loss", diagnostics or {})
    if any(float(vi) > 0 for vi in v):
        opt.zero_grad()
        loss.backward()
        opt.step()
    return LossBreakdown(adversarial=float(adv.detach()),
                         penalty=float(penalty.detach()) if penalty.requires_grad else float(penalty),
                         total=float(loss.detach()))


def generator_step(generator, critic, batch, v, weights: LossWeights, opt,
                   scheme: Scheme, extractor,
                   diagnostics: dict | None = None) -> LossBreakdown:
    """One generator update: minimize -E[v D(G(x))] + content. D untouched."""
    pix_sum = perc_sum = 0.0
    per_sample = []
    cont = None
    adv_term = None
    for pair, vi in zip(batch, v):
        vi = float(vi)
        if vi == 0.0:
            per_sample.append(0.0)
            continue
        fake = generator(pair.blurred.unsqueeze(0)).squeeze(0)
        if scheme.has_content:
            li = fake.new_zeros(())
            if scheme.pixel_norm is not None:
                pix = pixel_loss(pair.sharp, fake, norm=scheme.pixel_norm)
                li = li + weights.gamma1 * pix
                pix_sum += float(pix.detach())
            if scheme.perceptual:
                perc = perceptual_loss(extractor, pair.sharp, fake)
                li = li + weights.gamma2 * perc
                perc_sum += float(perc.detach())
            per_sample.append(float(li.detach()))
            term = vi * li
            cont = term if cont is None else cont + term
        if scheme.adversarial:
            score = critic(fake.unsqueeze(0)).squeeze(0)
            term = -vi * score
            adv_term = term if adv_term is None else adv_term + term
    n = len(batch)
    loss = torch.zeros(())
    if adv_term is not None:
        loss = loss + adv_term / n
    if cont is not None:
        loss = loss + cont / n
    _check_finite(loss, "generator loss", diagnostics or {})
    if any(float(vi) > 0 for vi in v):
        opt.zero_grad()
        loss.backward()
        opt.step()
    return LossBreakdown(
        pixel=pix_sum / n,
        perceptual=perc_sum / n,
        content=float(cont.detach()) if cont is not None else 0.0,
        adversarial=-float(adv_term.detach()) if adv_term is not None else 0.0,
        total=float(loss.detach()),
        per_sample_bilevel=per_sample,
    )


def _sample_bilevel(generator, pair: ImagePair, scheme: Scheme, extractor,
                    weights: LossWeights) -> float:
    with torch.no_grad(), _frozen_norm_stats(generator):
        fake = generator(pair.blurred.unsqueeze(0)).squeeze(0)
        li = bilevel_loss(extractor, pair.sharp, fake, weights,
                          pixel_norm=scheme.pixel_norm or 1,
                          use_pixel=scheme.pixel_norm is not None,
                          use_perceptual=scheme.perceptual)
    return float(li)


def train(config: TrainConfig, dataset: list[ImagePair],
          run_dir=None) -> TrainReport:
    """Run the full self-paced alternating training loop over the dataset."""
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    generator = build_generator(config.generator_spec(), config.seed_init)
    critic = build_critic(config.seed_init + 1) if config.scheme.adversarial else None
    extractor = None
    if config.scheme.perceptual:
        extractor = PerceptualExtractor(backend=config.perceptual_backend,
                                        seed=config.seed_init + 2)
    g_opt = torch.optim.Adam(generator.parameters(), lr=config.lr0,
                             betas=(0.9, 0.999), eps=1e-8)
    d_opt = (torch.optim.Adam(critic.parameters(), lr=config.lr0,
                              betas=(0.9, 0.999), eps=1e-8)
             if critic is not None else None)
    alpha_gen = torch.Generator()
    alpha_gen.manual_seed(config.seed_alpha)

    state = selfpaced.SelfPacedState(t=1, total=config.epochs)
    report = TrainReport()
    scheme = config.scheme

    for epoch in range(1, config.epochs + 1):
        lr = lr_at(epoch, config)
        _set_lr(g_opt, lr)
        if d_opt is not None:
            _set_lr(d_opt, lr)
        q = state.q() if scheme.selfpaced else None

        order = list(range(len(dataset)))
        random.Random(config.seed_data * 1_000_003 + epoch).shuffle(order)

        epoch_losses: dict[str, float] = {}
        admitted = 0
        sums = {"pixel": 0.0, "perceptual": 0.0, "content": 0.0,
                "adversarial": 0.0, "penalty": 0.0, "total": 0.0}
        n_steps = 0
        for idx in order:
            pair = dataset[idx]
            _, h, w = pair.sharp.shape
            if h > config.crop or w > config.crop:
                pair = random_crop_pair(pair, config.crop,
                                        seed=config.seed_data * 100003 + epoch)
            li = _sample_bilevel(generator, pair, scheme, extractor, config.weights)
            epoch_losses[pair.id] = li
            vi = state.weight_for(li) if scheme.selfpaced else 1.0
            if vi > 0:
                admitted += 1
            else:
                continue
            diagnostics = {"epoch": epoch, "sample": pair.id, "loss": li}
            if critic is not None:
                for _ in range(config.d_g_ratio):
                    d_break = critic_step(critic, generator, [pair], [vi],
                                          config.weights, d_opt, alpha_gen,
                                          diagnostics)
                sums["penalty"] += d_break.penalty
            g_break = generator_step(generator, critic, [pair], [vi],
                                     config.weights, g_opt, scheme, extractor,
                                     diagnostics)
            sums["pixel"] += g_break.pixel
            sums["perceptual"] += g_break.perceptual
            sums["content"] += g_break.content
            sums["adversarial"] += g_break.adversarial
            sums["total"] += g_break.total
            n_steps += 1

        denom = max(n_steps, 1)
        record = {
            "epoch": epoch,
            "lr": lr,
            "lambda": "inf" if state.lam == selfpaced.INF else state.lam,
            "q": q,
            "admitted_fraction": admitted / len(dataset),
            "mean_bilevel": sum(epoch_losses.values()) / len(epoch_losses),
            "mean_pixel": sums["pixel"] / denom,
            "mean_perceptual": sums["perceptual"] / denom,
            "mean_content": sums["content"] / denom,
            "mean_adversarial": sums["adversarial"] / denom,
            "mean_penalty": sums["penalty"] / denom,
            "mean_total": sums["total"] / denom,
        }
        report.append(record)

        if scheme.selfpaced:
            state = selfpaced.update_state(state, epoch_losses)
        else:
            state = selfpaced.SelfPacedState(t=min(epoch + 1, config.epochs),
                                             total=config.epochs)

        if run_dir is not None and (
                epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            ckpt = run_dir / f"checkpoint_{epoch:05d}.pt"
            save_checkpoint(ckpt, generator, critic,
                            header={
                                "epoch": epoch,
                                "seed": config.seed_init,
                                "scheme": str(scheme),
                                "selfpaced_state": state.to_header(),
                                "config": config.to_dict(),
                            },
                            optimizer_state={"generator": g_opt.state_dict()})
            report.checkpoints.append(str(ckpt))

    if run_dir is not None:
        report.write(run_dir / "report.jsonl")
    return report


def fit_deep_prior(target: torch.Tensor, source: torch.Tensor | None = None,
                   iters: int = 500, seed: int = 0,
                   variant: ModelVariant = ModelVariant.BS,
                   lr: float = 1e-3, snapshots: tuple[int, ...] = ()):
    """Fit a fresh generator to reproduce a single target image.

    ``source`` defaults to seeded uniform noise; pass a blurred image to run
    the restoration variant. Returns (output, mse_trace, snapshot_images).
    """
    if target.dim() != 3:
        raise ValueError("target must be CxHxW")
    _, h, w = target.shape
    spec = GeneratorSpec(variant=variant)
    if h % spec.divisor or w % spec.divisor:
        raise ValueError(f"target dims {h}x{w} must be divisible by {spec.divisor}")
    generator = build_generator(spec, seed)
    if source is None:
        gen = torch.Generator().manual_seed(seed)
        source = torch.rand(target.shape, generator=gen) * 2.0 - 1.0
    src = source.unsqueeze(0)
    tgt = target.unsqueeze(0)
    opt = torch.optim.Adam(generator.parameters(), lr=lr, betas=(0.9, 0.999))
    trace = []
    snaps = {}
    out = None
    for it in range(1, iters + 1):
        out = generator(src)
        loss = F.mse_loss(out, tgt)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite deep-prior loss at iter {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        if it in snapshots:
            snaps[it] = out.detach().squeeze(0).clone()
    return out.detach().squeeze(0), trace, snaps
