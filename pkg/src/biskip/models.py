"""Bi-Skip generator, its ablation baselines, and the WGAN critic."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

DOWNSCALE_FACTOR = 32  # 2 ** n_scales for the default 5-scale network


class ModelVariant(str, Enum):
    S = "S"                # plain skip net: no Res-Blocks, no deep skip tap
    BS_CR = "BS-cR"        # Res-Block body collapsed to a single conv
    BS_WO_R = "BS-w/o-R"   # Res-Blocks removed, deep skip tap kept
    BS = "BS"              # full Bi-Skip

    @classmethod
    def parse(cls, tag: str) -> "ModelVariant":
        norm = tag.strip().upper().replace("_", "-").replace("/", "-")
        table = {
            "S": cls.S,
            "BS-CR": cls.BS_CR,
            "BS-W-O-R": cls.BS_WO_R,
            "BS-WO-R": cls.BS_WO_R,
            "BS": cls.BS,
        }
        if norm not in table:
            raise ValueError(f"unknown model variant {tag!r}")
        return table[norm]

    @property
    def has_resblocks(self) -> bool:
        return self in (ModelVariant.BS, ModelVariant.BS_CR)

    @property
    def has_deep_skip(self) -> bool:
        return self is not ModelVariant.S


@dataclass
class GeneratorSpec:
    n_scales: int = 5
    channels_path: list[int] = field(default_factory=lambda: [32, 64, 128, 128, 128])
    channels_skip: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 64])
    resblocks_per_scale: int = 3
    variant: ModelVariant = ModelVariant.BS

    def validate(self) -> None:
        if len(self.channels_path) != self.n_scales:
            raise ValueError(
                f"channels_path has {len(self.channels_path)} entries, "
                f"expected n_scales={self.n_scales}"
            )
        if len(self.channels_skip) != self.n_scales:
            raise ValueError(
                f"channels_skip has {len(self.channels_skip)} entries, "
                f"expected n_scales={self.n_scales}"
            )
        if self.n_scales < 1 or self.resblocks_per_scale < 1:
            raise ValueError("n_scales and resblocks_per_scale must be >= 1")

    @property
    def divisor(self) -> int:
        return 2 ** self.n_scales

    def to_dict(self) -> dict:
        return {
            "n_scales": self.n_scales,
            "channels_path": list(self.channels_path),
            "channels_skip": list(self.channels_skip),
            "resblocks_per_scale": self.resblocks_per_scale,
            "variant": self.variant.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(
            n_scales=d["n_scales"],
            channels_path=list(d["channels_path"]),
            channels_skip=list(d["channels_skip"]),
            resblocks_per_scale=d["resblocks_per_scale"],
            variant=ModelVariant.parse(d["variant"]),
        )


def _conv_bn_relu(in_ch, out_ch, k, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=k // 2),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ResidualDown(nn.Module):
    """Downsampling block: pooled 1x1 projection plus strided 5x5 conv."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1)
        self.conv5 = nn.Conv2d(in_ch, out_ch, 5, stride=2, padding=2)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        pooled = self.proj(F.avg_pool2d(x, 2))
        return F.relu(self.bn(pooled + self.conv5(x)), inplace=True)


class ResBlock(nn.Module):
    """conv-norm-relu-conv-norm body with an identity skip.

    ``single_conv`` collapses the body to one conv-norm (the BS-cR ablation).
    """

    def __init__(self, ch, single_conv=False):
        super().__init__()
        if single_conv:
            self.body = nn.Sequential(
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.BatchNorm2d(ch),
            )
        else:
            self.body = nn.Sequential(
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
                nn.Conv2d(ch, ch, 3, padding=1),
                nn.BatchNorm2d(ch),
            )

    def forward(self, x):
        return x + self.body(x)


class EncoderScale(nn.Module):
    """One contracting-path scale with its shallow and deep skip taps."""

    def __init__(self, in_ch, out_ch, skip_ch, spec: GeneratorSpec):
        super().__init__()
        variant = spec.variant
        self.down = ResidualDown(in_ch, out_ch)
        self.conv3 = _conv_bn_relu(out_ch, out_ch, 3)
        if variant.has_resblocks:
            single = variant is ModelVariant.BS_CR
            self.resblocks = nn.Sequential(
                *[ResBlock(out_ch, single_conv=single) for _ in range(spec.resblocks_per_scale)]
            )
        else:
            self.resblocks = nn.Identity()
        # Skip taps stay norm-free: they are raw feature projections.
        self.shallow_tap = nn.Conv2d(out_ch, skip_ch, 1)
        self.deep_tap = nn.Conv2d(out_ch, skip_ch, 3, padding=1) if variant.has_deep_skip else None

    def forward(self, x):
        first = self.down(x)
        deep = self.resblocks(self.conv3(first))
        shallow_skip = self.shallow_tap(first)
        deep_skip = self.deep_tap(deep) if self.deep_tap is not None else None
        return deep, shallow_skip, deep_skip


class DecoderScale(nn.Module):
    """One expansive-path scale: upsample, concat skips, 3x3 then 1x1 conv."""

    def __init__(self, in_ch, out_ch, skip_ch, n_skips, upsample=True):
        super().__init__()
        if upsample:
            self.up = nn.Sequential(
                nn.ConvTranspose2d(in_ch, out_ch, 5, stride=2, padding=2, output_padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            )
        else:
            self.up = None
            out_ch = in_ch if out_ch is None else out_ch
        cat_ch = (out_ch if upsample else in_ch) + n_skips * skip_ch
        self.conv3 = _conv_bn_relu(cat_ch, out_ch, 3)
        self.conv1 = _conv_bn_relu(out_ch, out_ch, 1)

    def forward(self, x, skips):
        if self.up is not None:
            x = self.up(x)
        feats = [x] + [s for s in skips if s is not None]
        return self.conv1(self.conv3(torch.cat(feats, dim=1)))


class BiSkipGenerator(nn.Module):
    """Encoder-decoder with per-scale shallow and deep skip branches.

    Input and output are (N, 3, H, W) in [-1, 1] with H, W divisible by
    ``2 ** spec.n_scales``. The network predicts a residual which is added
    to the input and clamped back to [-1, 1].
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        ch = spec.channels_path
        sk = spec.channels_skip
        n_skips = 2 if spec.variant.has_deep_skip else 1

        enc = []
        in_ch = 3
        for i in range(spec.n_scales):
            enc.append(EncoderScale(in_ch, ch[i], sk[i], spec))
            in_ch = ch[i]
        self.encoder = nn.ModuleList(enc)

        dec = []
        for i in reversed(range(spec.n_scales)):
            deepest = i == spec.n_scales - 1
            in_c = ch[i] if deepest else ch[i + 1]
            dec.append(DecoderScale(in_c, ch[i], sk[i], n_skips, upsample=not deepest))
        self.decoder = nn.ModuleList(dec)

        self.final_up = nn.Sequential(
            nn.ConvTranspose2d(ch[0], ch[0], 5, stride=2, padding=2, output_padding=1),
            nn.BatchNorm2d(ch[0]),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch[0], ch[0], 3, padding=1),
            nn.BatchNorm2d(ch[0]),
            nn.ReLU(inplace=True),
        )
        # Last layer carries the residual output: no norm, no activation.
        self.output_conv = nn.Conv2d(ch[0], 3, 1)

    def residual(self, x):
        _check_dims(x, self.spec.divisor)
        skips = []
        h = x
        for scale in self.encoder:
            h, shallow, deep = scale(h)
            skips.append((shallow, deep))
        for stage, (shallow, deep) in zip(self.decoder, reversed(skips)):
            h = stage(h, (shallow, deep))
        return self.output_conv(self.final_up(h))

    def forward(self, x):
        return torch.clamp(x + self.residual(x), -1.0, 1.0)


class Critic(nn.Module):
    """Strided conv stack scoring realness as one unbounded scalar per image."""

    CHANNELS = (64, 128, 256, 512)

    def __init__(self):
        super().__init__()
        layers = []
        in_ch = 3
        for out_ch in self.CHANNELS:
            layers += [
                nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            in_ch = out_ch
        layers.append(nn.Conv2d(in_ch, 1, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # Global mean keeps the critic fully convolutional across input sizes.
        return self.net(x).mean(dim=(1, 2, 3))


def _check_dims(x: torch.Tensor, divisor: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    if h % divisor or w % divisor:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by {divisor}")


def _xavier_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_generator(spec: GeneratorSpec | None = None, seed: int = 0) -> BiSkipGenerator:
    """Construct a generator with seeded Xavier-initialized weights."""
    spec = spec or GeneratorSpec()
    spec.validate()
    torch.manual_seed(seed)
    g = BiSkipGenerator(spec)
    _xavier_init(g)
    return g


def build_critic(seed: int = 0) -> Critic:
    torch.manual_seed(seed)
    d = Critic()
    _xavier_init(d)
    return d


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_hash(model: nn.Module) -> int:
    """Order-stable hash of all parameter values, for isolation checks."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return int.from_bytes(h.digest()[:8], "big")


def save_checkpoint(path, generator: BiSkipGenerator, critic: Critic | None = None,
                    header: dict | None = None, optimizer_state: dict | None = None) -> None:
    """Write a checkpoint archive: named arrays plus a JSON header."""
    header = dict(header or {})
    header.setdefault("spec", generator.spec.to_dict())
    header.setdefault("variant", generator.spec.variant.value)
    payload = {
        "header_json": json.dumps(header, sort_keys=True),
        "generator": generator.state_dict(),
    }
    if critic is not None:
        payload["critic"] = critic.state_dict()
    if optimizer_state is not None:
        payload["optimizer"] = optimizer_state
    torch.save(payload, path)


def load_checkpoint(path):
    """Load a checkpoint; returns (generator, critic_or_None, header, optimizer_state)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    header = json.loads(payload["header_json"])
    spec = GeneratorSpec.from_dict(header["spec"])
    g = BiSkipGenerator(spec)
    g.load_state_dict(payload["generator"])
    d = None
    if "critic" in payload:
        d = Critic()
        d.load_state_dict(payload["critic"])
    return g, d, header, payload.get("optimizer")
