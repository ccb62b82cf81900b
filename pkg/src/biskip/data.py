"""Paired dataset loading, synthetic motion blur, cropping, range conversion."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def to_model_range(arr: np.ndarray) -> torch.Tensor:
    """uint8 HxWxC -> float32 CxHxW tensor in [-1, 1]."""
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    x = arr.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(x).permute(2, 0, 1).contiguous()


def from_model_range(x: torch.Tensor) -> np.ndarray:
    """float CxHxW in [-1, 1] -> uint8 HxWxC, rounding half-up."""
    arr = x.detach().cpu().clamp(-1.0, 1.0).permute(1, 2, 0).numpy()
    return np.floor((arr + 1.0) * 127.5 + 0.5).clip(0, 255).astype(np.uint8)


def load_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        return to_model_range(np.asarray(im.convert("RGB")))


def save_image(path, x: torch.Tensor) -> None:
    Image.fromarray(from_model_range(x)).save(path)


@dataclass
class ImagePair:
    sharp: torch.Tensor
    blurred: torch.Tensor
    id: str

    def __post_init__(self):
        if self.sharp.shape != self.blurred.shape:
            raise ValueError(
                f"pair {self.id!r}: sharp {tuple(self.sharp.shape)} vs "
                f"blurred {tuple(self.blurred.shape)}"
            )


class PairingError(ValueError):
    pass


def _index_images(folder: Path) -> dict[str, Path]:
    return {
        p.name: p
        for p in sorted(folder.iterdir())
        if p.suffix.lower() in IMAGE_EXTENSIONS
    }


def load_paired_dataset(root) -> list[ImagePair]:
    """Load blur/ and sharp/ subfolders, matching files by name."""
    root = Path(root)
    blur_dir = root / "blur"
    sharp_dir = root / "sharp"
    if not blur_dir.is_dir() or not sharp_dir.is_dir():
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root {root} does not exist")
        return []
    blurred = _index_images(blur_dir)
    sharp = _index_images(sharp_dir)
    missing = sorted(set(blurred) ^ set(sharp))
    if missing:
        raise PairingError(f"unpaired files: {', '.join(missing)}")
    pairs = []
    for name in sorted(blurred):
        pairs.append(ImagePair(
            sharp=load_image(sharp[name]),
            blurred=load_image(blurred[name]),
            id=name,
        ))
    return pairs


@dataclass
class MotionKernel:
    taps: np.ndarray

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        k = self.taps.shape[0]
        if self.taps.ndim != 2 or self.taps.shape[1] != k:
            raise ValueError("kernel must be square")
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        if (self.taps < 0).any():
            raise ValueError("kernel taps must be nonnegative")
        s = self.taps.sum()
        if abs(s - 1.0) > 1e-6:
            raise ValueError(f"kernel taps must sum to 1, got {s}")

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    def save_txt(self, path) -> None:
        np.savetxt(path, self.taps)

    @classmethod
    def load_txt(cls, path) -> "MotionKernel":
        return cls(np.loadtxt(path))

    @classmethod
    def delta(cls, size: int = 3) -> "MotionKernel":
        taps = np.zeros((size, size))
        taps[size // 2, size // 2] = 1.0
        return cls(taps)


def generate_motion_kernel(seed: int, size: int = 15, steps: int = 20) -> MotionKernel:
    """Rasterize a seeded random-walk camera trajectory into a blur kernel.

    Unit steps with heading perturbations ~ N(0, 0.5 rad), deposited with
    bilinear weights, clamped to the grid, normalized to sum 1.
    """
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    taps = np.zeros((size, size))
    center = size // 2
    y, x = float(center), float(center)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    for step in range(steps):
        if step > 0:
            heading += rng.normal(0.0, 0.5)
            y += np.sin(heading)
            x += np.cos(heading)
        yy = min(max(y, 0.0), size - 1.0)
        xx = min(max(x, 0.0), size - 1.0)
        y0, x0 = int(np.floor(yy)), int(np.floor(xx))
        fy, fx = yy - y0, xx - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if y0 + dy < size and x0 + dx < size:
                    taps[y0 + dy, x0 + dx] += wy * wx
    return MotionKernel(taps / taps.sum())


def synth_blur(sharp: torch.Tensor, kernel: MotionKernel) -> torch.Tensor:
    """Per-channel 2-D convolution with reflect padding, clamped to [-1, 1]."""
    c, h, w = sharp.shape
    k = kernel.size
    if k > h or k > w:
        raise ValueError(f"kernel size {k} exceeds image dims {h}x{w}")
    weight = torch.from_numpy(kernel.taps[::-1, ::-1].copy()).to(sharp.dtype)
    weight = weight.expand(c, 1, k, k).contiguous()
    padded = F.pad(sharp.unsqueeze(0), (k // 2,) * 4, mode="reflect")
    out = F.conv2d(padded, weight, groups=c).squeeze(0)
    return out.clamp(-1.0, 1.0)


def _crop_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng((seed, zlib.crc32(sample_id.encode())))


def random_crop_pair(pair: ImagePair, crop: int = 256, seed: int = 0) -> ImagePair:
    """Identical seeded crop window on both images of a pair."""
    _, h, w = pair.sharp.shape
    if h < crop or w < crop:
        raise ValueError(f"pair {pair.id!r}: {h}x{w} smaller than crop {crop}")
    rng = _crop_rng(seed, pair.id)
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return ImagePair(
        sharp=pair.sharp[:, top:top + crop, left:left + crop].clone(),
        blurred=pair.blurred[:, top:top + crop, left:left + crop].clone(),
        id=pair.id,
    )


def _random_sharp_image(rng: np.random.Generator, size: int) -> torch.Tensor:
    """Smooth colorful test image: bilinear-upsampled coarse noise plus edges."""
    coarse = rng.uniform(-1.0, 1.0, size=(3, 8, 8)).astype(np.float32)
    img = F.interpolate(torch.from_numpy(coarse).unsqueeze(0), size=(size, size),
                        mode="bilinear", align_corners=False).squeeze(0)
    # a few hard-edged rectangles so blur is actually visible
    for _ in range(6):
        y0, x0 = rng.integers(0, size - 4, size=2)
        hh, ww = rng.integers(2, max(3, size // 4), size=2)
        color = torch.from_numpy(rng.uniform(-1, 1, size=(3, 1, 1)).astype(np.float32))
        img[:, y0:y0 + hh, x0:x0 + ww] = color
    return img.clamp(-1.0, 1.0)


def write_synth_dataset(root, n: int, size: int = 256, seed: int = 0,
                        kernel_size: int = 9, kernel_steps: int = 8) -> list[str]:
    """Emit an n-pair synthetic dataset in the blur/sharp layout."""
    root = Path(root)
    for sub in ("blur", "sharp", "kernels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    rng = np.random.default_rng(seed)
    for i in range(n):
        name = f"{i:04d}.png"
        sharp = _random_sharp_image(rng, size)
        kernel = generate_motion_kernel(seed * 1000 + i, size=kernel_size,
                                        steps=kernel_steps)
        blurred = synth_blur(sharp, kernel)
        save_image(root / "sharp" / name, sharp)
        save_image(root / "blur" / name, blurred)
        kernel.save_txt(root / "kernels" / f"{i:04d}.txt")
        ids.append(name)
    return ids
