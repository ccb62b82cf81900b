"""Image quality metrics, spectral saliency, and the evaluation harness."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dctn, idctn
from scipy.ndimage import convolve, gaussian_filter

from .data import from_model_range

# standard SSIM / MS-SSIM parameters
_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_MIN_DIM = _WINDOW_SIZE * 2 ** (len(MSSSIM_WEIGHTS) - 1)


def _as_float_planes(x) -> np.ndarray:
    """Any image array/tensor -> float64 HxWxC on the 0..255 scale."""
    if isinstance(x, torch.Tensor):
        x = from_model_range(x) if x.dtype.is_floating_point else x.numpy()
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64)


def _check_shapes(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB on the 8-bit scale; inf when equal."""
    a, b = _as_float_planes(x), _as_float_planes(y)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_window(size=_WINDOW_SIZE, sigma=_WINDOW_SIGMA) -> np.ndarray:
    half = size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray):
    """Per-channel SSIM and contrast-structure maps (means returned)."""
    win = _gaussian_window()
    mu_a = convolve(a, win, mode="reflect")
    mu_b = convolve(b, win, mode="reflect")
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = convolve(a * a, win, mode="reflect") - mu_aa
    var_b = convolve(b * b, win, mode="reflect") - mu_bb
    cov = convolve(a * b, win, mode="reflect") - mu_ab
    lum = (2 * mu_ab + _C1) / (mu_aa + mu_bb + _C1)
    cs = (2 * cov + _C2) / (var_a + var_b + _C2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _ssim_cs(x, y):
    a, b = _as_float_planes(x), _as_float_planes(y)
    _check_shapes(a, b)
    if min(a.shape[0], a.shape[1]) < _WINDOW_SIZE:
        raise ValueError(f"images must be at least {_WINDOW_SIZE} px per side")
    vals = [_ssim_channel(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]
    ssim_mean = sum(v[0] for v in vals) / len(vals)
    cs_mean = sum(v[1] for v in vals) / len(vals)
    return ssim_mean, cs_mean


def ssim(x, y) -> float:
    """Single-scale SSIM with the standard 11x11 / sigma 1.5 window."""
    return _ssim_cs(x, y)[0]


def _downsample2(arr: np.ndarray) -> np.ndarray:
    t = torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)
    t = F.avg_pool2d(t, 2)
    return t.squeeze(0).numpy().transpose(1, 2, 0)


def msssim(x, y, weights=MSSSIM_WEIGHTS) -> float:
    """Multi-scale SSIM over dyadic scales, geometric weighted combination."""
    a, b = _as_float_planes(x), _as_float_planes(y)
    _check_shapes(a, b)
    if min(a.shape[0], a.shape[1]) < MSSSIM_MIN_DIM:
        raise ValueError(f"images must be at least {MSSSIM_MIN_DIM} px per side")
    value = 1.0
    for level, w in enumerate(weights):
        s, cs = _ssim_cs(a, b)
        last = level == len(weights) - 1
        factor = s if last else cs
        value *= max(factor, 0.0) ** w
        if not last:
            a, b = _downsample2(a), _downsample2(b)
    return float(value)


def saliency_map(x, smooth_fraction: float = 0.045) -> np.ndarray:
    """Spectral-signature saliency: smoothed squared IDCT of the DCT sign.

    Returns an HxW map min-max normalized to [0, 1]; all zeros for a
    constant input.
    """
    arr = _as_float_planes(x)
    gray = arr @ np.array([0.299, 0.587, 0.114]) if arr.shape[2] == 3 else arr[:, :, 0]
    signature = np.sign(dctn(gray, norm="ortho"))
    recon = idctn(signature, norm="ortho")
    power = recon * recon
    sigma = smooth_fraction * min(gray.shape)
    if sigma > 0:
        power = gaussian_filter(power, sigma, mode="reflect")
    lo, hi = float(power.min()), float(power.max())
    if hi - lo < 1e-12:
        return np.zeros_like(power)
    return (power - lo) / (hi - lo)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    saliency_paths: list[str] = field(default_factory=list)

    def finalize(self) -> None:
        finite_psnr = [r["psnr_db"] for r in self.rows if math.isfinite(r["psnr_db"])]
        msssims = [r["msssim"] for r in self.rows if r["msssim"] is not None]
        self.aggregates = {
            "n_images": len(self.rows),
            "mean_psnr_db": sum(finite_psnr) / len(finite_psnr) if finite_psnr else None,
            "n_psnr_inf_excluded": len(self.rows) - len(finite_psnr),
            "mean_ssim": sum(r["ssim"] for r in self.rows) / len(self.rows),
            "mean_msssim": sum(msssims) / len(msssims) if msssims else None,
            "mean_runtime_s": sum(r["runtime_s"] for r in self.rows) / len(self.rows),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(
            buf, fieldnames=["id", "psnr_db", "ssim", "msssim", "runtime_s"])
        writer.writeheader()
        for row in self.rows:
            out = dict(row)
            if math.isinf(out["psnr_db"]):
                out["psnr_db"] = "inf"
            if out["msssim"] is None:
                out["msssim"] = ""
            writer.writerow(out)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"aggregates": self.aggregates, "rows": len(self.rows)},
                          indent=2, sort_keys=True)


def pad_to_multiple(x: torch.Tensor, multiple: int = 32) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad CxHxW so both spatial dims divide ``multiple``."""
    _, h, w = x.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    padded = F.pad(x.unsqueeze(0), (0, pw, 0, ph), mode="reflect").squeeze(0)
    return padded, (h, w)


def deblur_image(model, blurred: torch.Tensor) -> tuple[torch.Tensor, float]:
    """Forward pass with pad/crop handling; returns (output, runtime seconds)."""
    padded, (h, w) = pad_to_multiple(blurred)
    start = time.perf_counter()
    with torch.no_grad():
        out = model(padded.unsqueeze(0)).squeeze(0)
    runtime = time.perf_counter() - start
    return out[:, :h, :w], runtime


def evaluate(model, dataset, compute_saliency: bool = False) -> tuple[EvalReport, dict]:
    """Deblur each pair, compute metrics on 8-bit outputs, aggregate.

    Returns (report, artifacts) where artifacts maps id -> dict of arrays
    (output image, optional saliency maps) for the caller to render.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    report = EvalReport()
    artifacts = {}
    for pair in dataset:
        out, runtime = deblur_image(model, pair.blurred)
        out8 = from_model_range(out)
        sharp8 = from_model_range(pair.sharp)
        min_dim = min(out8.shape[0], out8.shape[1])
        row = {
            "id": pair.id,
            "psnr_db": psnr(out8, sharp8),
            "ssim": ssim(out8, sharp8),
            "msssim": msssim(out8, sharp8) if min_dim >= MSSSIM_MIN_DIM else None,
            "runtime_s": runtime,
        }
        report.rows.append(row)
        entry = {"output": out8}
        if compute_saliency:
            entry["saliency"] = {
                "blurred": saliency_map(from_model_range(pair.blurred)),
                "sharp": saliency_map(sharp8),
                "output": saliency_map(out8),
            }
        artifacts[pair.id] = entry
    report.rows.sort(key=lambda r: r["id"])
    report.finalize()
    return report, artifacts
