"""Image-quality metrics and the rendering ablation report.

``ssim`` is the windowed structural similarity on luma. ``perceptual_distance``
follows the LPIPS recipe (unit-normalised channels, squared differences,
spatial mean, summed over layers) but without learned per-channel weights,
so its values are not comparable with published LPIPS numbers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .renderer import RenderPair, RendererBundle, image_to_tensor

LUMA = (0.299, 0.587, 0.114)
VGG_PERCEPTUAL_LAYERS = (4, 9, 18, 27, 36)  # relu1_2, relu2_2, relu3_4, relu4_4, relu5_4
SQUEEZE_PERCEPTUAL_LAYERS = (2, 5, 8, 10, 11, 12, 13)
REPORT_COLUMNS = ("SSIM", "IS", "DS", "PCKh", "Perceptual (VGG)", "Perceptual (SqzNet)")
ABSENT_COLUMNS = ("IS", "DS", "PCKh")
MODE_LABELS = {"baseline": "Baseline", "hr_only": "HR only", "lr_only": "LR only", "full": "Full"}


def _unit_gray(img) -> np.ndarray:
    """H x W x 3 (uint8 or float in [0, 1]) or H x W -> float64 luma in [0, 1]."""
    a = np.asarray(img)
    if a.dtype == np.uint8:
        a = a / 255.0
    a = a.astype(np.float64)
    if a.ndim == 3:
        a = a @ np.asarray(LUMA)
    if a.ndim != 2:
        raise ValueError(f"expected an H x W x 3 or H x W image, got shape {np.asarray(img).shape}")
    return a


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, data_range: float = 1.0, size: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    x, y = _unit_gray(a), _unit_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"image sizes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < size:
        raise ValueError(f"images must be at least {size}x{size}")
    w = gaussian_window(size, sigma)

    def filt(z):
        return convolve2d(z, w, mode="valid")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    vx, vy, cxy = filt(x * x) - mx * mx, filt(y * y) - my * my, filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b, **kw) -> float:
    """Mean SSIM over all valid 11 x 11 Gaussian windows."""
    return float(ssim_map(a, b, **kw).mean())


def _as_batch(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        t = img.float()
    else:
        arr = np.asarray(img)
        t = image_to_tensor(arr) if arr.dtype == np.uint8 else torch.from_numpy(arr).permute(2, 0, 1).float() * 2 - 1
    return t[None] if t.ndim == 3 else t


def perceptual_distance(a, b, phi: Callable, eps: float = 1e-10) -> float:
    """Sum over layers of the spatial mean of squared differences of unit-normalised features."""
    fa, fb = phi(_as_batch(a)), phi(_as_batch(b))
    if len(fa) != len(fb):
        raise ValueError("extractor returned different numbers of layers")
    total = 0.0
    for x, y in zip(fa, fb):
        if x.shape != y.shape:
            raise ValueError(f"feature shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
        nx = x / (x.pow(2).sum(1, keepdim=True).sqrt() + eps)
        ny = y / (y.pow(2).sum(1, keepdim=True).sqrt() + eps)
        total += (nx - ny).pow(2).sum(1).mean().item()
    return total


@dataclass
class MetricReport:
    rows: list  # row labels, in order
    records: list  # per pair: {"model", "pair", "SSIM", "Perceptual (VGG)", ...}
    columns: tuple = REPORT_COLUMNS
    absent: tuple = ABSENT_COLUMNS
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self.recompute()

    def recompute(self) -> dict:
        out = {}
        for row in self.rows:
            recs = [r for r in self.records if r["model"] == row]
            out[row] = {c: (None if c in self.absent else float(np.mean([r[c] for r in recs])))
                        for c in self.columns}
        return out

    def format_table(self) -> str:
        head = ["Model"] + list(self.columns)
        lines = [" | ".join(head)]
        for row in self.rows:
            cells = [row] + ["absent" if v is None else f"{v:.3f}" for v in
                             (self.aggregates[row][c] for c in self.columns)]
            lines.append(" | ".join(cells))
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "record", **r}, sort_keys=True) for r in self.records]
        lines += [json.dumps({"kind": "aggregate", "model": m, **v}, sort_keys=True)
                  for m, v in self.aggregates.items()]
        return "\n".join(lines) + "\n"


def evaluate_outputs(outputs: dict, targets: Sequence, extractors: dict) -> MetricReport:
    """Score precomputed generator outputs; ``outputs`` maps row label -> list of images.

    ``extractors`` maps a report column (e.g. "Perceptual (VGG)") to a feature function.
    """
    if not targets:
        raise ValueError("empty test set")
    records = []
    for label, images in outputs.items():
        if len(images) != len(targets):
            raise ValueError(f"{label}: {len(images)} outputs for {len(targets)} targets")
        for i, (out, tgt) in enumerate(zip(images, targets)):
            rec = {"model": label, "pair": i, "SSIM": ssim(out, tgt)}
            for col, phi in extractors.items():
                rec[col] = perceptual_distance(out, tgt, phi)
            records.append(rec)
    skipped = tuple(c for c in REPORT_COLUMNS if c not in ABSENT_COLUMNS and c != "SSIM" and c not in extractors)
    return MetricReport(list(outputs), records, absent=ABSENT_COLUMNS + skipped)


def evaluate_renderer(test_pairs: Sequence[RenderPair], renderers, extractors: dict) -> MetricReport:
    """Render I_B for every pair with each renderer and score against the real I_B.

    ``renderers`` is a bundle or a mapping from row label to bundle; bundles
    keyed by attention mode get the ablation row names.
    """
    if not test_pairs:
        raise ValueError("empty test set")
    if isinstance(renderers, RendererBundle):
        renderers = {MODE_LABELS[renderers.config.attention_mode]: renderers}
    outputs = {}
    for label, bundle in renderers.items():
        outs = []
        for p in test_pairs:
            t = bundle.render(p.image_a, p.map_a, p.map_b)
            outs.append(((t.clamp(-1, 1) + 1) / 2).permute(1, 2, 0).double().numpy())
        outputs[MODE_LABELS.get(label, label)] = outs
    targets = [p.image_b / 255.0 for p in test_pairs]
    return evaluate_outputs(outputs, targets, extractors)


def default_extractors() -> dict:
    from .backbones import squeezenet_features, vgg19_features
    return {"Perceptual (VGG)": vgg19_features(VGG_PERCEPTUAL_LAYERS),
            "Perceptual (SqzNet)": squeezenet_features(SQUEEZE_PERCEPTUAL_LAYERS)}

