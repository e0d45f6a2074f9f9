"""Stage 1: predict where a new person goes, and roughly how they stand.

A conditional translation network in the style of Pix2PixHD's global
generator maps a one-hot context map (everyone already in the scene) to
per-class scores for a single new person. It is trained against a
two-scale LSGAN patch discriminator with discriminator feature matching;
the VGG feature-matching term is available but off by default.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .semantics import (
    STAGE1,
    PlacementRecord,
    SemanticMap,
    TaxonomyMismatch,
    build_context_pair,
    foreground_bbox,
    get_taxonomy,
    resize_pad,
)

CHECKPOINT_FORMAT = "personinsert-coarse"
CHECKPOINT_VERSION = 1
# VGG-19 prefix lengths for relu1_1 .. relu5_1 and their weights
VGG_LAYERS = (2, 7, 12, 21, 30)
VGG_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
MIN_COMPONENT_FRACTION = 0.001
S1 = get_taxonomy(STAGE1)

# colours used to show a class-probability map to the VGG network
_PALETTE = torch.tensor([
    [0, 0, 0], [128, 64, 0], [255, 200, 150], [220, 120, 90],
    [200, 30, 30], [30, 30, 200], [180, 140, 100], [60, 60, 60],
], dtype=torch.float32) / 127.5 - 1.0


@dataclass
class CoarseGenConfig:
    canvas_side: int = 368
    generator_scale: float = 0.25
    feature_matching_enabled: bool = False
    epochs: int = 20
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_feat: float = 10.0
    lambda_vgg: float = 10.0
    lambda_ce: float = 1.0
    n_downsample: int = 4
    n_blocks: int = 9
    n_layers_d: int = 3
    num_d: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.canvas_side < 64 or self.canvas_side % 16:
            raise ValueError(f"canvas_side must be >= 64 and divisible by 16, got {self.canvas_side}")
        if self.generator_scale <= 0:
            raise ValueError("generator_scale must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def ngf(self) -> int:
        return max(1, round(64 * self.generator_scale))

    @classmethod
    def from_dict(cls, d: dict) -> "CoarseGenConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown coarse config keys: {sorted(unknown)}")
        return cls(**d)


# -- one-hot codec -------------------------------------------------------------

def one_hot(smap: SemanticMap) -> torch.Tensor:
    """G x H x W float indicator planes."""
    lab = torch.from_numpy(smap.labels.astype(np.int64))
    return F.one_hot(lab, smap.taxonomy.group_count).permute(2, 0, 1).float()


def decode(scores: torch.Tensor, taxonomy=S1) -> SemanticMap:
    """Argmax over the class axis of a G x H x W score tensor."""
    return SemanticMap(scores.argmax(0).to(torch.uint8).cpu().numpy(), taxonomy)


# -- networks ------------------------------------------------------------------

class ResnetBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class GlobalGenerator(nn.Module):
    """c7s1-ngf, n_down stride-2 convs, residual blocks, mirrored upsampling, c7s1-out."""

    def __init__(self, in_ch: int, out_ch: int, ngf: int = 64, n_down: int = 4, n_blocks: int = 9):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_ch, ngf, 7), nn.InstanceNorm2d(ngf), nn.ReLU(True)]
        for i in range(n_down):
            c = ngf * 2 ** i
            layers += [nn.Conv2d(c, 2 * c, 3, 2, 1), nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
        c = ngf * 2 ** n_down
        layers += [ResnetBlock(c) for _ in range(n_blocks)]
        for i in range(n_down):
            c = ngf * 2 ** (n_down - i)
            layers += [nn.ConvTranspose2d(c, c // 2, 3, 2, 1, output_padding=1),
                       nn.InstanceNorm2d(c // 2), nn.ReLU(True)]
        # class scores, so no output squashing
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, out_ch, 7)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class NLayerDiscriminator(nn.Module):
    def __init__(self, in_ch: int, ndf: int = 64, n_layers: int = 3):
        super().__init__()
        kw, pw = 4, 2
        seq = [[nn.Conv2d(in_ch, ndf, kw, 2, pw), nn.LeakyReLU(0.2, True)]]
        nf = ndf
        for n in range(1, n_layers + 1):
            prev, nf = nf, min(nf * 2, 512)
            stride = 2 if n < n_layers else 1
            seq.append([nn.Conv2d(prev, nf, kw, stride, pw), nn.InstanceNorm2d(nf), nn.LeakyReLU(0.2, True)])
        seq.append([nn.Conv2d(nf, 1, kw, 1, pw)])
        self.stages = nn.ModuleList(nn.Sequential(*s) for s in seq)

    def forward(self, x) -> list[torch.Tensor]:
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs  # intermediate features, final entry is the patch map


class MultiscaleDiscriminator(nn.Module):
    def __init__(self, in_ch: int, ndf: int = 64, n_layers: int = 3, num_d: int = 2):
        super().__init__()
        self.nets = nn.ModuleList(NLayerDiscriminator(in_ch, ndf, n_layers) for _ in range(num_d))
        self.down = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, x) -> list[list[torch.Tensor]]:
        outs = []
        for i, net in enumerate(self.nets):
            outs.append(net(x))
            if i + 1 < len(self.nets):
                x = self.down(x)
        return outs


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class CoarseModel:
    generator: GlobalGenerator | None
    discriminator: MultiscaleDiscriminator | None
    config: CoarseGenConfig
    log: list | None = None


class ModelNotReady(RuntimeError):
    pass


def build_model(config: CoarseGenConfig) -> CoarseModel:
    torch.manual_seed(config.seed)
    G_ch = S1.group_count
    gen = GlobalGenerator(G_ch, G_ch, config.ngf, config.n_downsample, config.n_blocks)
    disc = MultiscaleDiscriminator(2 * G_ch, config.ngf, config.n_layers_d, config.num_d)
    init_weights(gen)
    init_weights(disc)
    return CoarseModel(gen, disc, config, [])


# -- objectives ----------------------------------------------------------------

def lsgan(outputs: list[list[torch.Tensor]], target: float) -> torch.Tensor:
    return sum(F.mse_loss(o[-1], torch.full_like(o[-1], target)) for o in outputs)


def feature_matching(fake_out, real_out, n_layers: int) -> torch.Tensor:
    num_d = len(fake_out)
    w_layer, w_d = 4.0 / (n_layers + 1), 1.0 / num_d
    loss = 0.0
    for f_scale, r_scale in zip(fake_out, real_out):
        for f, r in zip(f_scale[:-1], r_scale[:-1]):
            loss = loss + w_d * w_layer * F.l1_loss(f, r.detach())
    return loss


def probs_to_rgb(probs: torch.Tensor) -> torch.Tensor:
    """Probability-weighted palette colours, N x 3 x H x W in [-1, 1]."""
    return torch.einsum("nghw,gc->nchw", probs, _PALETTE.to(probs))


def generator_objective(model: CoarseModel, context: torch.Tensor, target_idx: torch.Tensor,
                        vgg: Callable | None = None):
    """Returns (total, components) for a batch; also the detached fake probabilities."""
    cfg = model.config
    logits = model.generator(context)
    probs = logits.softmax(1)
    real = F.one_hot(target_idx, logits.shape[1]).permute(0, 3, 1, 2).float()
    fake_out = model.discriminator(torch.cat([context, probs], 1))
    real_out = model.discriminator(torch.cat([context, real], 1))
    comps = {
        "GAN": lsgan(fake_out, 1.0),
        "GAN_Feat": cfg.lambda_feat * feature_matching(fake_out, real_out, cfg.n_layers_d),
        "CE": cfg.lambda_ce * F.cross_entropy(logits, target_idx),
    }
    if cfg.feature_matching_enabled:
        if vgg is None:
            raise ValueError("feature matching is enabled but no VGG extractor was given")
        with torch.no_grad():
            real_feats = vgg(probs_to_rgb(real))
        fake_feats = vgg(probs_to_rgb(probs))
        comps["VGG"] = cfg.lambda_vgg * sum(w * F.l1_loss(f, r) for w, f, r in
                                            zip(VGG_WEIGHTS, fake_feats, real_feats))
    total = sum(comps.values())
    return total, comps, probs.detach()


def discriminator_objective(model: CoarseModel, context, target_idx, fake_probs) -> torch.Tensor:
    real = F.one_hot(target_idx, fake_probs.shape[1]).permute(0, 3, 1, 2).float()
    d_fake = model.discriminator(torch.cat([context, fake_probs], 1))
    d_real = model.discriminator(torch.cat([context, real], 1))
    return 0.5 * (lsgan(d_fake, 0.0) + lsgan(d_real, 1.0))


# -- training ------------------------------------------------------------------

def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list[list[int]]:
    """Index batches for ``steps`` updates: reshuffled each pass, last batch of a pass may be short."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < steps:
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            out.append(order[s:s + batch_size].tolist())
            if len(out) == steps:
                break
    return out


def scene_pairs(person_maps: Sequence[SemanticMap], side: int):
    """One canvas (context, target) pair per held-out person of a stage-1 scene."""
    out = []
    for t in range(len(person_maps)):
        ctx, tgt = build_context_pair(person_maps, t)
        if not tgt.foreground().any():
            continue
        out.append((resize_pad(ctx, side)[0], resize_pad(tgt, side)[0]))
    return out


def _check_pairs(pairs, side: int):
    if not pairs:
        raise ValueError("cannot train on an empty pair list")
    for i, (ctx, tgt) in enumerate(pairs):
        for m in (ctx, tgt):
            if m.taxonomy != S1:
                raise TaxonomyMismatch(f"pair {i}: expected the stage1 taxonomy, got {m.taxonomy.name}")
            if m.shape != (side, side):
                raise ValueError(f"pair {i}: map is {m.shape}, expected {side}x{side}; canonicalize with resize_pad")


def train_coarse(pairs: Sequence[tuple[SemanticMap, SemanticMap]], config: CoarseGenConfig,
                 log_path=None, on_step: Callable | None = None, vgg: Callable | None = None) -> CoarseModel:
    _check_pairs(pairs, config.canvas_side)
    if config.feature_matching_enabled and vgg is None:
        from .backbones import vgg19_features
        vgg = vgg19_features(VGG_LAYERS)
    model = build_model(config)
    G, D = model.generator, model.discriminator
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    ctx = torch.stack([one_hot(c) for c, _ in pairs])
    tgt = torch.stack([torch.from_numpy(t.labels.astype(np.int64)) for _, t in pairs])
    steps = config.steps if config.steps is not None else config.epochs * math.ceil(len(pairs) / config.batch_size)
    fh = open(log_path, "w") if log_path else None
    try:
        for step, idx in enumerate(batch_schedule(len(pairs), config.batch_size, steps, config.seed), start=1):
            c, t = ctx[idx], tgt[idx]
            opt_g.zero_grad(set_to_none=True)
            total, comps, fake = generator_objective(model, c, t, vgg)
            total.backward()
            opt_g.step()

            opt_d.zero_grad(set_to_none=True)
            d_loss = discriminator_objective(model, c, t, fake)
            d_loss.backward()
            opt_d.step()

            record = {"step": step, "batch": len(idx), **{k: v.item() for k, v in comps.items()},
                      "objective": total.item(), "D": d_loss.item()}
            if not all(math.isfinite(v) for v in record.values()):
                raise FloatingPointError(f"non-finite coarse loss at step {step}: {record}")
            model.log.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
            if on_step:
                on_step(record)
    finally:
        if fh:
            fh.close()
    return model


# -- inference -----------------------------------------------------------------

def drop_small_components(labels: np.ndarray, min_fraction: float = MIN_COMPONENT_FRACTION) -> np.ndarray:
    """Zero foreground components (8-connected) smaller than ``min_fraction`` of the grid."""
    comps, n = ndimage.label(labels > 0, structure=np.ones((3, 3), bool))
    if n == 0:
        return labels.copy()
    sizes = np.bincount(comps.ravel())
    small = sizes < min_fraction * labels.size
    small[0] = False
    out = labels.copy()
    out[small[comps]] = 0
    return out


def infer_coarse(model: CoarseModel, context: SemanticMap, postfilter: bool = True) -> SemanticMap:
    if model is None or model.generator is None:
        raise ModelNotReady("coarse model has no generator weights; train or load one first")
    side = model.config.canvas_side
    if context.taxonomy != S1:
        raise TaxonomyMismatch(f"context must use the stage1 taxonomy, got {context.taxonomy.name}")
    if context.shape != (side, side):
        raise ValueError(f"context is {context.shape}, expected {side}x{side}")
    G = model.generator.eval()
    with torch.no_grad():
        scores = G(one_hot(context)[None])[0]
    out = decode(scores)
    if postfilter:
        out = SemanticMap(drop_small_components(out.labels), S1)
    return out


class CoarseGenerationFailed(ValueError):
    pass


def extract_placement(coarse: SemanticMap) -> tuple[np.ndarray, PlacementRecord]:
    """Foreground mask and the tight box of the new person, in canvas coordinates."""
    mask = coarse.foreground()
    if not mask.any():
        raise CoarseGenerationFailed("coarse map has no foreground: the generator placed no person")
    box = foreground_bbox(mask)
    return mask, PlacementRecord(1.0, 0, 0, box)


def place_mask(mask_crop: np.ndarray, record: PlacementRecord, canvas_shape) -> np.ndarray:
    """Put a box-sized mask back onto an empty canvas at ``record.crop_box``."""
    x, y, w, h = record.crop_box
    if mask_crop.shape != (h, w):
        raise ValueError(f"mask is {mask_crop.shape}, box is {(h, w)}")
    out = np.zeros(canvas_shape, bool)
    out[y:y + h, x:x + w] = mask_crop
    return out


def canvas_box_to_scene(box, scene_record: PlacementRecord) -> tuple[float, float, float, float]:
    """Map an (x, y, w, h) canvas box into the scene that ``scene_record`` resampled."""
    x, y, w, h = box
    s = scene_record.scale
    ox, oy = scene_record.crop_box[:2]
    return (ox + (x - scene_record.pad_left) / s, oy + (y - scene_record.pad_top) / s, w / s, h / s)


# -- persistence ----------------------------------------------------------------

def save_coarse(model: CoarseModel, path) -> None:
    if model.generator is None:
        raise ModelNotReady("nothing to save")
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": asdict(model.config), "seed": model.config.seed,
                "generator": model.generator.state_dict(),
                "discriminator": model.discriminator.state_dict()}, path)


def load_coarse(path) -> CoarseModel:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a coarse-generator checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported coarse checkpoint version {ckpt.get('version')}")
    model = build_model(CoarseGenConfig.from_dict(ckpt["config"]))
    model.generator.load_state_dict(ckpt["generator"])
    model.discriminator.load_state_dict(ckpt["discriminator"])
    model.log = None
    return model
