"""Appearance transfer: attention-gated two-branch generator and patch discriminator.

The generator encodes the exemplar image and the stacked source/target body
heatmaps in two identically shaped branches. Before each decoder block the
running image features are multiplied elementwise by the logistic of the
pose features at the same resolution.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .semantics import SemanticMap, fit_to_shape, resize_pad_array, to_heatmap

ATTENTION_MODES = ("full", "hr_only", "lr_only", "baseline")
# decoder blocks (1 = lowest resolution) whose input is gated, per mode
GATED_BLOCKS = {"full": (1, 2, 3, 4), "hr_only": (4,), "lr_only": (1,), "baseline": ()}
BCE_EPS = 1e-7
CHECKPOINT_FORMAT = "personinsert-renderer"
CHECKPOINT_VERSION = 1


@dataclass
class RendererConfig:
    attention_mode: str = "full"
    lambda1: float = 5.0
    lambda2: float = 1.0
    lambda3: float = 5.0
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 4
    init_std: float = 0.02
    perceptual_layers: tuple = (4, 9)
    width_scale: float = 1.0
    image_size: int = 256
    steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.attention_mode!r}; expected one of {ATTENTION_MODES}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")
        self.perceptual_layers = tuple(self.perceptual_layers)

    @property
    def base_channels(self) -> int:
        return max(1, round(64 * self.width_scale))

    @classmethod
    def from_dict(cls, d: dict) -> "RendererConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown renderer config keys: {sorted(unknown)}")
        return cls(**d)


# -- building blocks ----------------------------------------------------------

class ResidualBlock(nn.Module):
    """Basic two-convolution residual block."""

    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.BatchNorm2d(ch), nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False), nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


def down_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(inplace=True), ResidualBlock(cout))


def up_block(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout),
                         nn.ReLU(inplace=True), ResidualBlock(cout))


class Encoder(nn.Module):
    def __init__(self, in_ch: int, base: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_ch, base, 3, 1, 1, bias=False), nn.BatchNorm2d(base),
                                  nn.ReLU(inplace=True))
        self.blocks = nn.ModuleList(down_block(base * 2 ** k, base * 2 ** (k + 1)) for k in range(4))

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        outs = []
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        return outs  # [E_1, ..., E_4], E_k has base * 2**k channels at 1/2**k resolution


class AttentionGatedGenerator(nn.Module):
    def __init__(self, base: int = 64, mode: str = "full", heatmap_channels: int = 6):
        super().__init__()
        if mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.gated = GATED_BLOCKS[mode]
        self.image_encoder = Encoder(3, base)
        self.pose_encoder = Encoder(2 * heatmap_channels, base)
        c4 = base * 16
        first_in = 2 * c4 if mode == "baseline" else c4
        self.decoder = nn.ModuleList([up_block(first_in, c4 // 2)] +
                                     [up_block(c4 // 2 ** k, c4 // 2 ** (k + 1)) for k in range(1, 4)])
        self.tail = nn.Sequential(*[ResidualBlock(base) for _ in range(4)],
                                  nn.Conv2d(base, 3, 1, 1, 0, bias=False), nn.Tanh())

    def forward(self, image, pose, pose_features: Sequence[torch.Tensor] | None = None,
                return_intermediates: bool = False):
        """Render from exemplar ``image`` (N,3,S,S) and stacked heatmaps ``pose`` (N,12,S,S).

        ``pose_features`` replaces the pose-branch outputs [H_1..H_4], which
        lets callers pin the gate inputs exactly.
        """
        img_feats = self.image_encoder(image)
        pose_feats = list(pose_features) if pose_features is not None else self.pose_encoder(pose)
        gates, block_inputs = {}, {}
        x = img_feats[3]
        if self.mode == "baseline":
            x = torch.cat([x, pose_feats[3]], dim=1)
        for k, block in enumerate(self.decoder, start=1):
            if k in self.gated:
                g = torch.sigmoid(pose_feats[4 - k])  # D_k pairs with H_{5-k}
                gates[k] = g
                x = x * g
            block_inputs[k] = x
            x = block(x)
        out = self.tail(x)
        if return_intermediates:
            return out, {"image_features": img_feats, "pose_features": pose_feats,
                         "gates": gates, "decoder_inputs": block_inputs}
        return out


class PatchDiscriminator(nn.Module):
    """Three stride-2 and two stride-1 4x4 convolutions: 70x70 receptive field, 30x30 map at 256."""

    def __init__(self, in_ch: int = 6, base: int = 64):
        super().__init__()
        c = [base, base * 2, base * 4, base * 8]
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, c[0], 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[0], c[1], 4, 2, 1, bias=False), nn.BatchNorm2d(c[1]), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[1], c[2], 4, 2, 1, bias=False), nn.BatchNorm2d(c[2]), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[2], c[3], 4, 1, 1, bias=False), nn.BatchNorm2d(c[3]), nn.LeakyReLU(0.2, True),
            nn.Conv2d(c[3], 1, 4, 1, 1), nn.Sigmoid(),
        )

    def forward(self, exemplar, x):
        return self.net(torch.cat([exemplar, x], dim=1))


def patch_grid_size(size: int) -> int:
    for k, s in ((4, 2), (4, 2), (4, 2), (4, 1), (4, 1)):
        size = (size + 2 - k) // s + 1
    return size


def receptive_field() -> int:
    rf = 1
    for k, s in reversed(((4, 2), (4, 2), (4, 2), (4, 1), (4, 1))):
        rf = (rf - 1) * s + k
    return rf


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Convolutions ~ N(0, std); batch-norm scales ~ N(1, std) with zero shift."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


# -- objectives ---------------------------------------------------------------

def bce(pred: torch.Tensor, target: float) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities, clamped away from 0 and 1."""
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    if target == 1:
        return -torch.log(p).mean()
    if target == 0:
        return -torch.log1p(-p).mean()
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


class NonFiniteLoss(FloatingPointError):
    pass


def loss_generator(fake, real, exemplar, disc: Callable, phi: Callable,
                   lambdas=(5.0, 1.0, 5.0), layer_names: Sequence[int] = (4, 9)):
    """Weighted generator objective; returns (total, components).

    ``phi`` maps a batch of images to a list of feature maps, one per
    perceptual layer, in the order of ``layer_names``.
    """
    if fake.shape != real.shape or fake.shape != exemplar.shape:
        raise ValueError(f"shape mismatch: {tuple(fake.shape)}, {tuple(real.shape)}, {tuple(exemplar.shape)}")
    l1 = (fake - real).abs().mean()
    gan = bce(disc(exemplar, fake), 1)
    with torch.no_grad():
        real_feats = phi(real)
    fake_feats = phi(fake)
    comps = {"L1": l1, "GAN": gan}
    perceptual = 0.0
    for rho, f, r in zip(layer_names, fake_feats, real_feats):
        term = (f - r).abs().mean()
        comps[f"VGG_{rho}"] = term
        perceptual = perceptual + term
    l1w, ganw, vggw = lambdas
    total = l1w * l1 + ganw * gan + vggw * perceptual
    bad = [k for k, v in comps.items() if not torch.isfinite(v)]
    if bad or not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite generator loss components: {bad or ['total']} "
                            f"({ {k: v.item() for k, v in comps.items()} })")
    return total, comps


def loss_discriminator(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    if d_real.shape != d_fake.shape:
        raise ValueError(f"patch maps differ in shape: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    return 0.5 * (bce(d_real, 1) + bce(d_fake, 0))


# -- data ---------------------------------------------------------------------

def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """H x W x 3 uint8 -> 3 x H x W float in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 127.5 - 1.0


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """3 x H x W in [-1, 1] -> H x W x 3 uint8 (rounded)."""
    arr = ((t.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def heatmap_tensor(smap: SemanticMap) -> torch.Tensor:
    return torch.from_numpy(to_heatmap(smap).channels.astype(np.float32))


def pose_input(map_a: SemanticMap, map_b: SemanticMap) -> torch.Tensor:
    """Depth-stacked [H_A; H_B], 12 x S x S."""
    if map_a.shape != map_b.shape:
        raise ValueError("source and target maps must share a size")
    return torch.cat([heatmap_tensor(map_a), heatmap_tensor(map_b)], dim=0)


IMAGE_FILL = 238  # light grey behind resized fashion shots


def canonical_sample(image: np.ndarray, smap: SemanticMap, size: int) -> tuple[np.ndarray, SemanticMap]:
    """Resize an image and its map onto a size x size canvas with identical geometry."""
    if image.shape[:2] != smap.shape:
        raise ValueError(f"image {image.shape[:2]} and map {smap.shape} differ in size")
    img, _ = resize_pad_array(image, size, size, fill=IMAGE_FILL)
    return img, fit_to_shape(smap, size, size)[0]


@dataclass
class RenderPair:
    image_a: np.ndarray  # H x W x 3 uint8
    map_a: SemanticMap  # stage-3 taxonomy
    image_b: np.ndarray
    map_b: SemanticMap


def _stack_pairs(pairs: Sequence[RenderPair], size: int):
    ia, ib, pose = [], [], []
    for p in pairs:
        for img, m in ((p.image_a, p.map_a), (p.image_b, p.map_b)):
            if img.shape[:2] != (size, size) or m.shape != (size, size):
                raise ValueError(f"render pairs must be {size}x{size}; got image {img.shape[:2]}, map {m.shape}")
        ia.append(image_to_tensor(p.image_a))
        ib.append(image_to_tensor(p.image_b))
        pose.append(pose_input(p.map_a, p.map_b))
    return torch.stack(ia), torch.stack(pose), torch.stack(ib)


# -- training -----------------------------------------------------------------

@dataclass
class RendererBundle:
    generator: AttentionGatedGenerator
    discriminator: PatchDiscriminator
    config: RendererConfig
    log: list = field(default_factory=list)

    def render(self, image_a: np.ndarray, map_a: SemanticMap, map_b: SemanticMap) -> torch.Tensor:
        """Eval-mode forward pass for one exemplar; returns 3 x S x S in [-1, 1]."""
        g = self.generator.eval()
        with torch.no_grad():
            return g(image_to_tensor(image_a)[None], pose_input(map_a, map_b)[None])[0]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_state):
        super().__init__(message)
        self.last_good_state = last_good_state


def build_networks(config: RendererConfig):
    torch.manual_seed(config.seed)
    G = AttentionGatedGenerator(config.base_channels, config.attention_mode)
    D = PatchDiscriminator(6, config.base_channels)
    init_weights(G, config.init_std)
    init_weights(D, config.init_std)
    return G, D


def make_optimizer(params, config: RendererConfig):
    return torch.optim.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2),
                            eps=config.eps, weight_decay=config.weight_decay)


def _snapshot(G, D):
    return {"generator": {k: v.clone() for k, v in G.state_dict().items()},
            "discriminator": {k: v.clone() for k, v in D.state_dict().items()}}


def train_renderer(pairs: Sequence[RenderPair], config: RendererConfig, phi=None,
                   log_path=None, steps: int | None = None, on_step: Callable | None = None):
    """Alternating discriminator/generator updates at a fixed learning rate.

    ``phi`` defaults to the frozen VGG-19 extractor at ``config.perceptual_layers``.
    Returns a ``RendererBundle`` whose ``log`` holds one record per step.
    """
    if not pairs:
        raise ValueError("cannot train on an empty dataset")
    if phi is None:
        from .backbones import vgg19_features
        phi = vgg19_features(config.perceptual_layers)
    steps = config.steps if steps is None else steps
    G, D = build_networks(config)
    opt_g, opt_d = make_optimizer(G.parameters(), config), make_optimizer(D.parameters(), config)
    ia, pose, ib = _stack_pairs(pairs, config.image_size)
    rng = np.random.default_rng(config.seed)
    order, cursor = rng.permutation(len(pairs)), 0
    lambdas = (config.lambda1, config.lambda2, config.lambda3)
    log = []
    last_good = _snapshot(G, D)
    fh = open(log_path, "w") if log_path else None
    try:
        G.train()
        D.train()
        for step in range(1, steps + 1):
            idx = []
            while len(idx) < min(config.batch_size, len(pairs)):
                if cursor == len(order):
                    order, cursor = rng.permutation(len(pairs)), 0
                idx.append(order[cursor])
                cursor += 1
            a, p, b = ia[idx], pose[idx], ib[idx]
            fake = G(a, p)

            opt_d.zero_grad(set_to_none=True)
            d_loss = loss_discriminator(D(a, b), D(a, fake.detach()))
            if not torch.isfinite(d_loss):
                raise TrainingDiverged(f"non-finite discriminator loss at step {step}", last_good)
            d_loss.backward()
            opt_d.step()

            opt_g.zero_grad(set_to_none=True)
            try:
                total, comps = loss_generator(fake, b, a, D, phi, lambdas, config.perceptual_layers)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(f"step {step}: {exc}", last_good) from exc
            total.backward()
            opt_g.step()

            record = {"step": step, **{k: v.item() for k, v in comps.items()},
                      "D": d_loss.item(), "total": total.item()}
            log.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
            if on_step:
                on_step(record)
            if step % 50 == 0:
                last_good = _snapshot(G, D)
    finally:
        if fh:
            fh.close()
    return RendererBundle(G, D, config, log)


def save_renderer(bundle: RendererBundle, path) -> None:
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "config": asdict(bundle.config), "seed": bundle.config.seed,
                "generator": bundle.generator.state_dict(),
                "discriminator": bundle.discriminator.state_dict()}, path)


def load_renderer(path) -> RendererBundle:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a renderer checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported renderer checkpoint version {ckpt.get('version')}")
    config = RendererConfig.from_dict(ckpt["config"])
    G = AttentionGatedGenerator(config.base_channels, config.attention_mode)
    D = PatchDiscriminator(6, config.base_channels)
    G.load_state_dict(ckpt["generator"])
    D.load_state_dict(ckpt["discriminator"])
    return RendererBundle(G.eval(), D.eval(), config)


def load_config_file(path) -> RendererConfig:
    return RendererConfig.from_dict(json.loads(Path(path).read_text()))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

