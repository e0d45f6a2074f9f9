"""Frozen ImageNet backbones used as fixed feature extractors.

Weights are read from the directory named by ``PERSONINSERT_WEIGHTS`` (the
torchvision checkpoint files, e.g. ``vgg19-dcbb9e9d.pth``). When no file is
found the architecture is initialised from a fixed seed instead, which keeps
every extractor deterministic but means its features carry no ImageNet
semantics; ``weights_source`` records which case applies.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import torch
from torch import nn
from torchvision import models

log = logging.getLogger(__name__)

WEIGHTS_ENV = "PERSONINSERT_WEIGHTS"
FALLBACK_SEED = 20240101

_FILES = {
    "vgg19": "vgg19-dcbb9e9d.pth",
    "squeezenet1_1": "squeezenet1_1-b8a52dc0.pth",
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _build(arch: str) -> tuple[nn.Module, str]:
    # forked so building an extractor never perturbs the caller's RNG stream
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(FALLBACK_SEED)
        net = getattr(models, arch)(weights=None)
    root = os.environ.get(WEIGHTS_ENV)
    if root:
        path = Path(root) / _FILES[arch]
        if path.is_file():
            net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
            return net, f"file:{path.name}"
        log.warning("%s not found in %s; using seeded initialisation", _FILES[arch], root)
    return net, f"seeded:{FALLBACK_SEED}"


class FrozenFeatures(nn.Module):
    """Prefix slices of a convolutional trunk, frozen and always in eval mode.

    ``forward`` takes images in [-1, 1] (N, 3, H, W) and returns the outputs
    after each requested number of trunk layers.
    """

    def __init__(self, trunk: nn.Sequential, layers: tuple[int, ...], source: str, name: str):
        super().__init__()
        if not layers or sorted(layers) != list(layers) or layers[0] < 1 or layers[-1] > len(trunk):
            raise ValueError(f"layer indices must be increasing within 1..{len(trunk)}, got {layers}")
        self.layers = tuple(layers)
        self.trunk = trunk[: layers[-1]]
        for m in self.trunk.modules():
            if hasattr(m, "inplace"):
                m.inplace = False  # tapped outputs must not be overwritten by the next layer
        self.weights_source = source
        self.name = name
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = ((x + 1) / 2 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        outs = []
        for i, layer in enumerate(self.trunk, start=1):
            x = layer(x)
            if i in self.layers:
                outs.append(x)
        return outs


def vgg19_features(layers: tuple[int, ...] = (4, 9)) -> FrozenFeatures:
    """VGG-19 trunk; layer ``k`` means the output after the first ``k`` modules.

    With the torchvision module order, 4 is relu1_2 and 9 is relu2_2; 37 is
    the whole trunk including the final pooling.
    """
    net, source = _build("vgg19")
    return FrozenFeatures(net.features, layers, source, "vgg19")


def squeezenet_features(layers: tuple[int, ...] = (2, 5, 8, 10, 11, 12, 13)) -> FrozenFeatures:
    net, source = _build("squeezenet1_1")
    return FrozenFeatures(net.features, layers, source, "squeezenet1_1")
