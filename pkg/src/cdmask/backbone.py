"""Weight-shared hierarchical backbone producing a 4-level feature pyramid."""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """Four feature maps ordered fine to coarse (strides 4, 8, 16, 32)."""

    levels: List[torch.Tensor]
    strides: Tuple[int, ...] = STRIDES

    @property
    def channels(self) -> List[int]:
        return [f.shape[1] for f in self.levels]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass
class BackboneConfig:
    variant: str = "reference-small"
    widths: Tuple[int, ...] = (32, 64, 128, 256)
    in_channels: int = 3

    def validate(self):
        if self.variant not in ("reference-small", "pluggable-external"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if len(self.widths) != 4 or any(w <= 0 for w in self.widths):
            raise ValueError("backbone needs 4 positive stage widths")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("backbone widths must be nondecreasing")
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(x + self.bn2(self.conv2(y)))


class Stage(nn.Module):
    """Strided conv followed by two residual blocks."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        # k=7,p=3,s=4 and k=3,p=1,s=2 both give ceil(H / s) outputs
        k, p = (7, 3) if stride == 4 else (3, 1)
        self.down = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=p, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(ResidualBlock(out_ch), ResidualBlock(out_ch))

    def forward(self, x):
        return self.blocks(self.down(x))


class ReferenceBackbone(nn.Module):
    """Small 4-stage CNN; any module returning a :class:`FeaturePyramid` can replace it."""

    def __init__(self, config: BackboneConfig = None):
        super().__init__()
        config = config or BackboneConfig()
        config.validate()
        self.config = config
        chans = (config.in_channels,) + tuple(config.widths)
        self.stages = nn.ModuleList(
            Stage(chans[i], chans[i + 1], 4 if i == 0 else 2) for i in range(4)
        )

    @property
    def out_channels(self) -> Tuple[int, ...]:
        return tuple(self.config.widths)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        return extract_features(self, image)


def _check_image(image):
    if image.dim() != 4:
        raise ValueError(f"expected an (N, C, H, W) tensor, got shape {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValueError("input image contains non-finite values")


def extract_features(backbone: ReferenceBackbone, image: torch.Tensor) -> FeaturePyramid:
    _check_image(image)
    levels = []
    x = image
    for stage in backbone.stages:
        x = stage(x)
        levels.append(x)
    return FeaturePyramid(levels)


def siamese_apply(backbone: nn.Module, t1: torch.Tensor, t2: torch.Tensor):
    """Run one backbone on both epochs.

    Two separate calls (rather than one stacked batch) keep the result
    exactly symmetric under swapping ``t1`` and ``t2``, batch norm included.
    """
    if t1.shape != t2.shape:
        raise ValueError(f"temporal images differ in shape: {tuple(t1.shape)} vs {tuple(t2.shape)}")
    return backbone(t1), backbone(t2)


def pad_to_multiple(image: torch.Tensor, multiple: int = 32) -> Tuple[torch.Tensor, Sequence[int]]:
    """Reflection-pad bottom/right so H and W divide ``multiple``.

    Returns the padded tensor and the original ``(H, W)``.
    """
    h, w = image.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    # reflect needs pad < size; replicate covers tiny inputs
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(image, (0, pw, 0, ph), mode=mode), (h, w)
