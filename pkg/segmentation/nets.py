"""
Generator (segmentation backbone) and discriminator networks.

Tensor layout throughout: images (B, 1, H, W) float, hard masks (B, H, W) int64,
soft predictions (B, C, H, W) with channels summing to 1 per pixel.
"""

from __future__ import annotations

import abc
import logging
from typing import List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from shared.errors import ShapeError

logger = logging.getLogger(__name__)

DISCRIMINATOR_CHANNELS: Tuple[int, ...] = (64, 128, 256, 512)
LEAKY_SLOPE = 0.2
DROPOUT_P = 0.5
SIMPLEX_ATOL = 1e-6


class DiscriminatorOutput(NamedTuple):
    prob_real: torch.Tensor  # (B,) in [0, 1]
    features: torch.Tensor  # (B, 512, H/16, W/16) for the default tap


class GeneratorBackbone(nn.Module, abc.ABC):
    """
    Pluggable segmentation network: (B, in_channels, H, W) -> (B, n_classes, H, W) probabilities.

    Subclasses implement forward() and must return a per-pixel softmax. Any
    backbone honouring this contract can be handed to the trainer.
    """

    in_channels: int
    n_classes: int

    @abc.abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ...

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def architecture(self) -> dict:
        return {"class": type(self).__name__, "in_channels": self.in_channels, "n_classes": self.n_classes}


class _DoubleConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class ReferenceGenerator(GeneratorBackbone):
    """Three-stage U-Net style encoder-decoder with skip connections and a softmax head."""

    DOWNSAMPLE_FACTOR = 8

    def __init__(self, in_channels: int = 1, n_classes: int = 2, base_width: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.base_width = base_width
        w = base_width

        self.enc1 = _DoubleConv(in_channels, w)
        self.enc2 = _DoubleConv(w, 2 * w)
        self.enc3 = _DoubleConv(2 * w, 4 * w)
        self.bottleneck = _DoubleConv(4 * w, 8 * w)
        self.pool = nn.MaxPool2d(2)

        self.up3 = nn.ConvTranspose2d(8 * w, 4 * w, kernel_size=2, stride=2)
        self.dec3 = _DoubleConv(8 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, kernel_size=2, stride=2)
        self.dec2 = _DoubleConv(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, kernel_size=2, stride=2)
        self.dec1 = _DoubleConv(2 * w, w)
        self.head = nn.Conv2d(w, n_classes, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Generator expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.DOWNSAMPLE_FACTOR or w % self.DOWNSAMPLE_FACTOR:
            raise ShapeError(f"Generator input {h}x{w} is not divisible by {self.DOWNSAMPLE_FACTOR}")

        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        b = self.bottleneck(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.logits(x), dim=1)

    def architecture(self) -> dict:
        return {**super().architecture(), "base_width": self.base_width}


def build_reference_generator(in_channels: int = 1, n_classes: int = 2, base_width: int = 16) -> ReferenceGenerator:
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if base_width < 4:
        raise ValueError(f"base_width must be >= 4, got {base_width}")
    net = ReferenceGenerator(in_channels=in_channels, n_classes=n_classes, base_width=base_width)
    logger.info(f"Reference generator: base_width={base_width}, {net.parameter_count():,} parameters")
    return net


class Discriminator(nn.Module):
    """
    Four 4x4 stride-2 convolutions (64, 128, 256, 512), each followed by leaky ReLU
    and dropout, then global average pooling, one affine unit and a sigmoid.

    `feature_layer` (1..4) selects the activation returned as the feature-matching
    tap; it is taken after the leaky ReLU and before that layer's dropout.
    """

    SPATIAL_DIVISOR = 16

    def __init__(self, in_channels: int, feature_layer: int = 4):
        super().__init__()
        if not 1 <= feature_layer <= len(DISCRIMINATOR_CHANNELS):
            raise ValueError(f"feature_layer must be in 1..{len(DISCRIMINATOR_CHANNELS)}, got {feature_layer}")
        self.in_channels = in_channels
        self.feature_layer = feature_layer

        convs = []
        prev = in_channels
        for ch in DISCRIMINATOR_CHANNELS:
            convs.append(nn.Conv2d(prev, ch, kernel_size=4, stride=2, padding=1))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.drops = nn.ModuleList(nn.Dropout2d(DROPOUT_P) for _ in DISCRIMINATOR_CHANNELS)
        self.fc = nn.Linear(DISCRIMINATOR_CHANNELS[-1], 1)

    @property
    def channel_sequence(self) -> Tuple[int, ...]:
        return tuple(conv.out_channels for conv in self.convs)

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Discriminator expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.SPATIAL_DIVISOR or w % self.SPATIAL_DIVISOR:
            raise ShapeError(f"Discriminator input {h}x{w} is not divisible by {self.SPATIAL_DIVISOR}")

        features: Optional[torch.Tensor] = None
        for k, (conv, drop) in enumerate(zip(self.convs, self.drops), start=1):
            x = self.act(conv(x))
            if k == self.feature_layer:
                features = x
            x = drop(x)

        pooled = x.mean(dim=(2, 3))
        prob_real = torch.sigmoid(self.fc(pooled)).squeeze(1)
        return DiscriminatorOutput(prob_real=prob_real, features=features)

    def architecture(self) -> dict:
        return {
            "class": type(self).__name__,
            "in_channels": self.in_channels,
            "feature_layer": self.feature_layer,
            "channels": list(self.channel_sequence),
        }


def build_discriminator(in_channels: int, feature_layer: int = 4) -> Discriminator:
    """in_channels is 1 + C: the image channel followed by C mask channels."""
    if in_channels < 3:
        raise ValueError(f"in_channels must be 1 + n_classes >= 3, got {in_channels}")
    return Discriminator(in_channels=in_channels, feature_layer=feature_layer)


def one_hot_mask(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """(B, H, W) int64 -> (B, C, H, W) float one-hot."""
    if labels.dim() != 3:
        raise ShapeError(f"Hard masks must be (B, H, W), got {tuple(labels.shape)}")
    return F.one_hot(labels.long(), num_classes=n_classes).permute(0, 3, 1, 2).float()


def concat_image_mask(x: torch.Tensor, m: torch.Tensor, n_classes: int = 2) -> torch.Tensor:
    """
    Concatenate images and masks along channels: [image, class 0, ..., class C-1].

    `m` is either a soft prediction (B, C, H, W) or a hard mask (B, H, W), which is
    one-hot encoded with `n_classes` channels first.
    """
    if x.dim() != 4:
        raise ShapeError(f"Images must be (B, 1, H, W), got {tuple(x.shape)}")
    if not torch.is_floating_point(m):
        m = one_hot_mask(m, n_classes)
    if m.dim() != 4:
        raise ShapeError(f"Masks must be (B, C, H, W) or (B, H, W), got {tuple(m.shape)}")
    if m.shape[0] != x.shape[0] or m.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"Image batch {tuple(x.shape)} and mask batch {tuple(m.shape)} do not agree")
    return torch.cat([x, m.to(x.dtype)], dim=1)


def check_soft_prediction(probs: torch.Tensor, atol: float = SIMPLEX_ATOL) -> None:
    """Raise ValueError unless probs is a valid (B, C, H, W) per-pixel probability field."""
    if probs.dim() != 4:
        raise ShapeError(f"Soft predictions must be (B, C, H, W), got {tuple(probs.shape)}")
    if probs.min() < 0 or probs.max() > 1:
        raise ValueError("Soft prediction values must lie in [0, 1]")
    sums = probs.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol, rtol=0.0):
        raise ValueError("Soft prediction channels must sum to 1 at every pixel")
