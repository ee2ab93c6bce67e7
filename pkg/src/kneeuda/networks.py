"""Networks: 3D DenseNet encoder, linear classification head, MLP domain
discriminator, and the focal loss.

The encoder follows the DenseNet recipe (BN-ReLU-1x1 bottleneck,
BN-ReLU-3x3 growth layer, channel-halving transitions with average
pooling) in 3D. ``densenet121_config`` gives the full-size (6, 12, 24,
16) layout; ``desk_config`` a small layout that trains on CPU in
minutes. Both heads output raw logits; sigmoids live in the losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    input_shape: tuple[int, int, int] = (48, 48, 24)
    block_layers: tuple[int, ...] = (2, 2, 2)
    growth_rate: int = 8
    init_channels: int = 8
    bottleneck_factor: int = 4
    stem_kernel: int = 7

    def __post_init__(self):
        if self.growth_rate <= 0 or self.init_channels <= 0 or not self.block_layers:
            raise ValueError("encoder config fields must be positive")

    @property
    def feature_dim(self) -> int:
        ch = self.init_channels
        for i, n_layers in enumerate(self.block_layers):
            ch += n_layers * self.growth_rate
            if i != len(self.block_layers) - 1:
                ch //= 2
        return ch


def densenet121_config(input_shape=(256, 256, 128)) -> EncoderConfig:
    return EncoderConfig(input_shape=input_shape, block_layers=(6, 12, 24, 16),
                         growth_rate=32, init_channels=64)


def desk_config(input_shape=(48, 48, 24)) -> EncoderConfig:
    return EncoderConfig(input_shape=input_shape)


class _DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int, bottleneck_factor: int):
        super().__init__()
        inter = bottleneck_factor * growth_rate
        self.norm1 = nn.BatchNorm3d(in_channels)
        self.conv1 = nn.Conv3d(in_channels, inter, kernel_size=1, bias=False)
        self.norm2 = nn.BatchNorm3d(inter)
        self.conv2 = nn.Conv3d(inter, growth_rate, kernel_size=3, padding=1, bias=False)

    def forward(self, x):
        out = self.conv1(F.relu(self.norm1(x)))
        out = self.conv2(F.relu(self.norm2(out)))
        return torch.cat([x, out], dim=1)


class _Transition(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.norm = nn.BatchNorm3d(in_channels)
        self.conv = nn.Conv3d(in_channels, out_channels, kernel_size=1, bias=False)
        self.pool = nn.AvgPool3d(kernel_size=2, stride=2, ceil_mode=True)

    def forward(self, x):
        return self.pool(self.conv(F.relu(self.norm(x))))


class Encoder3D(nn.Module):
    """Volume (N, X, Y, Z) or (N, 1, X, Y, Z) -> features (N, F)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.stem_kernel
        self.stem = nn.Sequential(
            nn.Conv3d(1, cfg.init_channels, kernel_size=k, stride=2,
                      padding=k // 2, bias=False),
            nn.BatchNorm3d(cfg.init_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(kernel_size=3, stride=2, padding=1),
        )
        blocks = []
        ch = cfg.init_channels
        for i, n_layers in enumerate(cfg.block_layers):
            for _ in range(n_layers):
                blocks.append(_DenseLayer(ch, cfg.growth_rate, cfg.bottleneck_factor))
                ch += cfg.growth_rate
            if i != len(cfg.block_layers) - 1:
                blocks.append(_Transition(ch, ch // 2))
                ch //= 2
        self.blocks = nn.Sequential(*blocks)
        self.final_norm = nn.BatchNorm3d(ch)
        self.feature_dim = ch
        assert ch == cfg.feature_dim

    def forward(self, x):
        if x.dim() == 4:
            x = x.unsqueeze(1)
        x = self.stem(x)
        x = self.blocks(x)
        x = F.relu(self.final_norm(x))
        return F.adaptive_avg_pool3d(x, 1).flatten(1)


class Head(nn.Module):
    """Single affine map F -> 1 logit."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.fc = nn.Linear(feature_dim, 1)

    def forward(self, features):
        return self.fc(features)


class Discriminator(nn.Module):
    """MLP over pooled features -> 1 domain logit."""

    def __init__(self, feature_dim: int, hidden=(256, 128), negative_slope: float = 0.2):
        super().__init__()
        layers = []
        prev = feature_dim
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.LeakyReLU(negative_slope)]
            prev = width
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, features):
        return self.net(features)


def build_encoder(cfg: EncoderConfig, seed: int | None = None) -> Encoder3D:
    if seed is not None:
        torch.manual_seed(seed)
    return Encoder3D(cfg)


def build_head(feature_dim: int, seed: int | None = None) -> Head:
    if seed is not None:
        torch.manual_seed(seed)
    return Head(feature_dim)


def build_discriminator(feature_dim: int, hidden=(256, 128),
                        seed: int | None = None) -> Discriminator:
    if seed is not None:
        torch.manual_seed(seed)
    return Discriminator(feature_dim, hidden)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               gamma: float = 1.0, eps: float = 1e-12) -> torch.Tensor:
    """-(1 - p_t)^gamma * log(p_t) with p_t the predicted probability of
    the true class; mean over the batch. gamma=0 reduces to BCE."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    logits = logits.reshape(-1)
    targets = targets.reshape(-1).to(logits.dtype)
    p = torch.sigmoid(logits)
    p_t = torch.where(targets > 0.5, p, 1.0 - p)
    loss = -((1.0 - p_t) ** gamma) * torch.log(p_t.clamp_min(eps))
    return loss.mean()
