"""Backbone/neck building blocks: Conv-BN-SiLU, channel shuffle, the
adaptive split-and-shuffle block, multi-scale channel attention, and fast
spatial pyramid pooling.

Parameter arithmetic is part of the contract: a Conv-BN pair costs
``in_c * out_c * k^2 + 2 * out_c`` (bias-free convolution plus two
learnable values per normalized channel), and the audit module asserts
these counts against the reference architecture table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ConfigurationError, DomainError


def validate_feature_map(x: torch.Tensor) -> None:
    """Feature maps are (batch, channels, height, width) with finite values."""
    if x.ndim != 4:
        raise DomainError(f"feature map must be 4-D, got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise DomainError(f"feature map dimensions must be >= 1, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise DomainError("feature map contains non-finite values")


class ConvBNAct(nn.Module):
    """Bias-free convolution + per-channel normalization + SiLU."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        groups: int = 1,
        act: bool = True,
    ):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        self.conv = nn.Conv2d(
            in_channels,
            out_channels,
            kernel,
            stride=stride,
            padding=kernel // 2,
            groups=groups,
            bias=False,
        )
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.conv(x)))


def conv_bn_act(
    in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1
) -> ConvBNAct:
    """Standard downsampling/feature block used throughout the backbone."""
    return ConvBNAct(in_channels, out_channels, kernel=kernel, stride=stride)


def conv_bn_params(in_channels: int, out_channels: int, kernel: int) -> int:
    """Closed-form parameter count of a Conv-BN pair."""
    return in_channels * out_channels * kernel * kernel + 2 * out_channels


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Interleave channel groups: with groups=2 over channels [0..7] the
    output order is (0, 4, 1, 5, 2, 6, 3, 7)."""
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigurationError(f"{c} channels not divisible by {groups} groups")
    return (
        x.view(b, groups, c // groups, h, w)
        .transpose(1, 2)
        .reshape(b, c, h, w)
    )


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class ALSSConfig:
    """Adaptive split-and-shuffle block configuration.

    The input is split into a cheap path of ``split_channels`` channels
    (identity at stride 1, depthwise 3x3 at stride 2) and a bottleneck
    path (1x1 reduce, 3x3 spatial, 1x1 expand) producing the remaining
    output channels; the concatenation is channel-shuffled.
    """

    in_channels: int
    out_channels: int
    split_fraction: float = 0.25
    stride: int = 1
    bottleneck_ratio: float = 0.5
    shuffle_groups: int = 2
    dw_main: bool = False

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if not 0.0 <= self.split_fraction < 1.0:
            raise ConfigurationError("split_fraction must be in [0, 1)")
        if self.out_channels % self.shuffle_groups != 0:
            raise ConfigurationError(
                f"{self.out_channels} output channels not divisible by "
                f"{self.shuffle_groups} shuffle groups"
            )
        if self.main_out_channels < 1 or self.main_in_channels < 1:
            raise ConfigurationError(
                "split leaves no channels for the bottleneck path"
            )

    @property
    def split_channels(self) -> int:
        return _round_half_up(self.in_channels * self.split_fraction)

    @property
    def main_in_channels(self) -> int:
        return self.in_channels - self.split_channels

    @property
    def main_out_channels(self) -> int:
        return self.out_channels - self.split_channels

    @property
    def mid_channels(self) -> int:
        return max(1, _round_half_up(self.main_out_channels * self.bottleneck_ratio))

    def parameter_count(self) -> int:
        mid = self.mid_channels
        spatial = 9 * mid + 2 * mid if self.dw_main else 9 * mid * mid + 2 * mid
        total = (
            self.main_in_channels * mid
            + 2 * mid
            + spatial
            + mid * self.main_out_channels
            + 2 * self.main_out_channels
        )
        if self.stride == 2 and self.split_channels:
            total += 11 * self.split_channels  # depthwise 3x3 + norm
        return total


class ALSSBlock(nn.Module):
    """Channel split, bottleneck, concat, and shuffle (stride 1 or 2)."""

    def __init__(self, cfg: ALSSConfig):
        super().__init__()
        self.cfg = cfg
        c_skip = cfg.split_channels
        mid = cfg.mid_channels
        if c_skip and cfg.stride == 2:
            self.cheap = ConvBNAct(c_skip, c_skip, 3, stride=2, groups=c_skip, act=False)
        else:
            self.cheap = nn.Identity()
        self.reduce = ConvBNAct(cfg.main_in_channels, mid, 1)
        self.spatial = ConvBNAct(
            mid,
            mid,
            3,
            stride=cfg.stride,
            groups=mid if cfg.dw_main else 1,
            act=not cfg.dw_main,
        )
        self.expand = ConvBNAct(mid, cfg.main_out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise ConfigurationError(
                f"expected {cfg.in_channels} input channels, got {x.shape[1]}"
            )
        c_skip = cfg.split_channels
        if c_skip:
            skip, main = torch.split(x, [c_skip, cfg.main_in_channels], dim=1)
            skip = self.cheap(skip)
        else:
            main = x
            skip = None
        main = self.expand(self.spatial(self.reduce(main)))
        out = main if skip is None else torch.cat([skip, main], dim=1)
        return channel_shuffle(out, cfg.shuffle_groups)


@dataclass(frozen=True)
class MSCAConfig:
    """Multi-scale channel attention configuration.

    Channels are compressed by ``alpha`` through a 3x3 convolution, pooled
    to four fixed sizes, passed through matching depthwise kernels without
    padding (each branch collapsing to 1x1), concatenated, and expanded
    back to a sigmoid gate. Depthwise branches carry no activation unless
    ``use_activation_after_dw`` is set; every convolution is bias-free and
    unnormalized, which reproduces the reference parameter budget exactly.
    """

    channels: int
    alpha: float = 1.0 / 32.0
    use_activation_after_dw: bool = False
    pooled_sizes: tuple[int, int, int, int] = (1, 3, 3, 5)
    dw_kernels: tuple[int, int, int, int] = (1, 3, 3, 5)
    norm_after_reduce: bool = False
    bias: bool = False

    def __post_init__(self):
        if len(self.pooled_sizes) != len(self.dw_kernels):
            raise ConfigurationError("pooled_sizes and dw_kernels lengths differ")
        for size, kernel in zip(self.pooled_sizes, self.dw_kernels):
            if size != kernel:
                raise ConfigurationError(
                    "each branch needs pooled size == kernel so the unpadded "
                    "depthwise convolution collapses to 1x1"
                )

    @property
    def reduced_channels(self) -> int:
        return max(1, _round_half_up(self.alpha * self.channels))

    def parameter_count(self) -> int:
        r = self.reduced_channels
        n = len(self.dw_kernels)
        total = self.channels * r * 9 + sum(k * k for k in self.dw_kernels) * r
        total += n * r * self.channels
        if self.bias:
            total += r + n * r + self.channels
        if self.norm_after_reduce:
            total += 2 * r
        return total


class MSCA(nn.Module):
    """Channel-reduce, four pooled depthwise branches, expand, sigmoid gate."""

    def __init__(self, cfg: MSCAConfig):
        super().__init__()
        self.cfg = cfg
        r = cfg.reduced_channels
        self.reduce = nn.Conv2d(cfg.channels, r, 3, padding=1, bias=cfg.bias)
        self.reduce_norm = nn.BatchNorm2d(r) if cfg.norm_after_reduce else nn.Identity()
        self.reduce_act = nn.SiLU()
        branches = []
        for size, kernel in zip(cfg.pooled_sizes, cfg.dw_kernels):
            layers: list[nn.Module] = [
                nn.AdaptiveAvgPool2d(size),
                nn.Conv2d(r, r, kernel, groups=r, bias=cfg.bias),
            ]
            if cfg.use_activation_after_dw:
                layers.append(nn.SiLU())
            branches.append(nn.Sequential(*layers))
        self.branches = nn.ModuleList(branches)
        self.expand = nn.Conv2d(len(branches) * r, cfg.channels, 1, bias=cfg.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.channels:
            raise ConfigurationError(
                f"expected {self.cfg.channels} input channels, got {x.shape[1]}"
            )
        z = self.reduce_act(self.reduce_norm(self.reduce(x)))
        pooled = torch.cat([branch(z) for branch in self.branches], dim=1)
        gate = torch.sigmoid(self.expand(pooled))
        return x * gate


class SPPF(nn.Module):
    """1x1 reduce, three chained stride-1 max pools, concat, 1x1 expand."""

    def __init__(self, in_channels: int, out_channels: int, pool_kernel: int = 5):
        super().__init__()
        if in_channels % 2 != 0:
            raise ConfigurationError(
                f"SPPF input channels must be even, got {in_channels}"
            )
        hidden = in_channels // 2
        self.reduce = ConvBNAct(in_channels, hidden, 1)
        self.pool = nn.MaxPool2d(pool_kernel, stride=1, padding=pool_kernel // 2)
        self.expand = ConvBNAct(hidden * 4, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y0 = self.reduce(x)
        y1 = self.pool(y0)
        y2 = self.pool(y1)
        y3 = self.pool(y2)
        return self.expand(torch.cat([y0, y1, y2, y3], dim=1))


def sppf(in_channels: int, out_channels: int) -> SPPF:
    return SPPF(in_channels, out_channels)


def sppf_params(in_channels: int, out_channels: int) -> int:
    """Closed-form SPPF parameter count via the Conv-BN formula."""
    hidden = in_channels // 2
    return conv_bn_params(in_channels, hidden, 1) + conv_bn_params(
        4 * hidden, out_channels, 1
    )


def module_params(module: nn.Module) -> int:
    """Total parameter count, including frozen parameters."""
    return sum(p.numel() for p in module.parameters())
