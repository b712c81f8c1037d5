"""Detection/segmentation head: distribution-binned box regression,
class logits, bounded mask coefficients, and prototype mask assembly.

The head consumes three feature scales. Prototypes come from the
highest-resolution input through a convolution, a learnable 2x upsample,
and two further convolutions; instance masks are the sigmoid of the
coefficient-weighted prototype sum, cropped to the instance box and
thresholded at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..errors import ConfigurationError, DomainError
from ..types import BBox, Bitmap, MaskInstance
from .blocks import ConvBNAct


@dataclass(frozen=True)
class SegmentHeadConfig:
    """Head widths; the defaults reproduce the reference audit budget.

    Branch widths derive from the first (highest-resolution) input scale
    unless overridden: box branch max(16, ch0/4, 4*reg_max), class branch
    max(ch0, min(num_classes, 100)), coefficient branch
    max(ch0/4, num_prototypes), prototype stem ch0.
    """

    in_channels: tuple[int, int, int] = (48, 88, 176)
    strides: tuple[int, int, int] = (8, 16, 32)
    num_classes: int = 1
    reg_max: int = 24
    num_prototypes: int = 32
    box_width: int | None = None
    cls_width: int | None = None
    coef_width: int | None = None
    proto_width: int | None = None

    def __post_init__(self):
        if self.num_prototypes < 1:
            raise ConfigurationError("num_prototypes must be >= 1")
        if self.reg_max < 1:
            raise ConfigurationError("reg_max must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if len(self.in_channels) != 3 or len(self.strides) != 3:
            raise ConfigurationError("head expects exactly three scales")

    @property
    def resolved_box_width(self) -> int:
        return self.box_width or max(16, self.in_channels[0] // 4, 4 * self.reg_max)

    @property
    def resolved_cls_width(self) -> int:
        return self.cls_width or max(self.in_channels[0], min(self.num_classes, 100))

    @property
    def resolved_coef_width(self) -> int:
        return self.coef_width or max(self.in_channels[0] // 4, self.num_prototypes)

    @property
    def resolved_proto_width(self) -> int:
        return self.proto_width or self.in_channels[0]


class DFL(nn.Module):
    """Expectation over a softmax distribution of reg_max bins per side.

    The projection weights are fixed (0..reg_max-1) and frozen but still
    counted as parameters.
    """

    def __init__(self, reg_max: int):
        super().__init__()
        self.reg_max = reg_max
        conv = nn.Conv2d(reg_max, 1, 1, bias=False)
        conv.weight.data[:] = torch.arange(reg_max, dtype=torch.float32).view(
            1, reg_max, 1, 1
        )
        conv.weight.requires_grad_(False)
        self.proj = conv

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 4*reg_max, N) distribution logits -> (B, 4, N) distances."""
        b, _, n = x.shape
        x = x.view(b, 4, self.reg_max, n).transpose(1, 2)
        return self.proj(x.softmax(dim=1)).view(b, 4, n)


class Proto(nn.Module):
    """Prototype stem: conv, learnable 2x upsample, then two convolutions."""

    def __init__(self, in_channels: int, mid_channels: int, num_prototypes: int):
        super().__init__()
        self.cv1 = ConvBNAct(in_channels, mid_channels, 3)
        self.upsample = nn.ConvTranspose2d(mid_channels, mid_channels, 2, 2, 0, bias=True)
        self.cv2 = ConvBNAct(mid_channels, mid_channels, 3)
        self.cv3 = ConvBNAct(mid_channels, num_prototypes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.cv3(self.cv2(self.upsample(self.cv1(x))))


@dataclass
class SegmentOutputs:
    """Per-scale head outputs plus shared prototype maps."""

    dist_bins: list[torch.Tensor] = field(default_factory=list)
    boxes_ltrb: list[torch.Tensor] = field(default_factory=list)
    class_logits: list[torch.Tensor] = field(default_factory=list)
    coefficients: list[torch.Tensor] = field(default_factory=list)
    prototypes: torch.Tensor | None = None


class SegmentHead(nn.Module):
    """Anchor-free detect+segment head over three feature scales."""

    def __init__(self, cfg: SegmentHeadConfig):
        super().__init__()
        self.cfg = cfg
        c2 = cfg.resolved_box_width
        c3 = cfg.resolved_cls_width
        c4 = cfg.resolved_coef_width
        self.box_branches = nn.ModuleList(
            nn.Sequential(
                ConvBNAct(ch, c2, 3),
                ConvBNAct(c2, c2, 3),
                nn.Conv2d(c2, 4 * cfg.reg_max, 1),
            )
            for ch in cfg.in_channels
        )
        self.cls_branches = nn.ModuleList(
            nn.Sequential(
                ConvBNAct(ch, c3, 3),
                ConvBNAct(c3, c3, 3),
                nn.Conv2d(c3, cfg.num_classes, 1),
            )
            for ch in cfg.in_channels
        )
        self.coef_branches = nn.ModuleList(
            nn.Sequential(
                ConvBNAct(ch, c4, 3),
                ConvBNAct(c4, c4, 3),
                nn.Conv2d(c4, cfg.num_prototypes, 1),
            )
            for ch in cfg.in_channels
        )
        self.proto = Proto(
            cfg.in_channels[0], cfg.resolved_proto_width, cfg.num_prototypes
        )
        self.dfl = DFL(cfg.reg_max)

    def forward(self, features: list[torch.Tensor]) -> SegmentOutputs:
        cfg = self.cfg
        if len(features) != 3:
            raise ConfigurationError(f"expected 3 scales, got {len(features)}")
        for feat, ch in zip(features, cfg.in_channels):
            if feat.shape[1] != ch:
                raise ConfigurationError(
                    f"scale channel mismatch: expected {cfg.in_channels}, got "
                    f"{tuple(f.shape[1] for f in features)}"
                )
        out = SegmentOutputs()
        for i, feat in enumerate(features):
            bins = self.box_branches[i](feat)
            b, _, h, w = bins.shape
            out.dist_bins.append(bins)
            ltrb = self.dfl(bins.view(b, 4 * cfg.reg_max, h * w)).view(b, 4, h, w)
            out.boxes_ltrb.append(ltrb)
            out.class_logits.append(self.cls_branches[i](feat))
            out.coefficients.append(torch.tanh(self.coef_branches[i](feat)))
        out.prototypes = self.proto(features[0])
        return out


def prototype_combination(
    prototypes: np.ndarray, coefficients: np.ndarray
) -> np.ndarray:
    """Sigmoid of the coefficient-weighted prototype sum (soft mask)."""
    prototypes = np.asarray(prototypes, dtype=float)
    coefficients = np.asarray(coefficients, dtype=float)
    if prototypes.ndim != 3:
        raise DomainError(f"prototypes must be (k, h, w), got {prototypes.shape}")
    if coefficients.shape != (prototypes.shape[0],):
        raise DomainError(
            f"{coefficients.shape[0] if coefficients.ndim else 0} coefficients "
            f"vs {prototypes.shape[0]} prototypes"
        )
    logits = np.tensordot(coefficients, prototypes, axes=1)
    return 1.0 / (1.0 + np.exp(-logits))


def assemble_instance_mask(
    prototypes: np.ndarray,
    coefficients: np.ndarray,
    box: BBox,
    image_id: str = "",
    class_id: int = 0,
    confidence: float | None = None,
) -> MaskInstance:
    """Combine prototypes, crop to the box, and threshold at 0.5.

    Box coordinates are in prototype-map pixels; a cell stays only when
    its center lies inside the box and its soft value exceeds 0.5.
    """
    soft = prototype_combination(prototypes, coefficients)
    h, w = soft.shape
    ys, xs = np.mgrid[0:h, 0:w]
    cx = xs + 0.5
    cy = ys + 0.5
    inside = (cx >= box.x_min) & (cx < box.x_max) & (cy >= box.y_min) & (cy < box.y_max)
    hard = (soft > 0.5) & inside
    return MaskInstance(
        image_id=image_id,
        class_id=class_id,
        encoding="bitmap",
        payload=Bitmap(hard),
        confidence=confidence,
    )
