"""Shared domain types: images, boxes, masks, prompts, and iteration state.

All types are immutable value objects and safe to share across workers.
Validation helpers report invariant violations instead of raising so that
callers can aggregate problems across a dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rle
from .errors import DomainError, FormatError

STATUSES = ("seed", "auto", "fine", "review", "converged")
ENCODINGS = ("bitmap", "polygon", "rle")


@dataclass(frozen=True)
class ImageRecord:
    """One dataset image: identity, pixel dimensions, and locator.

    Pixel data is referenced by ``uri`` and never held here; ``split`` is
    the train/val assignment used by evaluation protocols.
    """

    id: str
    width: int
    height: int
    uri: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image {self.id!r}: dimensions must be >= 1")
        if self.split not in ("train", "val"):
            raise DomainError(f"image {self.id!r}: unknown split {self.split!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "uri": self.uri,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(
            id=d["id"],
            width=int(d["width"]),
            height=int(d["height"]),
            uri=d.get("uri", ""),
            split=d.get("split", "train"),
        )


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, inclusive of both corners.

    Coordinates follow the image convention: origin top-left, x rightward,
    y downward. A rasterized pixel (x, y) occupies the unit cell
    [x, x+1) x [y, y+1), so the tight box around a single pixel is
    (x, y, x+1, y+1) and never has zero area.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float | None = None

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise DomainError(f"box coordinates must be finite, got {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DomainError(f"box corners out of order: {coords}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise DomainError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def with_confidence(self, confidence: float | None) -> "BBox":
        return BBox(self.x_min, self.y_min, self.x_max, self.y_max, confidence)

    def to_dict(self) -> dict:
        d = {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
        }
        if self.confidence is not None:
            d["confidence"] = self.confidence
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BBox":
        return cls(
            x_min=float(d["x_min"]),
            y_min=float(d["y_min"]),
            x_max=float(d["x_max"]),
            y_max=float(d["y_max"]),
            confidence=None if d.get("confidence") is None else float(d["confidence"]),
        )


class Bitmap:
    """Row-major foreground flags for one image-sized binary mask.

    The backing array has shape (height, width), dtype bool, and is marked
    read-only so instances can be shared freely.
    """

    __slots__ = ("array",)

    def __init__(self, array: np.ndarray):
        arr = np.asarray(array, dtype=bool)
        if arr.ndim != 2:
            raise DomainError(f"bitmap array must be 2-D, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @classmethod
    def zeros(cls, width: int, height: int) -> "Bitmap":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def bits(self) -> np.ndarray:
        """Row-major flattened view of the foreground flags."""
        return self.array.reshape(-1)

    def count(self) -> int:
        return int(self.array.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bitmap):
            return NotImplemented
        return self.array.shape == other.array.shape and bool(
            np.array_equal(self.array, other.array)
        )

    def __hash__(self):
        raise TypeError("Bitmap is not hashable")

    def __repr__(self):
        return f"Bitmap({self.width}x{self.height}, fg={self.count()})"

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "rle": rle.encode_string(self.array),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Bitmap":
        return cls(rle.decode_string(d["rle"], int(d["width"]), int(d["height"])))


@dataclass(frozen=True)
class PolygonPayload:
    """Polygon rings in pixel coordinates plus the image dimensions they
    rasterize against. Fill rule is even-odd over the union of rings."""

    rings: tuple[tuple[tuple[float, float], ...], ...]
    width: int
    height: int

    def to_dict(self) -> dict:
        return {
            "rings": [[[float(x), float(y)] for x, y in ring] for ring in self.rings],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolygonPayload":
        rings = tuple(
            tuple((float(x), float(y)) for x, y in ring) for ring in d["rings"]
        )
        return cls(rings=rings, width=int(d["width"]), height=int(d["height"]))


@dataclass(frozen=True)
class RlePayload:
    """Run-length counts string (see :mod:`segloop.rle`) plus dimensions."""

    counts: str
    width: int
    height: int

    def to_dict(self) -> dict:
        return {"counts": self.counts, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "RlePayload":
        return cls(counts=d["counts"], width=int(d["width"]), height=int(d["height"]))


@dataclass(frozen=True)
class MaskInstance:
    """One instance's foreground region with class and optional confidence.

    Ground-truth instances carry ``confidence=None``; predictions carry a
    score in [0, 1]. ``payload`` is a :class:`Bitmap`,
    :class:`PolygonPayload`, or :class:`RlePayload` matching ``encoding``.
    """

    image_id: str
    class_id: int
    encoding: str
    payload: object
    confidence: float | None = None

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "class_id": self.class_id,
            "encoding": self.encoding,
            "payload": self.payload.to_dict(),
        }
        if self.confidence is not None:
            d["confidence"] = self.confidence
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskInstance":
        encoding = d["encoding"]
        payload_cls = {
            "bitmap": Bitmap,
            "polygon": PolygonPayload,
            "rle": RlePayload,
        }.get(encoding)
        if payload_cls is None:
            raise FormatError(f"unknown mask encoding {encoding!r}")
        return cls(
            image_id=d["image_id"],
            class_id=int(d["class_id"]),
            encoding=encoding,
            payload=payload_cls.from_dict(d["payload"]),
            confidence=None if d.get("confidence") is None else float(d["confidence"]),
        )


@dataclass(frozen=True)
class PromptSet:
    """Prompts guiding a segmentation call: positive points inside the
    target, negative points outside it, and/or boxes around it."""

    positive_points: tuple[tuple[float, float], ...] = ()
    negative_points: tuple[tuple[float, float], ...] = ()
    boxes: tuple[BBox, ...] = ()

    def __post_init__(self):
        if not (self.positive_points or self.negative_points or self.boxes):
            raise DomainError("prompt set must contain at least one element")

    def to_dict(self) -> dict:
        return {
            "positive_points": [[float(x), float(y)] for x, y in self.positive_points],
            "negative_points": [[float(x), float(y)] for x, y in self.negative_points],
            "boxes": [b.to_dict() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSet":
        return cls(
            positive_points=tuple(
                (float(x), float(y)) for x, y in d.get("positive_points", [])
            ),
            negative_points=tuple(
                (float(x), float(y)) for x, y in d.get("negative_points", [])
            ),
            boxes=tuple(BBox.from_dict(b) for b in d.get("boxes", [])),
        )


def validate_prompts(prompts: PromptSet, img: ImageRecord) -> list[str]:
    """Report prompt elements falling outside the image bounds."""
    report = []
    for label, points in (
        ("positive", prompts.positive_points),
        ("negative", prompts.negative_points),
    ):
        for x, y in points:
            if not (0 <= x <= img.width and 0 <= y <= img.height):
                report.append(f"{label} point ({x}, {y}) outside image bounds")
    for box in prompts.boxes:
        if box.x_min < 0 or box.y_min < 0 or box.x_max > img.width or box.y_max > img.height:
            report.append(f"box {box.corners()} outside image bounds")
    return report


@dataclass(frozen=True)
class PerImageState:
    """Annotation state of one image within an iteration.

    ``delta`` is the normalized box displacement against the previous
    iteration; None until the image has been refined at least once.
    """

    status: str
    boxes: tuple[BBox, ...] = ()
    masks: tuple[MaskInstance, ...] = ()
    delta: float | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise DomainError(f"unknown image status {self.status!r}")
        if self.delta is not None and self.delta < 0:
            raise DomainError(f"delta must be >= 0, got {self.delta}")

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "boxes": [b.to_dict() for b in self.boxes],
            "masks": [m.to_dict() for m in self.masks],
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerImageState":
        return cls(
            status=d["status"],
            boxes=tuple(BBox.from_dict(b) for b in d.get("boxes", [])),
            masks=tuple(MaskInstance.from_dict(m) for m in d.get("masks", [])),
            delta=None if d.get("delta") is None else float(d["delta"]),
        )


@dataclass(frozen=True)
class IterationState:
    """Snapshot of the whole dataset's annotation status at iteration t."""

    iteration: int
    per_image: dict[str, PerImageState] = field(default_factory=dict)
    epsilon: float = 0.005
    fine_confidence: float = 0.5

    def __post_init__(self):
        if self.iteration < 0:
            raise DomainError("iteration must be >= 0")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "per_image": {k: v.to_dict() for k, v in sorted(self.per_image.items())},
            "epsilon": self.epsilon,
            "fine_confidence": self.fine_confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationState":
        return cls(
            iteration=int(d["iteration"]),
            per_image={
                k: PerImageState.from_dict(v) for k, v in d["per_image"].items()
            },
            epsilon=float(d["epsilon"]),
            fine_confidence=float(d["fine_confidence"]),
        )


def validate_state(state: IterationState) -> list[str]:
    """Report violations of the cross-field iteration-state invariants."""
    report = []
    for image_id, entry in state.per_image.items():
        if entry.status == "converged":
            if entry.delta is None or entry.delta >= state.epsilon:
                report.append(
                    f"{image_id}: converged but delta {entry.delta} >= "
                    f"epsilon {state.epsilon}"
                )
        if entry.status in ("fine", "converged") and len(entry.boxes) != len(entry.masks):
            report.append(
                f"{image_id}: {len(entry.boxes)} boxes vs {len(entry.masks)} masks"
            )
    return report


def validate_instance(inst: MaskInstance, img: ImageRecord) -> list[str]:
    """Report every invariant the mask instance violates for this image.

    Returns an empty list when the instance is valid. Never mutates its
    inputs; raises only for an unknown encoding tag or an image mismatch.
    """
    if inst.image_id != img.id:
        raise DomainError(f"instance belongs to {inst.image_id!r}, not {img.id!r}")
    if inst.encoding not in ENCODINGS:
        raise FormatError(f"unknown mask encoding {inst.encoding!r}")

    report = []
    if inst.class_id < 0:
        report.append(f"class_id {inst.class_id} is negative")
    if inst.confidence is not None and not 0.0 <= inst.confidence <= 1.0:
        report.append(f"confidence {inst.confidence} outside [0, 1]")

    payload = inst.payload
    if inst.encoding == "bitmap":
        if not isinstance(payload, Bitmap):
            report.append("bitmap payload is not a Bitmap")
        else:
            if (payload.width, payload.height) != (img.width, img.height):
                report.append(
                    f"bitmap dimensions {payload.width}x{payload.height} do not "
                    f"match image {img.width}x{img.height}"
                )
            if payload.count() == 0:
                report.append("mask has no foreground pixel")
    elif inst.encoding == "polygon":
        if not isinstance(payload, PolygonPayload):
            report.append("polygon payload is not a PolygonPayload")
        else:
            if (payload.width, payload.height) != (img.width, img.height):
                report.append(
                    f"polygon dimensions {payload.width}x{payload.height} do not "
                    f"match image {img.width}x{img.height}"
                )
            if not payload.rings:
                report.append("polygon payload has no rings")
            for i, ring in enumerate(payload.rings):
                if len(ring) < 3:
                    report.append(f"ring {i} has {len(ring)} < 3 vertices")
    elif inst.encoding == "rle":
        if not isinstance(payload, RlePayload):
            report.append("rle payload is not an RlePayload")
        else:
            if (payload.width, payload.height) != (img.width, img.height):
                report.append(
                    f"rle dimensions {payload.width}x{payload.height} do not "
                    f"match image {img.width}x{img.height}"
                )
            try:
                decoded = rle.decode_string(
                    payload.counts, payload.width, payload.height
                )
            except FormatError as exc:
                report.append(f"rle payload malformed: {exc}")
            else:
                if not decoded.any():
                    report.append("mask has no foreground pixel")
    return report
