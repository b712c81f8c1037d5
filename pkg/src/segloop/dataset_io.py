"""Bit-exact dataset persistence: polygon label files, RLE mask strings,
JSON manifests, and deterministic train/val splitting.

Label grammar (one file per image, one line per polygon ring):

    <class_id> <x1> <y1> <x2> <y2> ... <xk> <yk>

with k >= 3 and coordinates normalized to [0, 1] by image width/height,
written with 6 decimal places. All writers are byte-deterministic for
identical input.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rle
from .errors import DomainError, ParseError
from .geometry import decode_mask
from .types import Bitmap, ImageRecord, MaskInstance, PolygonPayload

from .geometry import mask_to_polygons  # noqa: E402  (re-used by writers)


@dataclass(frozen=True)
class DatasetManifest:
    """A named image collection with class names and optional annotations.

    ``annotations`` maps image id to that image's mask instances;
    ``provenance`` records free-form origin notes such as the pipeline
    iteration that produced the annotations.
    """

    name: str
    images: tuple[ImageRecord, ...]
    class_names: tuple[str, ...] = ("object",)
    annotations: dict[str, tuple[MaskInstance, ...]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for img in self.images:
            if img.id in seen:
                raise DomainError(f"duplicate image id {img.id!r}")
            seen.add(img.id)
        for image_id, instances in self.annotations.items():
            if image_id not in seen:
                raise DomainError(f"annotations reference unknown image {image_id!r}")
            for inst in instances:
                if inst.class_id >= len(self.class_names):
                    raise DomainError(
                        f"class_id {inst.class_id} out of range for "
                        f"{len(self.class_names)} classes"
                    )

    def image(self, image_id: str) -> ImageRecord:
        for img in self.images:
            if img.id == image_id:
                return img
        raise DomainError(f"unknown image id {image_id!r}")

    def images_by_id(self) -> dict[str, ImageRecord]:
        return {img.id: img for img in self.images}

    def split_images(self, split: str) -> tuple[ImageRecord, ...]:
        return tuple(img for img in self.images if img.split == split)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class_names": list(self.class_names),
            "images": [img.to_dict() for img in self.images],
            "annotations": {
                image_id: [inst.to_dict() for inst in instances]
                for image_id, instances in sorted(self.annotations.items())
            },
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            name=d["name"],
            images=tuple(ImageRecord.from_dict(i) for i in d["images"]),
            class_names=tuple(d.get("class_names", ("object",))),
            annotations={
                image_id: tuple(MaskInstance.from_dict(m) for m in instances)
                for image_id, instances in d.get("annotations", {}).items()
            },
            provenance=d.get("provenance", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def rle_encode(bitmap: Bitmap) -> str:
    """Encode a bitmap as a column-major run-length count string."""
    return rle.encode_string(bitmap.array)


def rle_decode(counts: str, width: int, height: int) -> Bitmap:
    """Exact inverse of :func:`rle_encode`."""
    return Bitmap(rle.decode_string(counts, width, height))


def _instance_rings(inst: MaskInstance) -> list:
    if inst.encoding == "polygon":
        return list(inst.payload.rings)
    return list(mask_to_polygons(decode_mask(inst)))


def write_labels(
    instances: list[MaskInstance], img: ImageRecord, path: str | Path
) -> None:
    """Write one normalized-polygon text line per ring of each instance."""
    lines = []
    for inst in instances:
        for ring in _instance_rings(inst):
            if len(ring) < 3:
                raise DomainError("polygon ring has fewer than 3 vertices")
            coords = []
            for x, y in ring:
                coords.append(f"{x / img.width:.6f}")
                coords.append(f"{y / img.height:.6f}")
            lines.append(f"{inst.class_id} " + " ".join(coords))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_labels(path: str | Path, img: ImageRecord) -> list[MaskInstance]:
    """Parse a label file back into polygon-encoded instances (one per
    line); the exact inverse of :func:`write_labels` up to the 6-decimal
    coordinate round-trip."""
    instances = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) < 7 or len(tokens) % 2 == 0:
            raise ParseError(
                f"expected class id plus >= 3 coordinate pairs, got "
                f"{len(tokens)} tokens",
                lineno,
            )
        try:
            class_id = int(tokens[0])
            values = [float(t) for t in tokens[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
        if any(not math.isfinite(v) for v in values):
            raise ParseError("non-finite coordinate", lineno)
        ring = tuple(
            (values[i] * img.width, values[i + 1] * img.height)
            for i in range(0, len(values), 2)
        )
        instances.append(
            MaskInstance(
                image_id=img.id,
                class_id=class_id,
                encoding="polygon",
                payload=PolygonPayload(
                    rings=(ring,), width=img.width, height=img.height
                ),
            )
        )
    return instances


def split_dataset(
    manifest: DatasetManifest, fractions: tuple[float, ...], seed: int
) -> DatasetManifest:
    """Assign images to train/val splits by seeded permutation.

    Per-split counts are floor(fraction * n) with the remainder handed out
    by descending fractional part (ties by split index), so (0.9, 0.1) on
    3880 images yields exactly (3492, 388).
    """
    if not fractions or any(f <= 0 for f in fractions):
        raise DomainError("split fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DomainError(f"split fractions must sum to 1, got {sum(fractions)}")
    if len(fractions) > 2:
        raise DomainError("at most two splits (train, val) are supported")
    n = len(manifest.images)
    if n < len(fractions):
        raise DomainError(f"cannot split {n} images into {len(fractions)} parts")

    exact = [f * n for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    remainder = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(remainder):
        counts[order[i % len(order)]] += 1

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    split_names = ("train", "val")
    assignment = {}
    cursor = 0
    for split_idx, count in enumerate(counts):
        for k in perm[cursor : cursor + count]:
            assignment[manifest.images[int(k)].id] = split_names[split_idx]
        cursor += count

    images = tuple(
        ImageRecord(
            id=img.id,
            width=img.width,
            height=img.height,
            uri=img.uri,
            split=assignment[img.id],
        )
        for img in manifest.images
    )
    return DatasetManifest(
        name=manifest.name,
        images=images,
        class_names=manifest.class_names,
        annotations=manifest.annotations,
        provenance=manifest.provenance,
    )
