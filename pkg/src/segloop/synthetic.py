"""Seeded synthetic datasets: images of non-overlapping elliptical blobs
with hidden instance masks, used as desk-scale ground truth for the
oracle adapters and pipeline benchmarks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset_io import DatasetManifest, rle_encode
from .errors import DomainError
from .types import Bitmap, ImageRecord, MaskInstance, RlePayload


def _ellipse_mask(
    width: int, height: int, cx: float, cy: float, a: float, b: float, theta: float
) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    x = xs + 0.5 - cx
    y = ys + 0.5 - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = x * ct + y * st
    v = -x * st + y * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _random_blob(
    rng: np.random.Generator, width: int, height: int, min_r: float, max_r: float
) -> np.ndarray:
    cx = rng.uniform(max_r, width - max_r)
    cy = rng.uniform(max_r, height - max_r)
    mask = np.zeros((height, width), dtype=bool)
    n_parts = int(rng.integers(1, 4))
    for part in range(n_parts):
        a = rng.uniform(min_r, max_r)
        b = rng.uniform(min_r, max_r)
        theta = rng.uniform(0.0, np.pi)
        if part == 0:
            px, py = cx, cy
        else:
            px = cx + rng.uniform(-min_r, min_r)
            py = cy + rng.uniform(-min_r, min_r)
        mask |= _ellipse_mask(width, height, px, py, a, b, theta)
    return mask


def _dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    from scipy import ndimage

    return ndimage.binary_dilation(mask, iterations=iterations)


def generate_synthetic_dataset(
    n_images: int,
    width: int = 160,
    height: int = 160,
    instances_per_image: tuple[int, int] = (2, 4),
    n_classes: int = 1,
    seed: int = 0,
    name: str = "synthetic",
    min_radius: float = 7.0,
    max_radius: float = 18.0,
    separation: int = 3,
) -> DatasetManifest:
    """Build a manifest whose annotations are the hidden ground truth.

    Blobs are unions of one to three overlapping ellipses, rejected until
    they keep ``separation`` background pixels from every earlier blob,
    so instances never touch. Deterministic for a given seed.
    """
    if n_images < 1:
        raise DomainError("need at least one image")
    rng = np.random.default_rng(seed)
    images = []
    annotations = {}
    digits = max(4, len(str(n_images)))
    for i in range(n_images):
        image_id = f"img_{i:0{digits}d}"
        images.append(
            ImageRecord(
                id=image_id,
                width=width,
                height=height,
                uri=f"images/{image_id}.png",
            )
        )
        occupied = np.zeros((height, width), dtype=bool)
        instances = []
        target = int(rng.integers(instances_per_image[0], instances_per_image[1] + 1))
        for _ in range(target):
            for _attempt in range(50):
                blob = _random_blob(rng, width, height, min_radius, max_radius)
                if blob.sum() < 20:
                    continue
                if not (_dilate(blob, separation) & occupied).any():
                    break
            else:
                continue
            occupied |= blob
            class_id = int(rng.integers(0, n_classes))
            instances.append(
                MaskInstance(
                    image_id=image_id,
                    class_id=class_id,
                    encoding="rle",
                    payload=RlePayload(
                        counts=rle_encode(Bitmap(blob)), width=width, height=height
                    ),
                )
            )
        annotations[image_id] = tuple(instances)
    class_names = tuple(f"class_{c}" for c in range(n_classes))
    return DatasetManifest(
        name=name,
        images=tuple(images),
        class_names=class_names,
        annotations=annotations,
        provenance={"generator": "synthetic-blobs", "seed": seed},
    )


_PALETTE = [
    (86, 160, 86),
    (196, 148, 66),
    (96, 120, 196),
    (180, 90, 150),
    (120, 180, 180),
    (200, 200, 90),
]


def render_image(manifest: DatasetManifest, image_id: str) -> np.ndarray:
    """Render an RGB uint8 array for one image: textured background with
    each instance filled in its class color."""
    img = manifest.image(image_id)
    rng = np.random.default_rng([_stable_id_seed("render"), _stable_id_seed(image_id)])
    base = rng.integers(40, 60, size=(img.height, img.width, 1), dtype=np.uint8)
    rgb = np.repeat(base, 3, axis=2)
    from .geometry import decode_mask

    for k, inst in enumerate(manifest.annotations.get(image_id, ())):
        color = _PALETTE[inst.class_id % len(_PALETTE)]
        shade = 0.85 + 0.3 * ((k % 3) / 2.0)
        mask = decode_mask(inst).array
        for c in range(3):
            channel = rgb[:, :, c]
            channel[mask] = np.clip(int(color[c] * shade), 0, 255)
    return rgb


def _stable_id_seed(text: str) -> int:
    import zlib

    return zlib.crc32(text.encode("utf-8"))


def write_images(manifest: DatasetManifest, root: str | Path) -> None:
    """Write one PNG per image under ``root`` following each record's uri."""
    from PIL import Image

    root = Path(root)
    for img in manifest.images:
        path = root / img.uri
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(render_image(manifest, img.id)).save(path)
