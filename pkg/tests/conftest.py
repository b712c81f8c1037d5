import numpy as np
import pytest

from segloop.types import Bitmap, ImageRecord, MaskInstance


def make_bitmap_instance(
    array: np.ndarray, image_id: str = "img", class_id: int = 0, confidence=None
) -> MaskInstance:
    return MaskInstance(
        image_id=image_id,
        class_id=class_id,
        encoding="bitmap",
        payload=Bitmap(np.asarray(array, dtype=bool)),
        confidence=confidence,
    )


def random_blob_array(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """A random connected-ish blob: union of a few filled disks."""
    ys, xs = np.mgrid[0:height, 0:width]
    mask = np.zeros((height, width), dtype=bool)
    cx = rng.uniform(width * 0.25, width * 0.75)
    cy = rng.uniform(height * 0.25, height * 0.75)
    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(min(width, height) * 0.08, min(width, height) * 0.22)
        px = cx + rng.uniform(-r, r)
        py = cy + rng.uniform(-r, r)
        mask |= (xs + 0.5 - px) ** 2 + (ys + 0.5 - py) ** 2 <= r * r
    if not mask.any():
        mask[height // 2, width // 2] = True
    return mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def image_64():
    return ImageRecord(id="img", width=64, height=64)
