"""Promptable-segmenter and detector contracts plus deterministic
synthetic oracles.

The oracles answer from hidden ground-truth masks so the full annotation
pipeline can be exercised at desk scale without external model weights:

* The oracle segmenter resolves a box prompt to the hidden instance of
  maximal box IoU, optionally degrading the mask by a dilation radius
  proportional to prompt slack (``overlap_gain``) and by a seeded
  morphological perturbation of up to ``noise_radius`` pixels. Point
  prompts return whole / largest-part / eroded-core candidates at
  confidences 0.9 / 0.6 / 0.3, with negative points removing the pixels
  of any hidden instance they fall in.
* The oracle detector emits each hidden true box with probability
  min(1, 0.5 + 0.5 n/N) for a training-set size n, corner-jittered by
  sigma0 * (1 - n/N) pixels, plus low-confidence spurious boxes at a rate
  that also vanishes as n reaches N.

Everything is bitwise deterministic given (adapter seed, inputs).
Real backends may be registered under new names with the same contracts;
no test requires them.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .dataset_io import DatasetManifest
from .errors import AdapterError, DomainError, EmptyResultError, UnknownImageError
from .geometry import box_iou, decode_mask, minimum_bounding_box
from .types import BBox, Bitmap, ImageRecord, MaskInstance, PromptSet, validate_prompts

LEVELS = ("whole", "part", "subpart")


@dataclass(frozen=True)
class SegmenterCandidate:
    """One ranked segmentation hypothesis."""

    mask: MaskInstance
    confidence: float
    level: str
    prompt_box_index: int | None = None


@dataclass(frozen=True)
class SegmenterResult:
    """Ranked candidates (confidences non-increasing, at least one)."""

    candidates: tuple[SegmenterCandidate, ...]

    def __post_init__(self):
        if not self.candidates:
            raise EmptyResultError("segmenter produced no candidate")
        confs = [c.confidence for c in self.candidates]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise DomainError("candidate confidences must be non-increasing")

    @property
    def top(self) -> SegmenterCandidate:
        return self.candidates[0]

    def by_box(self) -> dict[int, SegmenterCandidate]:
        """Best candidate per prompt box index (box-prompted calls)."""
        out: dict[int, SegmenterCandidate] = {}
        for cand in self.candidates:
            if cand.prompt_box_index is not None and cand.prompt_box_index not in out:
                out[cand.prompt_box_index] = cand
        return out


@dataclass(frozen=True)
class DetectorModel:
    """Opaque trained-detector state: size of its training set and seed."""

    training_set_size: int
    seed: int


def _stable_seed(*parts) -> list[int]:
    out = []
    for part in parts:
        if isinstance(part, str):
            out.append(zlib.crc32(part.encode("utf-8")))
        else:
            out.append(int(part) & 0xFFFFFFFF)
    return out


def _prompt_signature(prompts: PromptSet) -> str:
    bits = []
    for x, y in prompts.positive_points:
        bits.append(f"p{x:.3f},{y:.3f}")
    for x, y in prompts.negative_points:
        bits.append(f"n{x:.3f},{y:.3f}")
    for b in prompts.boxes:
        bits.append(f"b{b.x_min:.3f},{b.y_min:.3f},{b.x_max:.3f},{b.y_max:.3f}")
    return "|".join(bits)


def _perturb(mask: np.ndarray, radius: int, rng: np.random.Generator) -> np.ndarray:
    """Dilate or erode by a seeded radius in [-radius, radius] (L1 ball)."""
    if radius <= 0:
        return mask
    r = int(rng.integers(-radius, radius + 1))
    if r > 0:
        return ndimage.binary_dilation(mask, iterations=r)
    if r < 0:
        eroded = ndimage.binary_erosion(mask, iterations=-r)
        return eroded if eroded.any() else mask
    return mask


class OracleSegmenter:
    """Deterministic stand-in for a promptable segmentation backend."""

    def __init__(
        self,
        gt_index: Mapping[str, Sequence[MaskInstance]],
        noise_radius: int = 0,
        overlap_gain: float = 0.0,
        seed: int = 0,
    ):
        self.noise_radius = noise_radius
        self.overlap_gain = overlap_gain
        self.seed = seed
        self._instances = {k: tuple(v) for k, v in gt_index.items()}
        self._bitmaps: dict[str, tuple[np.ndarray, ...]] = {}
        self._boxes: dict[str, tuple[BBox, ...]] = {}

    def _hidden(self, image_id: str):
        if image_id not in self._instances:
            raise UnknownImageError(f"image {image_id!r} not registered with oracle")
        if image_id not in self._bitmaps:
            instances = self._instances[image_id]
            self._bitmaps[image_id] = tuple(decode_mask(i).array for i in instances)
            self._boxes[image_id] = tuple(
                minimum_bounding_box(Bitmap(b)) for b in self._bitmaps[image_id]
            )
        return (
            self._instances[image_id],
            self._bitmaps[image_id],
            self._boxes[image_id],
        )

    def segment(self, image: ImageRecord, prompts: PromptSet) -> SegmenterResult:
        problems = validate_prompts(prompts, image)
        if problems:
            raise DomainError("; ".join(problems))
        instances, bitmaps, boxes = self._hidden(image.id)
        rng = np.random.default_rng(
            _stable_seed(self.seed, image.id, _prompt_signature(prompts))
        )
        if prompts.boxes:
            candidates = self._segment_boxes(image, prompts, instances, bitmaps, boxes, rng)
        else:
            candidates = self._segment_points(image, prompts, instances, bitmaps, rng)
        if not candidates:
            raise EmptyResultError("no hidden instance matches the given prompts")
        candidates.sort(key=lambda c: (-c.confidence, LEVELS.index(c.level)))
        return SegmenterResult(candidates=tuple(candidates))

    def _negative_exclusion(self, prompts, bitmaps) -> np.ndarray | None:
        exclusion = None
        for x, y in prompts.negative_points:
            col, row = int(x), int(y)
            for arr in bitmaps:
                if 0 <= row < arr.shape[0] and 0 <= col < arr.shape[1] and arr[row, col]:
                    exclusion = arr if exclusion is None else (exclusion | arr)
        return exclusion

    def _segment_boxes(self, image, prompts, instances, bitmaps, boxes, rng):
        exclusion = self._negative_exclusion(prompts, bitmaps)
        candidates = []
        for box_index, prompt_box in enumerate(prompts.boxes):
            ious = [box_iou(prompt_box, mbb) for mbb in boxes]
            best = int(np.argmax(ious)) if ious else -1
            if best < 0 or ious[best] <= 0.0:
                continue
            mask = bitmaps[best]
            slack_dilation = int(round(self.overlap_gain * (1.0 - ious[best])))
            if slack_dilation > 0:
                mask = ndimage.binary_dilation(mask, iterations=slack_dilation)
            mask = _perturb(mask, self.noise_radius, rng)
            if exclusion is not None:
                mask = mask & ~exclusion
            if not mask.any():
                continue
            candidates.append(
                SegmenterCandidate(
                    mask=MaskInstance(
                        image_id=image.id,
                        class_id=instances[best].class_id,
                        encoding="bitmap",
                        payload=Bitmap(mask),
                        confidence=float(ious[best]),
                    ),
                    confidence=float(ious[best]),
                    level="whole",
                    prompt_box_index=box_index,
                )
            )
        return candidates

    def _segment_points(self, image, prompts, instances, bitmaps, rng):
        target = -1
        for x, y in prompts.positive_points:
            col, row = int(x), int(y)
            for k, arr in enumerate(bitmaps):
                if 0 <= row < arr.shape[0] and 0 <= col < arr.shape[1] and arr[row, col]:
                    target = k
                    break
            if target >= 0:
                break
        if target < 0:
            return []
        whole = bitmaps[target]
        labeled, n_parts = ndimage.label(whole)
        if n_parts > 1:
            sizes = ndimage.sum_labels(whole, labeled, index=range(1, n_parts + 1))
            part = labeled == (1 + int(np.argmax(sizes)))
        else:
            part = whole
        core_r = max(1, int(round(0.25 * math.sqrt(part.sum() / math.pi))))
        core = ndimage.binary_erosion(part, iterations=core_r)
        if not core.any():
            core = part
        exclusion = self._negative_exclusion(prompts, bitmaps)
        candidates = []
        for mask, conf, level in ((whole, 0.9, "whole"), (part, 0.6, "part"), (core, 0.3, "subpart")):
            mask = _perturb(mask, self.noise_radius, rng)
            if exclusion is not None:
                mask = mask & ~exclusion
            if not mask.any():
                continue
            candidates.append(
                SegmenterCandidate(
                    mask=MaskInstance(
                        image_id=image.id,
                        class_id=instances[target].class_id,
                        encoding="bitmap",
                        payload=Bitmap(mask),
                        confidence=conf,
                    ),
                    confidence=conf,
                    level=level,
                )
            )
        return candidates


class OracleDetector:
    """Deterministic stand-in for a trainable detector.

    Prediction quality is a pure function of the training-set size n:
    recall min(1, 0.5 + 0.5 n/N), Gaussian corner jitter
    sigma0 * (1 - n/N), and ceil(fp_rate * (1 - n/N) * n_true) spurious
    boxes below confidence 0.4. True boxes score in [0.5, 1.0].
    """

    def __init__(
        self,
        gt_index: Mapping[str, Sequence[MaskInstance]],
        n_full: int,
        sigma0: float = 4.0,
        fp_rate: float = 0.1,
    ):
        if n_full < 1:
            raise DomainError("n_full must be >= 1")
        self.n_full = n_full
        self.sigma0 = sigma0
        self.fp_rate = fp_rate
        self._instances = {k: tuple(v) for k, v in gt_index.items()}
        self._boxes: dict[str, tuple[BBox, ...]] = {}

    def fit(self, examples: Sequence[tuple[ImageRecord, Sequence[BBox]]], seed: int) -> DetectorModel:
        if not examples:
            raise DomainError("detector training set is empty")
        return DetectorModel(training_set_size=len(examples), seed=seed)

    def predict(self, model: DetectorModel, image: ImageRecord) -> list[BBox]:
        if image.id not in self._instances:
            raise UnknownImageError(f"image {image.id!r} not registered with oracle")
        if image.id not in self._boxes:
            self._boxes[image.id] = tuple(
                minimum_bounding_box(decode_mask(i)) for i in self._instances[image.id]
            )
        # the stream is keyed on (seed, image) only, and the keep decisions
        # are drawn as one block, so a larger training set emits a superset
        # of a smaller one's boxes under the same seed (common random
        # numbers; keeps quality sweeps monotone seed-by-seed)
        rng = np.random.default_rng(_stable_seed(model.seed, image.id))
        n = min(model.training_set_size, self.n_full)
        recall = min(1.0, 0.5 + 0.5 * n / self.n_full)
        sigma = self.sigma0 * (1.0 - n / self.n_full)
        keep = rng.uniform(size=len(self._boxes[image.id]))
        out = []
        for mbb, u in zip(self._boxes[image.id], keep):
            if u > recall:
                continue
            coords = np.array(mbb.corners(), dtype=float)
            if sigma > 0:
                coords = coords + rng.normal(0.0, sigma, size=4)
            x0, x1 = sorted((coords[0], coords[2]))
            y0, y1 = sorted((coords[1], coords[3]))
            x0 = float(np.clip(x0, 0, image.width - 1))
            y0 = float(np.clip(y0, 0, image.height - 1))
            x1 = float(np.clip(x1, x0 + 0.5, image.width))
            y1 = float(np.clip(y1, y0 + 0.5, image.height))
            out.append(BBox(x0, y0, x1, y1, confidence=float(rng.uniform(0.5, 1.0))))
        fp_rate = self.fp_rate * (1.0 - n / self.n_full)
        n_fp = math.ceil(fp_rate * len(out))
        for _ in range(n_fp):
            w = rng.uniform(4.0, max(5.0, image.width / 4))
            h = rng.uniform(4.0, max(5.0, image.height / 4))
            x0 = rng.uniform(0, image.width - w)
            y0 = rng.uniform(0, image.height - h)
            out.append(
                BBox(x0, y0, x0 + w, y0 + h, confidence=float(rng.uniform(0.15, 0.4)))
            )
        return out


# Named-adapter registry; pipeline configs select backends by name.
SegmenterFactory = Callable[[DatasetManifest, dict], object]
DetectorFactory = Callable[[DatasetManifest, dict], object]

_SEGMENTERS: dict[str, SegmenterFactory] = {}
_DETECTORS: dict[str, DetectorFactory] = {}


def register_segmenter(name: str, factory: SegmenterFactory) -> None:
    _SEGMENTERS[name] = factory


def register_detector(name: str, factory: DetectorFactory) -> None:
    _DETECTORS[name] = factory


def create_segmenter(name: str, manifest: DatasetManifest, options: dict | None = None):
    try:
        factory = _SEGMENTERS[name]
    except KeyError:
        raise AdapterError(
            f"unknown segmenter {name!r}; registered: {sorted(_SEGMENTERS)} "
            "(register a plugin or use 'oracle')"
        ) from None
    return factory(manifest, options or {})


def create_detector(name: str, manifest: DatasetManifest, options: dict | None = None):
    try:
        factory = _DETECTORS[name]
    except KeyError:
        raise AdapterError(
            f"unknown detector {name!r}; registered: {sorted(_DETECTORS)} "
            "(register a plugin or use 'oracle')"
        ) from None
    return factory(manifest, options or {})


def _oracle_segmenter_factory(manifest: DatasetManifest, options: dict) -> OracleSegmenter:
    return OracleSegmenter(
        gt_index=manifest.annotations,
        noise_radius=int(options.get("noise_radius", 0)),
        overlap_gain=float(options.get("overlap_gain", 0.0)),
        seed=int(options.get("seed", 0)),
    )


def _oracle_detector_factory(manifest: DatasetManifest, options: dict) -> OracleDetector:
    return OracleDetector(
        gt_index=manifest.annotations,
        n_full=int(options.get("n_full", len(manifest.images))),
        sigma0=float(options.get("sigma0", 4.0)),
        fp_rate=float(options.get("fp_rate", 0.1)),
    )


register_segmenter("oracle", _oracle_segmenter_factory)
register_detector("oracle", _oracle_detector_factory)
