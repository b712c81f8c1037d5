"""Mask/box geometry: rasterization, polygon extraction, minimum bounding
boxes, box expansion, IoU, and greedy matching.

Pixel-cell semantics throughout: a mask pixel (x, y) occupies the unit
cell [x, x+1) x [y, y+1), so the minimum bounding box of a single pixel is
(x, y, x+1, y+1) with area 1. Polygon rasterization uses the even-odd rule
sampled at pixel centers (x + 0.5, y + 0.5).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import rle
from .errors import DomainError, EmptyRegionError, FormatError
from .types import BBox, Bitmap, ImageRecord, MaskInstance, PolygonPayload, RlePayload

Ring = tuple[tuple[float, float], ...]


class ClampedVertexWarning(UserWarning):
    """A polygon vertex fell outside the image and was clamped."""


def decode_mask(inst: MaskInstance) -> Bitmap:
    """Decode any mask encoding into a Bitmap of the payload's dimensions."""
    payload = inst.payload
    if inst.encoding == "bitmap":
        if not isinstance(payload, Bitmap):
            raise FormatError("bitmap payload is not a Bitmap")
        return payload
    if inst.encoding == "rle":
        if not isinstance(payload, RlePayload):
            raise FormatError("rle payload is not an RlePayload")
        return Bitmap(rle.decode_string(payload.counts, payload.width, payload.height))
    if inst.encoding == "polygon":
        if not isinstance(payload, PolygonPayload):
            raise FormatError("polygon payload is not a PolygonPayload")
        img = ImageRecord(id=inst.image_id, width=payload.width, height=payload.height)
        return rasterize_polygons(payload.rings, img)
    raise FormatError(f"unknown mask encoding {inst.encoding!r}")


def minimum_bounding_box(mask: MaskInstance | Bitmap) -> BBox:
    """Smallest axis-aligned box containing every foreground pixel cell."""
    bitmap = mask if isinstance(mask, Bitmap) else decode_mask(mask)
    ys, xs = np.nonzero(bitmap.array)
    if xs.size == 0:
        raise EmptyRegionError("mask has no foreground pixel")
    return BBox(
        x_min=float(xs.min()),
        y_min=float(ys.min()),
        x_max=float(xs.max()) + 1.0,
        y_max=float(ys.max()) + 1.0,
    )


def expand_box(box: BBox, fraction: float, img: ImageRecord) -> BBox:
    """Scale width and height by (1 + fraction) about the box center, then
    clamp to the image bounds."""
    if fraction < 0:
        raise DomainError(f"expansion fraction must be >= 0, got {fraction}")
    cx = (box.x_min + box.x_max) / 2.0
    cy = (box.y_min + box.y_max) / 2.0
    half_w = box.width * (1.0 + fraction) / 2.0
    half_h = box.height * (1.0 + fraction) / 2.0
    return BBox(
        x_min=max(0.0, cx - half_w),
        y_min=max(0.0, cy - half_h),
        x_max=min(float(img.width), cx + half_w),
        y_max=min(float(img.height), cy + half_h),
        confidence=box.confidence,
    )


def box_iou(a: BBox, b: BBox) -> float:
    """Area intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_iou_matrix(preds: list[BBox], refs: list[BBox]) -> np.ndarray:
    """Pairwise IoU matrix of shape (len(preds), len(refs))."""
    out = np.zeros((len(preds), len(refs)), dtype=float)
    for i, a in enumerate(preds):
        for j, b in enumerate(refs):
            out[i, j] = box_iou(a, b)
    return out


def mask_iou(a: MaskInstance | Bitmap, b: MaskInstance | Bitmap) -> float:
    """Foreground-pixel intersection over union of two same-sized masks."""
    bm_a = a if isinstance(a, Bitmap) else decode_mask(a)
    bm_b = b if isinstance(b, Bitmap) else decode_mask(b)
    if bm_a.array.shape != bm_b.array.shape:
        raise DomainError(
            f"mask dimensions differ: {bm_a.width}x{bm_a.height} vs "
            f"{bm_b.width}x{bm_b.height}"
        )
    inter = int(np.logical_and(bm_a.array, bm_b.array).sum())
    union = int(np.logical_or(bm_a.array, bm_b.array).sum())
    if union == 0:
        return 0.0
    return inter / union


def rasterize_polygons(polygons, img: ImageRecord) -> Bitmap:
    """Even-odd fill of the given rings, sampled at pixel centers.

    Vertices outside [0, width] x [0, height] are clamped and a
    ClampedVertexWarning is emitted. Deterministic for identical input.
    """
    w, h = img.width, img.height
    edges = []
    clamped = 0
    for ring in polygons:
        if len(ring) < 3:
            raise DomainError(f"polygon ring has {len(ring)} < 3 vertices")
        pts = []
        for x, y in ring:
            cx = min(max(float(x), 0.0), float(w))
            cy = min(max(float(y), 0.0), float(h))
            if cx != x or cy != y:
                clamped += 1
            pts.append((cx, cy))
        for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
            if y1 != y2:
                edges.append((x1, y1, x2, y2))
    if clamped:
        warnings.warn(
            f"clamped {clamped} polygon vertices to image bounds",
            ClampedVertexWarning,
            stacklevel=2,
        )
    grid = np.zeros((h, w), dtype=bool)
    if not edges:
        return Bitmap(grid)
    e = np.asarray(edges, dtype=float)
    x1, y1, x2, y2 = e[:, 0], e[:, 1], e[:, 2], e[:, 3]
    y_lo = np.minimum(y1, y2)
    y_hi = np.maximum(y1, y2)
    px = np.arange(w, dtype=float) + 0.5
    for row in range(h):
        py = row + 0.5
        live = (y_lo <= py) & (py < y_hi)
        if not live.any():
            continue
        t = (py - y1[live]) / (y2[live] - y1[live])
        xs = np.sort(x1[live] + t * (x2[live] - x1[live]))
        # crossings strictly to the right of each pixel center
        n_le = np.searchsorted(xs, px, side="right")
        grid[row] = (xs.size - n_le) % 2 == 1
    return Bitmap(grid)


def mask_to_polygons(bitmap: Bitmap) -> list[Ring]:
    """Trace foreground cell boundaries into closed rectilinear rings.

    Rings follow the lattice between foreground and background cells with
    the region kept on the walker's left, so rasterizing the result with
    the even-odd rule reproduces the input bitmap exactly (holes become
    their own rings).
    """
    arr = bitmap.array
    if not arr.any():
        return []
    h, w = arr.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = arr

    # Directed boundary edges keyed by start vertex; owner is the fg cell
    # on the edge's left, used to resolve the diagonal-contact ambiguity.
    outgoing: dict[tuple[int, int], list[tuple[tuple[int, int], tuple[int, int]]]] = {}

    def add(start, end, owner):
        outgoing.setdefault(start, []).append((end, owner))

    ys, xs = np.nonzero(arr)
    for y, x in zip(ys.tolist(), xs.tolist()):
        if not padded[y, x + 1]:  # bg above: top edge, right-to-left
            add((x + 1, y), (x, y), (x, y))
        if not padded[y + 2, x + 1]:  # bg below: bottom edge, left-to-right
            add((x, y + 1), (x + 1, y + 1), (x, y))
        if not padded[y + 1, x]:  # bg left: left edge, downward
            add((x, y), (x, y + 1), (x, y))
        if not padded[y + 1, x + 2]:  # bg right: right edge, upward
            add((x + 1, y + 1), (x + 1, y), (x, y))

    rings: list[Ring] = []
    for start in sorted(outgoing):
        while outgoing.get(start):
            end, owner = outgoing[start].pop()
            ring = [start]
            vertex, prev_owner = end, owner
            while vertex != start:
                ring.append(vertex)
                options = outgoing[vertex]
                pick = 0
                if len(options) > 1:
                    for k, (_, own) in enumerate(options):
                        if own == prev_owner:
                            pick = k
                            break
                vertex, prev_owner = options.pop(pick)
            rings.append(_simplify_collinear(ring))
    return rings


def _simplify_collinear(ring: list[tuple[int, int]]) -> Ring:
    """Merge consecutive collinear lattice steps into single segments."""
    out = []
    n = len(ring)
    for i in range(n):
        prev = ring[i - 1]
        cur = ring[i]
        nxt = ring[(i + 1) % n]
        d1 = (cur[0] - prev[0], cur[1] - prev[1])
        d2 = (nxt[0] - cur[0], nxt[1] - cur[1])
        if d1[0] * d2[1] != d1[1] * d2[0] or (d1 == (0, 0)) or (d2 == (0, 0)):
            out.append((float(cur[0]), float(cur[1])))
    return tuple(out)


@dataclass(frozen=True)
class MatchResult:
    """One-to-one pairing between predictions and references."""

    pairs: tuple[tuple[int, int, float], ...]  # (pred index, ref index, IoU)
    unmatched_preds: tuple[int, ...]
    unmatched_refs: tuple[int, ...]


def greedy_match_matrix(
    ious: np.ndarray,
    priorities: list[float],
    iou_threshold: float,
) -> MatchResult:
    """Greedy one-to-one matching over a precomputed IoU matrix.

    Rows (predictions) are processed by descending priority (ties by
    index); each takes the unmatched column of highest IoU >= threshold,
    ties broken toward the lower column index.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise DomainError(f"iou threshold {iou_threshold} outside [0, 1]")
    n_pred, n_ref = ious.shape
    order = sorted(range(n_pred), key=lambda i: (-priorities[i], i))
    taken = np.zeros(n_ref, dtype=bool)
    pairs = []
    unmatched_preds = []
    for i in order:
        best_j = -1
        best_iou = 0.0
        for j in range(n_ref):
            if taken[j]:
                continue
            iou = float(ious[i, j])
            # a zero-IoU pair never matches, even at threshold 0
            if iou >= iou_threshold and iou > best_iou:
                best_j = j
                best_iou = iou
        if best_j >= 0:
            taken[best_j] = True
            pairs.append((i, best_j, best_iou))
        else:
            unmatched_preds.append(i)
    pairs.sort()
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_preds=tuple(sorted(unmatched_preds)),
        unmatched_refs=tuple(int(j) for j in range(n_ref) if not taken[j]),
    )


def greedy_match(
    preds: list[BBox], refs: list[BBox], iou_threshold: float
) -> MatchResult:
    """Confidence-ordered greedy box matching (missing confidence sorts
    as 1.0)."""
    ious = box_iou_matrix(preds, refs)
    priorities = [b.confidence if b.confidence is not None else 1.0 for b in preds]
    return greedy_match_matrix(ious, priorities, iou_threshold)


def symmetric_pair_match(ious: np.ndarray, iou_threshold: float) -> MatchResult:
    """Order-free greedy matching: admit pairs by descending IoU.

    Unlike confidence-ordered matching this is symmetric under swapping
    the two sides (up to transposing the pair indices), which the
    iteration-convergence delta requires.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise DomainError(f"iou threshold {iou_threshold} outside [0, 1]")
    n_a, n_b = ious.shape
    candidates = [
        (-ious[i, j], i, j)
        for i in range(n_a)
        for j in range(n_b)
        if ious[i, j] >= iou_threshold and ious[i, j] > 0.0
    ]
    candidates.sort()
    used_a = np.zeros(n_a, dtype=bool)
    used_b = np.zeros(n_b, dtype=bool)
    pairs = []
    for neg_iou, i, j in candidates:
        if used_a[i] or used_b[j]:
            continue
        used_a[i] = True
        used_b[j] = True
        pairs.append((i, j, -neg_iou))
    pairs.sort()
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_preds=tuple(int(i) for i in range(n_a) if not used_a[i]),
        unmatched_refs=tuple(int(j) for j in range(n_b) if not used_b[j]),
    )
