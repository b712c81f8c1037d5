"""Box and mask evaluation: precision, recall, F1, AP, mAP, mIoU, and
max-F1 confidence selection.

Matching is one-vs-rest per class and per image: a prediction can only
match a ground-truth instance of the same class in the same image, using
confidence-ordered greedy assignment. AP uses the 101-point interpolated
convention with a monotone precision envelope. mIoU is dataset-global
semantic IoU per class, averaged over classes present in ground truth.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError
from .geometry import box_iou, decode_mask, greedy_match_matrix
from .types import BBox, MaskInstance


@dataclass(frozen=True)
class BoxLabel:
    """A class-tagged box for detection evaluation; prediction scores ride
    on ``box.confidence`` and ground truth carries none."""

    image_id: str
    class_id: int
    box: BBox

    @property
    def confidence(self) -> float | None:
        return self.box.confidence


@dataclass(frozen=True)
class ConfusionCounts:
    """True/false positive and false negative tallies for one class."""

    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


def f1(p: float, r: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if p == 0.0 and r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def _check_kind(instances: Sequence, kind: str, role: str):
    expected = {"box": BoxLabel, "mask": MaskInstance}.get(kind)
    if expected is None:
        raise DomainError(f"unknown evaluation kind {kind!r}")
    for inst in instances:
        if not isinstance(inst, expected):
            raise DomainError(
                f"{role} element {type(inst).__name__} does not match kind {kind!r}"
            )


def _confidence(inst) -> float | None:
    return inst.confidence


def _iou_fn(kind: str, cache: dict):
    if kind == "box":
        return lambda a, b: box_iou(a.box, b.box)

    def masked(a, b):
        arr_a = cache.get(id(a))
        if arr_a is None:
            arr_a = decode_mask(a).array
            cache[id(a)] = arr_a
        arr_b = cache.get(id(b))
        if arr_b is None:
            arr_b = decode_mask(b).array
            cache[id(b)] = arr_b
        inter = int(np.logical_and(arr_a, arr_b).sum())
        if inter == 0:
            return 0.0
        union = int(np.logical_or(arr_a, arr_b).sum())
        return inter / union

    return masked


def _group(instances) -> dict[tuple[str, int], list]:
    grouped = defaultdict(list)
    for inst in instances:
        grouped[(inst.image_id, inst.class_id)].append(inst)
    return grouped


def confusion_counts(
    preds: Sequence,
    gts: Sequence,
    iou_threshold: float,
    conf_threshold: float,
    kind: str,
) -> dict[int, ConfusionCounts]:
    """Per-class TP/FP/FN after discarding predictions below
    ``conf_threshold`` and greedy-matching the rest at ``iou_threshold``."""
    _check_kind(preds, kind, "prediction")
    _check_kind(gts, kind, "ground truth")
    for p in preds:
        if _confidence(p) is None:
            raise DomainError("predictions must carry confidences")
    for g in gts:
        if _confidence(g) is not None:
            raise DomainError("ground truth must not carry confidences")

    kept = [p for p in preds if _confidence(p) >= conf_threshold]
    cache: dict = {}
    iou = _iou_fn(kind, cache)
    pred_groups = _group(kept)
    gt_groups = _group(gts)

    tp: dict[int, int] = defaultdict(int)
    fp: dict[int, int] = defaultdict(int)
    fn: dict[int, int] = defaultdict(int)
    for key in set(pred_groups) | set(gt_groups):
        _, class_id = key
        ps = pred_groups.get(key, [])
        gs = gt_groups.get(key, [])
        ious = np.array(
            [[iou(p, g) for g in gs] for p in ps], dtype=float
        ).reshape(len(ps), len(gs))
        result = greedy_match_matrix(
            ious, [_confidence(p) for p in ps], iou_threshold
        )
        tp[class_id] += len(result.pairs)
        fp[class_id] += len(result.unmatched_preds)
        fn[class_id] += len(result.unmatched_refs)

    classes = set(tp) | set(fp) | set(fn)
    return {
        c: ConfusionCounts(tp=tp[c], fp=fp[c], fn=fn[c]) for c in sorted(classes)
    }


def micro_counts(per_class: Mapping[int, ConfusionCounts]) -> ConfusionCounts:
    """Sum counts over classes (micro averaging)."""
    return ConfusionCounts(
        tp=sum(c.tp for c in per_class.values()),
        fp=sum(c.fp for c in per_class.values()),
        fn=sum(c.fn for c in per_class.values()),
    )


def _rank_and_judge(
    preds: Sequence, gts: Sequence, iou_threshold: float, kind: str
) -> tuple[list[bool], int]:
    """Order predictions by descending confidence and judge each TP/FP by
    greedy matching within its image; returns (hits, n_gt)."""
    cache: dict = {}
    iou = _iou_fn(kind, cache)
    order = sorted(
        range(len(preds)), key=lambda i: (-_confidence(preds[i]), i)
    )
    gt_by_image = defaultdict(list)
    for g in gts:
        gt_by_image[g.image_id].append(g)
    matched: dict[str, list[bool]] = {
        img: [False] * len(gs) for img, gs in gt_by_image.items()
    }
    hits = []
    for i in order:
        p = preds[i]
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gt_by_image.get(p.image_id, [])):
            if matched[p.image_id][j]:
                continue
            value = iou(p, g)
            if value >= iou_threshold and value > best_iou:
                best_j = j
                best_iou = value
        if best_j >= 0:
            matched[p.image_id][best_j] = True
            hits.append(True)
        else:
            hits.append(False)
    return hits, len(gts)


def average_precision(
    preds: Sequence, gts: Sequence, iou_threshold: float, kind: str
) -> float | None:
    """101-point interpolated AP for one class pool.

    Predictions and ground truth are treated as a single class; callers
    evaluating several classes split the inputs first (see
    :func:`per_class_average_precision`). Returns None when the class has
    no ground-truth instances (AP undefined).
    """
    _check_kind(preds, kind, "prediction")
    _check_kind(gts, kind, "ground truth")
    if not gts:
        return None
    if not preds:
        return 0.0
    hits, n_gt = _rank_and_judge(preds, gts, iou_threshold, kind)
    tp_cum = np.cumsum(hits)
    fp_cum = np.cumsum([not h for h in hits])
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    return _interpolated_ap(recall, precision)


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Integrate the monotone precision envelope at 101 recall points."""
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    sampled = np.zeros_like(points)
    for k, r in enumerate(points):
        at_least = recall >= r - 1e-12
        if at_least.any():
            sampled[k] = envelope[at_least].max()
    return float(sampled.mean())


def per_class_average_precision(
    preds: Sequence, gts: Sequence, iou_threshold: float, kind: str
) -> dict[int, float | None]:
    """AP per class id over the union of classes seen in either input."""
    classes = sorted({i.class_id for i in preds} | {i.class_id for i in gts})
    out = {}
    for c in classes:
        out[c] = average_precision(
            [p for p in preds if p.class_id == c],
            [g for g in gts if g.class_id == c],
            iou_threshold,
            kind,
        )
    return out


def mean_ap(per_class_ap, iou_range: Sequence[float] | None = None) -> float:
    """Unweighted mean AP over classes, then over IoU thresholds.

    Accepts either a flat mapping ``{class_id: ap}`` or a nested mapping
    ``{iou_threshold: {class_id: ap}}``; undefined (None) entries are
    excluded. ``iou_range``, when given, selects which thresholds of a
    nested mapping participate.
    """
    if not per_class_ap:
        raise DomainError("mean_ap needs at least one class AP")
    first = next(iter(per_class_ap.values()))
    if isinstance(first, Mapping):
        thresholds = list(per_class_ap) if iou_range is None else list(iou_range)
        per_threshold = []
        for t in thresholds:
            values = [v for v in per_class_ap[t].values() if v is not None]
            if not values:
                raise DomainError(f"no defined class AP at threshold {t}")
            per_threshold.append(sum(values) / len(values))
        return float(sum(per_threshold) / len(per_threshold))
    values = [v for v in per_class_ap.values() if v is not None]
    if not values:
        raise DomainError("mean_ap needs at least one defined class AP")
    return float(sum(values) / len(values))


def iou_thresholds(low: float = 0.5, high: float = 0.95, step: float = 0.05) -> list[float]:
    """Inclusive threshold ladder, e.g. 0.5, 0.55, ..., 0.95."""
    n = int(round((high - low) / step))
    return [round(low + k * step, 10) for k in range(n + 1)]


def map_over_range(
    preds: Sequence,
    gts: Sequence,
    kind: str,
    low: float = 0.5,
    high: float = 0.95,
    step: float = 0.05,
) -> float:
    """Mean AP averaged over classes and an IoU-threshold ladder."""
    nested = {
        t: per_class_average_precision(preds, gts, t, kind)
        for t in iou_thresholds(low, high, step)
    }
    return mean_ap(nested)


def miou(
    pred_masks: Sequence[MaskInstance],
    gt_masks: Sequence[MaskInstance],
    n_classes: int,
) -> float:
    """Dataset-global mean IoU over classes present in ground truth."""
    per_class, _ = per_class_iou(pred_masks, gt_masks, n_classes)
    if not per_class:
        raise DomainError("no ground-truth class present to average")
    return float(sum(per_class.values()) / len(per_class))


def per_class_iou(
    pred_masks: Sequence[MaskInstance],
    gt_masks: Sequence[MaskInstance],
    n_classes: int,
) -> tuple[dict[int, float], list[str]]:
    """Accumulate pixelwise intersection/union per class over the whole
    dataset; classes absent from ground truth (or with zero union) are
    excluded and flagged."""
    _check_kind(pred_masks, "mask", "prediction")
    _check_kind(gt_masks, "mask", "ground truth")
    union_fg: dict[tuple[str, int], np.ndarray] = {}

    def accumulate(instances, side):
        store = defaultdict(dict)
        for inst in instances:
            if inst.class_id >= n_classes:
                raise DomainError(
                    f"class_id {inst.class_id} out of range for {n_classes} classes"
                )
            arr = decode_mask(inst).array
            key = (inst.image_id, inst.class_id)
            if key in store[side]:
                store[side][key] = store[side][key] | arr
            else:
                store[side][key] = arr
        return store[side]

    preds_fg = accumulate(pred_masks, "pred")
    gts_fg = accumulate(gt_masks, "gt")

    inter = defaultdict(int)
    union = defaultdict(int)
    for key in set(preds_fg) | set(gts_fg):
        _, class_id = key
        p = preds_fg.get(key)
        g = gts_fg.get(key)
        if p is not None and g is not None:
            if p.shape != g.shape:
                raise DomainError(f"mask dimensions differ on image {key[0]!r}")
            inter[class_id] += int(np.logical_and(p, g).sum())
            union[class_id] += int(np.logical_or(p, g).sum())
        elif p is not None:
            union[class_id] += int(p.sum())
        else:
            union[class_id] += int(g.sum())

    gt_classes = {g.class_id for g in gt_masks}
    flags = []
    per_class = {}
    for class_id in sorted(set(inter) | set(union)):
        if class_id not in gt_classes:
            flags.append(f"class {class_id} absent from ground truth, excluded")
            continue
        if union[class_id] == 0:
            flags.append(f"class {class_id} has zero union, excluded")
            continue
        per_class[class_id] = inter[class_id] / union[class_id]
    return per_class, flags


def max_f1_confidence(
    preds: Sequence, gts: Sequence, iou_threshold: float, kind: str
) -> tuple[float, float]:
    """Confidence threshold (among prediction scores) maximizing micro-F1,
    ties broken toward the higher threshold."""
    if not preds:
        raise DomainError("max_f1_confidence needs at least one prediction")
    best_t = None
    best_f1 = -1.0
    for t in sorted({_confidence(p) for p in preds}, reverse=True):
        counts = micro_counts(
            confusion_counts(preds, gts, iou_threshold, t, kind)
        )
        score = f1(counts.precision, counts.recall)
        if score > best_f1:
            best_f1 = score
            best_t = t
    return float(best_t), float(best_f1)


@dataclass(frozen=True)
class MetricReport:
    """Per-class and aggregate evaluation results for one prediction set."""

    kind: str
    n_categories: int
    iou_threshold: float
    conf_threshold: float
    precision: float
    recall: float
    f1: float
    map50: float
    map_range: float
    map_range_bounds: tuple[float, float]
    miou: float | None
    per_class: dict[int, dict] = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_categories": self.n_categories,
            "iou_threshold": self.iou_threshold,
            "conf_threshold": self.conf_threshold,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "map50": self.map50,
            "map_range": self.map_range,
            "map_range_bounds": list(self.map_range_bounds),
            "miou": self.miou,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "flags": list(self.flags),
        }


def evaluate(
    preds: Sequence,
    gts: Sequence,
    kind: str,
    n_classes: int,
    iou_threshold: float = 0.5,
    map_high: float = 0.95,
) -> MetricReport:
    """Full evaluation at the max-F1 confidence threshold.

    ``map_high`` bounds the mAP threshold ladder (0.95 standard; 0.90
    available for reports quoting the narrower range).
    """
    if preds:
        conf_threshold, _ = max_f1_confidence(preds, gts, iou_threshold, kind)
    else:
        conf_threshold = 0.0
    per_class_counts = confusion_counts(preds, gts, iou_threshold, conf_threshold, kind)
    total = micro_counts(per_class_counts)
    ap50 = per_class_average_precision(preds, gts, iou_threshold, kind)
    flags = [f"class {c}: AP undefined (no ground truth)" for c, v in ap50.items() if v is None]

    nested = {
        t: per_class_average_precision(preds, gts, t, kind)
        for t in iou_thresholds(0.5, map_high, 0.05)
    }
    iou_per_class: dict[int, float] = {}
    miou_value = None
    if kind == "mask":
        iou_per_class, iou_flags = per_class_iou(preds, gts, n_classes)
        flags.extend(iou_flags)
        if iou_per_class:
            miou_value = float(sum(iou_per_class.values()) / len(iou_per_class))

    per_class = {}
    for c in sorted(set(per_class_counts) | set(ap50)):
        counts = per_class_counts.get(c, ConfusionCounts(0, 0, 0))
        per_class[c] = {
            "tp": counts.tp,
            "fp": counts.fp,
            "fn": counts.fn,
            "precision": counts.precision,
            "recall": counts.recall,
            "f1": f1(counts.precision, counts.recall),
            "ap50": ap50.get(c),
            "iou": iou_per_class.get(c),
        }

    return MetricReport(
        kind=kind,
        n_categories=n_classes,
        iou_threshold=iou_threshold,
        conf_threshold=conf_threshold,
        precision=total.precision,
        recall=total.recall,
        f1=f1(total.precision, total.recall),
        map50=mean_ap(ap50),
        map_range=mean_ap(nested),
        map_range_bounds=(0.5, map_high),
        miou=miou_value,
        per_class=per_class,
        flags=tuple(flags),
    )
