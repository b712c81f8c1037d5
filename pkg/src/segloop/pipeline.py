"""The iterative annotation loop: seed prompting, detector training,
box-prompted mask refinement, convergence checking, review queueing, and
the prompt-variant / fine-fraction benchmark protocols.

One iteration refines every not-yet-converged image: the detector is
fitted on all refined annotations, its confident predictions (>= the fine
threshold) become box prompts, the segmenter's masks are reduced to new
minimum bounding boxes, and the normalized corner displacement against
the previous boxes decides convergence. Images with zero predicted boxes
(recall failure) or a refined mask covering < 20% of its prompt box
(precision failure) enter the review queue; corrections re-enter the loop
as fresh prompts.

The whole run is a pure function of (dataset, config, seed): per-iteration
randomness is derived statelessly from the seed, so checkpoint/resume and
repeated runs are bitwise identical.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml
from scipy import ndimage

from .adapters import EmptyResultError, create_detector, create_segmenter
from .dataset_io import DatasetManifest, split_dataset
from .errors import DomainError, UnknownImageError
from .geometry import (
    box_iou_matrix,
    decode_mask,
    expand_box,
    minimum_bounding_box,
    symmetric_pair_match,
)
from .metrics import evaluate
from .types import (
    BBox,
    ImageRecord,
    IterationState,
    MaskInstance,
    PerImageState,
    PromptSet,
)

PromptSource = Callable[[ImageRecord], PromptSet]


@dataclass(frozen=True)
class PipelineConfig:
    """Loop thresholds, sampling controls, and adapter selection."""

    epsilon: float = 0.005
    fine_confidence: float = 0.5
    max_iterations: int = 10
    converged_fraction: float = 0.99
    seed_fraction: float = 0.1
    fine_fraction: float = 1.0
    seed: int = 0
    workers: int = 0  # 0 = one thread per machine core, 1 = serial
    segmenter: dict = field(default_factory=lambda: {"name": "oracle"})
    detector: dict = field(default_factory=lambda: {"name": "oracle"})

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DomainError("epsilon must be > 0")
        if not 0 < self.converged_fraction <= 1:
            raise DomainError("converged_fraction must be in (0, 1]")
        if not 0 <= self.fine_confidence <= 1:
            raise DomainError("fine_confidence must be in [0, 1]")
        if not 0 < self.fine_fraction <= 1:
            raise DomainError("fine_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "fine_confidence": self.fine_confidence,
            "max_iterations": self.max_iterations,
            "converged_fraction": self.converged_fraction,
            "seed_fraction": self.seed_fraction,
            "fine_fraction": self.fine_fraction,
            "seed": self.seed,
            "workers": self.workers,
            "segmenter": self.segmenter,
            "detector": self.detector,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_yaml(cls, path: str | Path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)


@dataclass(frozen=True)
class ReviewTask:
    """One human-review request: a recall or precision failure."""

    id: str
    image_id: str
    kind: str  # missed_detection | false_positive
    status: str = "pending"  # pending | corrected | accepted
    created_iteration: int = 0
    proposed_boxes: tuple[BBox, ...] = ()
    correction_prompts: PromptSet | None = None
    corrected_boxes: tuple[BBox, ...] | None = None
    resolution: str | None = None  # manual | auto

    def __post_init__(self):
        if self.kind not in ("missed_detection", "false_positive"):
            raise DomainError(f"unknown review kind {self.kind!r}")
        if self.status not in ("pending", "corrected", "accepted"):
            raise DomainError(f"unknown review status {self.status!r}")
        if self.status == "corrected" and (
            self.correction_prompts is None and self.corrected_boxes is None
        ):
            raise DomainError(
                "corrected tasks must carry replacement prompts or boxes"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_id": self.image_id,
            "kind": self.kind,
            "status": self.status,
            "created_iteration": self.created_iteration,
            "proposed_boxes": [b.to_dict() for b in self.proposed_boxes],
            "correction_prompts": None
            if self.correction_prompts is None
            else self.correction_prompts.to_dict(),
            "corrected_boxes": None
            if self.corrected_boxes is None
            else [b.to_dict() for b in self.corrected_boxes],
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReviewTask":
        return cls(
            id=d["id"],
            image_id=d["image_id"],
            kind=d["kind"],
            status=d.get("status", "pending"),
            created_iteration=int(d.get("created_iteration", 0)),
            proposed_boxes=tuple(BBox.from_dict(b) for b in d.get("proposed_boxes", [])),
            correction_prompts=None
            if d.get("correction_prompts") is None
            else PromptSet.from_dict(d["correction_prompts"]),
            corrected_boxes=None
            if d.get("corrected_boxes") is None
            else tuple(BBox.from_dict(b) for b in d["corrected_boxes"]),
            resolution=d.get("resolution"),
        )


def derive_seed(*parts: int | str) -> int:
    """Stateless sub-seed derivation, stable across runs and platforms."""
    import zlib

    entropy = [
        zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p) & 0xFFFFFFFF
        for p in parts
    ]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def mbb_prompt_source(manifest: DatasetManifest) -> PromptSource:
    """Exact minimum-bounding-box prompts from the manifest's annotations."""

    def source(img: ImageRecord) -> PromptSet:
        instances = manifest.annotations.get(img.id, ())
        return PromptSet(
            boxes=tuple(minimum_bounding_box(decode_mask(i)) for i in instances)
        )

    return source


def iteration_delta(prev: Sequence[BBox], nxt: Sequence[BBox], image: ImageRecord) -> float:
    """Normalized box-set displacement between consecutive iterations.

    Boxes are paired by descending-IoU greedy matching at IoU 0.1 (a
    symmetric construction, since neither side outranks the other); each
    matched pair contributes its mean absolute corner displacement divided
    by the image diagonal, every unmatched box contributes 1.0, and the
    result is the mean over all contributions. Empty vs empty is 0.
    """
    if not prev and not nxt:
        return 0.0
    diag = math.hypot(image.width, image.height)
    ious = box_iou_matrix(list(prev), list(nxt))
    result = symmetric_pair_match(ious, 0.1)
    contributions = []
    for i, j, _ in result.pairs:
        a = prev[i].corners()
        b = nxt[j].corners()
        displacement = sum(abs(x - y) for x, y in zip(a, b)) / 4.0
        contributions.append(displacement / diag)
    contributions.extend(1.0 for _ in result.unmatched_preds)
    contributions.extend(1.0 for _ in result.unmatched_refs)
    return float(sum(contributions) / len(contributions))


def check_convergence(state: IterationState, cfg: PipelineConfig) -> str:
    """'converged' when enough images sit below epsilon, 'stalled' at the
    iteration cap, else 'continue'."""
    if state.iteration < 1:
        raise DomainError("convergence is checked after the first iteration")
    total = len(state.per_image)
    done = sum(1 for e in state.per_image.values() if e.status == "converged")
    if total and done / total >= cfg.converged_fraction:
        return "converged"
    if state.iteration >= cfg.max_iterations:
        return "stalled"
    return "continue"


def sample_point_prompts(
    gt_mask: MaskInstance, n_pos: int, n_neg: int, seed: int
) -> PromptSet:
    """Positive points from the mask interior (deepest first, then seeded
    uniform), negatives outside the mask but inside its box expanded 20%."""
    if n_pos < 1:
        raise DomainError("need at least one positive point")
    bitmap = decode_mask(gt_mask)
    arr = bitmap.array
    if not arr.any():
        raise DomainError("mask has no foreground pixel")
    fg_count = int(arr.sum())
    if fg_count < n_pos:
        raise DomainError(
            f"mask has {fg_count} pixels, cannot host {n_pos} distinct points"
        )
    rng = np.random.default_rng(derive_seed(seed, gt_mask.image_id, "points"))

    distance = ndimage.distance_transform_edt(arr)
    flat_best = int(np.argmax(distance))
    by, bx = divmod(flat_best, arr.shape[1])
    positives = [(bx + 0.5, by + 0.5)]
    if n_pos > 1:
        ys, xs = np.nonzero(arr)
        pool = [
            (x + 0.5, y + 0.5)
            for x, y in zip(xs.tolist(), ys.tolist())
            if (x + 0.5, y + 0.5) != positives[0]
        ]
        picks = rng.choice(len(pool), size=n_pos - 1, replace=False)
        positives.extend(pool[int(k)] for k in sorted(picks))

    negatives = []
    if n_neg > 0:
        img = ImageRecord(
            id=gt_mask.image_id, width=bitmap.width, height=bitmap.height
        )
        box = expand_box(minimum_bounding_box(bitmap), 0.20, img)
        ys, xs = np.mgrid[0 : bitmap.height, 0 : bitmap.width]
        cx = xs + 0.5
        cy = ys + 0.5
        region = (
            (cx >= box.x_min)
            & (cx < box.x_max)
            & (cy >= box.y_min)
            & (cy < box.y_max)
            & ~arr
        )
        ny, nx = np.nonzero(region)
        if len(ny) < n_neg:
            raise DomainError(
                f"only {len(ny)} negative positions available, need {n_neg}"
            )
        picks = rng.choice(len(ny), size=n_neg, replace=False)
        negatives = [
            (float(nx[int(k)]) + 0.5, float(ny[int(k)]) + 0.5) for k in sorted(picks)
        ]
    return PromptSet(positive_points=tuple(positives), negative_points=tuple(negatives))


def _segment_boxes(segmenter, img: ImageRecord, boxes: Sequence[BBox]):
    """Segment one image with box prompts; returns (boxes, masks) aligned
    lists, dropping boxes whose prompt produced no candidate."""
    if not boxes:
        return [], []
    try:
        result = segmenter.segment(img, PromptSet(boxes=tuple(boxes)))
    except EmptyResultError:
        return [], []
    by_box = result.by_box()
    kept_boxes = []
    masks = []
    for k, box in enumerate(boxes):
        cand = by_box.get(k)
        if cand is None:
            continue
        kept_boxes.append(box)
        masks.append(
            replace(cand.mask, confidence=box.confidence)
            if box.confidence is not None
            else cand.mask
        )
    return kept_boxes, masks


def seed_annotate(
    images: Sequence[ImageRecord],
    prompt_source: PromptSource,
    segmenter,
    *,
    all_images: Sequence[ImageRecord] | None = None,
    epsilon: float = 0.005,
    fine_confidence: float = 0.5,
) -> tuple[IterationState, list[ReviewTask]]:
    """Annotate the seed subset from human prompts; iteration 0 state.

    Non-seed images (from ``all_images``) are registered with status
    'auto' and no annotation. Images whose prompts produce no candidate
    are queued for review as missed detections.
    """
    if not images:
        raise DomainError("pipeline needs at least one seed image")
    per_image: dict[str, PerImageState] = {}
    tasks: list[ReviewTask] = []
    for img in all_images or images:
        per_image[img.id] = PerImageState(status="auto")
    for img in images:
        prompts = prompt_source(img)
        try:
            result = segmenter.segment(img, prompts)
        except EmptyResultError:
            tasks.append(
                ReviewTask(
                    id=f"{img.id}:missed_detection:0",
                    image_id=img.id,
                    kind="missed_detection",
                    created_iteration=0,
                )
            )
            per_image[img.id] = PerImageState(status="review")
            continue
        if prompts.boxes:
            masks = [c.mask for c in result.by_box().values()]
        else:
            masks = [result.top.mask]
        boxes = tuple(
            minimum_bounding_box(decode_mask(m)).with_confidence(m.confidence)
            for m in masks
        )
        per_image[img.id] = PerImageState(
            status="seed", boxes=boxes, masks=tuple(masks)
        )
    state = IterationState(
        iteration=0,
        per_image=per_image,
        epsilon=epsilon,
        fine_confidence=fine_confidence,
    )
    return state, tasks


def _mask_box_coverage(mask: MaskInstance, box: BBox) -> float:
    arr = decode_mask(mask).array
    h, w = arr.shape
    x0 = max(0, int(math.floor(box.x_min)))
    y0 = max(0, int(math.floor(box.y_min)))
    x1 = min(w, int(math.ceil(box.x_max)))
    y1 = min(h, int(math.ceil(box.y_max)))
    if x1 <= x0 or y1 <= y0 or box.area <= 0:
        return 0.0
    return float(arr[y0:y1, x0:x1].sum()) / box.area


def run_iteration(
    state: IterationState,
    detector,
    segmenter,
    cfg: PipelineConfig,
    *,
    images: Sequence[ImageRecord],
    tasks: Sequence[ReviewTask] = (),
) -> tuple[IterationState, list[ReviewTask]]:
    """One refinement round; returns the state at t+1 and the updated
    review-task list. The input state is never mutated."""
    by_id = {img.id: img for img in images}
    annotated = [
        (by_id[i], e.boxes)
        for i, e in state.per_image.items()
        if e.boxes and e.status in ("seed", "fine", "converged") and i in by_id
    ]
    if not annotated:
        raise DomainError("no annotated images to train on")
    t_next = state.iteration + 1
    model = detector.fit(annotated, seed=derive_seed(cfg.seed, "fit", t_next))

    targets = [
        img
        for img in images
        if state.per_image.get(img.id) is not None
        and state.per_image[img.id].status != "converged"
    ]

    def predict(img: ImageRecord) -> list[BBox]:
        return detector.predict(model, img)

    predictions = _map_images(predict, targets, cfg.workers)
    fine_by_id = {
        img.id: [b for b in raw if (b.confidence or 0.0) >= cfg.fine_confidence]
        for img, raw in zip(targets, predictions)
    }

    # Promotion budget for the fine-fraction protocol: seeds are exempt,
    # images already refined hold their slot, and the remaining slots go
    # to the highest-confidence new candidates.
    nonseed_ids = {i for i, e in state.per_image.items() if e.status != "seed"}
    budget = math.ceil(cfg.fine_fraction * len(nonseed_ids)) if nonseed_ids else 0
    holders = {
        i
        for i in nonseed_ids
        if state.per_image[i].status in ("fine", "converged")
    }
    newcomers = sorted(
        (
            img
            for img in targets
            if img.id in nonseed_ids
            and img.id not in holders
            and fine_by_id[img.id]
        ),
        key=lambda img: (
            -(
                sum(b.confidence or 0.0 for b in fine_by_id[img.id])
                / len(fine_by_id[img.id])
            ),
            img.id,
        ),
    )
    promoted = {img.id for img in newcomers[: max(0, budget - len(holders))]}
    refine_ids = {
        img.id
        for img in targets
        if fine_by_id[img.id]
        and (
            state.per_image[img.id].status == "seed"
            or img.id in holders
            or img.id in promoted
        )
    }

    per_image = dict(state.per_image)
    new_tasks = list(tasks)
    to_refine = [img for img in targets if img.id in refine_ids]
    refinements = _map_images(
        lambda img: _segment_boxes(segmenter, img, fine_by_id[img.id]),
        to_refine,
        cfg.workers,
    )
    refined_by_id = dict(zip((img.id for img in to_refine), refinements))

    for img, raw in zip(targets, predictions):
        prev = per_image[img.id]
        if not raw:
            # recall failure: the detector sees nothing here
            new_tasks = _ensure_task(new_tasks, img.id, "missed_detection", t_next)
            per_image[img.id] = replace(prev, status="review")
            continue
        if img.id not in refined_by_id:
            continue  # below the fine gate or outside the promotion budget
        kept_boxes, masks = refined_by_id[img.id]
        if not masks:
            new_tasks = _ensure_task(new_tasks, img.id, "missed_detection", t_next)
            per_image[img.id] = replace(prev, status="review")
            continue
        new_boxes = tuple(
            minimum_bounding_box(decode_mask(m)).with_confidence(b.confidence)
            for m, b in zip(masks, kept_boxes)
        )
        delta = iteration_delta(prev.boxes, new_boxes, img)
        low_precision = tuple(
            b for m, b in zip(masks, kept_boxes) if _mask_box_coverage(m, b) < 0.20
        )
        if low_precision:
            status = "review"
            new_tasks = _ensure_task(
                new_tasks, img.id, "false_positive", t_next, proposed=low_precision
            )
        elif delta < cfg.epsilon:
            status = "converged"
        else:
            status = "seed" if prev.status == "seed" else "fine"
        per_image[img.id] = PerImageState(
            status=status, boxes=new_boxes, masks=tuple(masks), delta=delta
        )
        if status != "review":
            new_tasks = _auto_resolve(new_tasks, img.id)

    new_state = IterationState(
        iteration=t_next,
        per_image=per_image,
        epsilon=state.epsilon,
        fine_confidence=state.fine_confidence,
    )
    return new_state, new_tasks


def _ensure_task(
    tasks: list[ReviewTask],
    image_id: str,
    kind: str,
    iteration: int,
    proposed: tuple[BBox, ...] = (),
) -> list[ReviewTask]:
    for task in tasks:
        if task.image_id == image_id and task.kind == kind and task.status == "pending":
            return tasks
    return tasks + [
        ReviewTask(
            id=f"{image_id}:{kind}:{iteration}",
            image_id=image_id,
            kind=kind,
            status="pending",
            created_iteration=iteration,
            proposed_boxes=proposed,
        )
    ]


def _auto_resolve(tasks: list[ReviewTask], image_id: str) -> list[ReviewTask]:
    out = []
    for task in tasks:
        if task.image_id == image_id and task.status == "pending":
            out.append(replace(task, status="accepted", resolution="auto"))
        else:
            out.append(task)
    return out


def _map_images(fn, items, workers: int):
    """Per-image adapter calls; workers=0 means one thread per core,
    workers=1 runs serially. Results keep the input order either way."""
    import os

    count = workers if workers > 0 else (os.cpu_count() or 1)
    if count > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=count) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def apply_corrections(
    state: IterationState,
    tasks: Sequence[ReviewTask],
    segmenter,
    *,
    images: Mapping[str, ImageRecord],
) -> tuple[IterationState, list[ReviewTask]]:
    """Re-segment corrected review tasks immediately; the affected images
    are marked fine (rejoining the next training round) and the tasks are
    accepted."""
    per_image = dict(state.per_image)
    out_tasks = []
    for task in tasks:
        if task.status != "corrected":
            out_tasks.append(task)
            continue
        img = images.get(task.image_id)
        if img is None:
            raise UnknownImageError(f"correction references {task.image_id!r}")
        prev = per_image.get(task.image_id, PerImageState(status="auto"))
        boxes: list[BBox] = []
        masks: list[MaskInstance] = []
        if task.corrected_boxes is not None:
            kept, seg_masks = _segment_boxes(segmenter, img, task.corrected_boxes)
            for box, mask in zip(kept, seg_masks):
                boxes.append(
                    minimum_bounding_box(decode_mask(mask)).with_confidence(
                        box.confidence
                    )
                )
                masks.append(mask)
        if task.correction_prompts is not None:
            prompts = task.correction_prompts
            if prompts.boxes:
                kept, seg_masks = _segment_boxes(segmenter, img, prompts.boxes)
                pairs = zip(kept, seg_masks)
            else:
                result = segmenter.segment(img, prompts)
                pairs = [(None, result.top.mask)]
            for box, mask in pairs:
                boxes.append(
                    minimum_bounding_box(decode_mask(mask)).with_confidence(
                        None if box is None else box.confidence
                    )
                )
                masks.append(mask)
        delta = iteration_delta(prev.boxes, boxes, images[task.image_id])
        per_image[task.image_id] = PerImageState(
            status="fine", boxes=tuple(boxes), masks=tuple(masks), delta=delta
        )
        out_tasks.append(replace(task, status="accepted", resolution="manual"))
    new_state = IterationState(
        iteration=state.iteration,
        per_image=per_image,
        epsilon=state.epsilon,
        fine_confidence=state.fine_confidence,
    )
    return new_state, out_tasks


class PipelineRun:
    """Coordinator owning the evolving state, review queue, checkpoints,
    and adapters for one dataset."""

    def __init__(
        self,
        manifest: DatasetManifest,
        config: PipelineConfig,
        segmenter=None,
        detector=None,
        checkpoint_dir: str | Path | None = None,
    ):
        self.manifest = manifest
        self.config = config
        self.segmenter = segmenter or create_segmenter(
            config.segmenter.get("name", "oracle"), manifest, config.segmenter
        )
        self.detector = detector or create_detector(
            config.detector.get("name", "oracle"), manifest, config.detector
        )
        self.checkpoint_dir = None if checkpoint_dir is None else Path(checkpoint_dir)
        # state and tasks swap together in one reference assignment so
        # concurrent readers always see a consistent committed snapshot
        self._snapshot: tuple[IterationState | None, tuple[ReviewTask, ...]] = (
            None,
            (),
        )
        self.history: list[IterationState] = []

    @property
    def state(self) -> IterationState | None:
        return self._snapshot[0]

    @state.setter
    def state(self, value: IterationState | None) -> None:
        self._snapshot = (value, self._snapshot[1])

    @property
    def tasks(self) -> list[ReviewTask]:
        return list(self._snapshot[1])

    @tasks.setter
    def tasks(self, value) -> None:
        self._snapshot = (self._snapshot[0], tuple(value))

    def _commit(self, state: IterationState, tasks) -> None:
        self._snapshot = (state, tuple(tasks))

    # -- lifecycle ---------------------------------------------------------

    def seed_images(self) -> list[ImageRecord]:
        images = list(self.manifest.images)
        n_seed = int(math.floor(self.config.seed_fraction * len(images) + 0.5))
        if n_seed < 1:
            raise DomainError("seed_fraction selects no seed image")
        rng = np.random.default_rng(derive_seed(self.config.seed, "seed-images"))
        picks = sorted(rng.choice(len(images), size=n_seed, replace=False).tolist())
        return [images[k] for k in picks]

    def prepare(self, prompt_source: PromptSource | None = None) -> IterationState:
        source = prompt_source or mbb_prompt_source(self.manifest)
        state, tasks = seed_annotate(
            self.seed_images(),
            source,
            self.segmenter,
            all_images=self.manifest.images,
            epsilon=self.config.epsilon,
            fine_confidence=self.config.fine_confidence,
        )
        self._commit(state, tasks)
        self.history = [state]
        self._checkpoint()
        return state

    def step(self) -> str:
        if self.state is None:
            raise DomainError("call prepare() before step()")
        state, tasks = run_iteration(
            self.state,
            self.detector,
            self.segmenter,
            self.config,
            images=self.manifest.images,
            tasks=self.tasks,
        )
        self._commit(state, tasks)
        self.history.append(state)
        self._checkpoint()
        return check_convergence(state, self.config)

    def run_until_converged(self) -> str:
        if self.state is None:
            self.prepare()
        status = "continue"
        while status == "continue":
            status = self.step()
        return status

    def apply_corrections(self, tasks: Sequence[ReviewTask]) -> None:
        if self.state is None:
            raise DomainError("no active state")
        merged = {t.id: t for t in self.tasks}
        for t in tasks:
            merged[t.id] = t
        state, out = apply_corrections(
            self.state,
            list(merged.values()),
            self.segmenter,
            images=self.manifest.images_by_id(),
        )
        self._commit(state, out)
        self.history[-1] = state
        self._checkpoint()

    # -- checkpointing -----------------------------------------------------

    def _checkpoint(self) -> None:
        if self.checkpoint_dir is None or self.state is None:
            return
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = self.checkpoint_dir / "manifest.json"
        if not manifest_path.exists():
            self.manifest.save(manifest_path)
        config_path = self.checkpoint_dir / "config.json"
        if not config_path.exists():
            config_path.write_text(
                json.dumps(self.config.to_dict(), sort_keys=True, indent=1) + "\n",
                encoding="utf-8",
            )
        payload = {
            "state": self.state.to_dict(),
            "tasks": [t.to_dict() for t in self.tasks],
        }
        path = self.checkpoint_dir / f"state_{self.state.iteration:04d}.json"
        path.write_text(
            json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
        run_meta = {
            "iteration": self.state.iteration,
            "iterations": [s.iteration for s in self.history],
        }
        (self.checkpoint_dir / "run.json").write_text(
            json.dumps(run_meta, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, checkpoint_dir: str | Path) -> "PipelineRun":
        checkpoint_dir = Path(checkpoint_dir)
        manifest = DatasetManifest.load(checkpoint_dir / "manifest.json")
        config = PipelineConfig.from_dict(
            json.loads((checkpoint_dir / "config.json").read_text(encoding="utf-8"))
        )
        run = cls(manifest, config, checkpoint_dir=checkpoint_dir)
        meta = json.loads((checkpoint_dir / "run.json").read_text(encoding="utf-8"))
        run.history = []
        for t in meta["iterations"]:
            payload = json.loads(
                (checkpoint_dir / f"state_{t:04d}.json").read_text(encoding="utf-8")
            )
            run.history.append(IterationState.from_dict(payload["state"]))
        run.state = run.history[-1]
        latest = json.loads(
            (checkpoint_dir / f"state_{meta['iteration']:04d}.json").read_text(
                encoding="utf-8"
            )
        )
        run.tasks = [ReviewTask.from_dict(t) for t in latest["tasks"]]
        return run

    # -- summaries ---------------------------------------------------------

    def summary(self) -> dict:
        state, tasks = self._snapshot
        if state is None:
            return {"iteration": None, "images": len(self.manifest.images)}
        statuses: dict[str, int] = {}
        deltas = []
        for entry in state.per_image.values():
            statuses[entry.status] = statuses.get(entry.status, 0) + 1
            if entry.delta is not None:
                deltas.append(entry.delta)
        total = len(state.per_image)
        converged = statuses.get("converged", 0)
        if deltas:
            top = max(max(deltas), state.epsilon * 2)
            edges = [top * k / 8 for k in range(9)]
            counts = [0] * 8
            for d in deltas:
                slot = min(7, int(8 * d / top) if top > 0 else 0)
                counts[slot] += 1
            histogram = {"edges": edges, "counts": counts}
        else:
            histogram = {"edges": [], "counts": []}
        return {
            "iteration": state.iteration,
            "images": total,
            "statuses": statuses,
            "converged_fraction": converged / total if total else 0.0,
            "epsilon": state.epsilon,
            "fine_confidence": state.fine_confidence,
            "mean_delta": float(np.mean(deltas)) if deltas else None,
            "delta_histogram": histogram,
            "pending_reviews": sum(1 for t in tasks if t.status == "pending"),
            "history": [
                {
                    "iteration": s.iteration,
                    "converged_fraction": (
                        sum(1 for e in s.per_image.values() if e.status == "converged")
                        / len(s.per_image)
                        if s.per_image
                        else 0.0
                    ),
                    "mean_delta": (
                        float(
                            np.mean(
                                [
                                    e.delta
                                    for e in s.per_image.values()
                                    if e.delta is not None
                                ]
                            )
                        )
                        if any(e.delta is not None for e in s.per_image.values())
                        else None
                    ),
                }
                for s in self.history
            ],
        }


# -- benchmark protocols -----------------------------------------------------


def parse_strategy(strategy: str) -> dict:
    """Parse 'MBB', 'MBB+10%', '3P', or '3P+4N' into prompt parameters."""
    s = strategy.strip().upper()
    if s == "MBB":
        return {"kind": "box", "expand": 0.0}
    if s.startswith("MBB+") and s.endswith("%"):
        return {"kind": "box", "expand": float(s[4:-1]) / 100.0}
    if "P" in s:
        left, _, right = s.partition("+")
        n_pos = int(left.rstrip("P"))
        n_neg = int(right.rstrip("N")) if right else 0
        return {"kind": "points", "n_pos": n_pos, "n_neg": n_neg}
    raise DomainError(f"unknown prompt strategy {strategy!r}")


def benchmark_prompts(
    manifest: DatasetManifest,
    segmenter,
    strategies: Sequence[str],
    seed: int = 0,
) -> dict[str, float]:
    """Prompt every ground-truth instance under each strategy and score
    the top-ranked candidate masks against the hidden truth (mIoU)."""
    n_classes = len(manifest.class_names)
    table: dict[str, float] = {}
    for strategy in strategies:
        spec = parse_strategy(strategy)
        preds: list[MaskInstance] = []
        gts: list[MaskInstance] = []
        for img in manifest.images:
            for idx, inst in enumerate(manifest.annotations.get(img.id, ())):
                gts.append(inst)
                if spec["kind"] == "box":
                    box = expand_box(
                        minimum_bounding_box(decode_mask(inst)), spec["expand"], img
                    )
                    prompts = PromptSet(boxes=(box,))
                else:
                    prompts = sample_point_prompts(
                        inst, spec["n_pos"], spec["n_neg"], derive_seed(seed, img.id, idx)
                    )
                try:
                    result = segmenter.segment(img, prompts)
                except EmptyResultError:
                    continue
                top = result.top.mask
                preds.append(
                    replace(top, class_id=inst.class_id, confidence=result.top.confidence)
                )
        from .metrics import miou as dataset_miou

        table[strategy] = (
            dataset_miou(preds, gts, n_classes) if gts else 0.0
        )
    return table


def final_annotation_quality(run: PipelineRun) -> float:
    """mIoU of the run's current masks against the manifest's hidden truth."""
    from .metrics import miou as dataset_miou

    preds: list[MaskInstance] = []
    gts: list[MaskInstance] = []
    for img in run.manifest.images:
        gts.extend(run.manifest.annotations.get(img.id, ()))
        entry = run.state.per_image.get(img.id) if run.state else None
        if entry is not None:
            preds.extend(entry.masks)
    return dataset_miou(preds, gts, len(run.manifest.class_names))


def fine_fraction_experiment(
    manifest: DatasetManifest,
    fractions: Sequence[float],
    cfg: PipelineConfig,
    seeds: Sequence[int] | None = None,
) -> dict[float, dict[str, float]]:
    """For each fine-box budget fraction, run the loop on the train split
    and score detector+segmenter predictions on the held-out split.

    Returns fraction -> mean {miou, map50_mask, f1} over the given seeds.
    """
    seeds = list(seeds) if seeds else [cfg.seed]
    if not any(img.split == "val" for img in manifest.images):
        manifest = split_dataset(manifest, (0.9, 0.1), seed=cfg.seed)
    train_images = manifest.split_images("train")
    val_images = manifest.split_images("val")
    results: dict[float, dict[str, float]] = {}
    for fraction in fractions:
        scores: dict[str, list[float]] = {"miou": [], "map50_mask": [], "f1": []}
        for seed in seeds:
            run_cfg = replace(
                cfg,
                fine_fraction=fraction,
                seed=seed,
                detector={**cfg.detector, "n_full": len(train_images)},
            )
            train_manifest = DatasetManifest(
                name=f"{manifest.name}-train",
                images=train_images,
                class_names=manifest.class_names,
                annotations={
                    i.id: manifest.annotations.get(i.id, ()) for i in train_images
                },
                provenance=manifest.provenance,
            )
            # adapters see the full image registry so the held-out split
            # can be predicted/segmented with the same backends
            segmenter = create_segmenter(
                run_cfg.segmenter.get("name", "oracle"), manifest, run_cfg.segmenter
            )
            detector = create_detector(
                run_cfg.detector.get("name", "oracle"), manifest, run_cfg.detector
            )
            run = PipelineRun(train_manifest, run_cfg, segmenter, detector)
            run.prepare()
            run.run_until_converged()

            annotated = [
                (train_manifest.images_by_id()[i], e.boxes)
                for i, e in run.state.per_image.items()
                if e.boxes and e.status in ("seed", "fine", "converged")
            ]
            model = detector.fit(annotated, seed=derive_seed(seed, "final-fit"))
            preds: list[MaskInstance] = []
            gts: list[MaskInstance] = []
            for img in val_images:
                gts.extend(manifest.annotations.get(img.id, ()))
                boxes = [
                    b
                    for b in detector.predict(model, img)
                    if (b.confidence or 0.0) >= run_cfg.fine_confidence
                ]
                _, masks = _segment_boxes(segmenter, img, boxes)
                preds.extend(masks)
            report = evaluate(
                preds, gts, kind="mask", n_classes=len(manifest.class_names)
            )
            scores["miou"].append(report.miou or 0.0)
            scores["map50_mask"].append(report.map50)
            scores["f1"].append(report.f1)
        results[float(fraction)] = {
            key: float(np.mean(values)) for key, values in scores.items()
        }
    return results
