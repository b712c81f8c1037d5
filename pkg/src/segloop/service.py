"""HTTP facade over a pipeline run: review queue, per-image predictions,
corrections, and iteration control.

Single-writer model: corrections and iterations are serialized through
one lock while reads serve the last committed (immutable) state snapshot,
so concurrent GETs never observe a half-applied update. Masks travel as
box-cropped column-major RLE strings, never raw bitmaps.
"""

from __future__ import annotations

import io
import math
import threading
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field

from . import rle
from .errors import SegloopError
from .geometry import decode_mask
from .pipeline import PipelineRun, ReviewTask
from .types import BBox, PromptSet


class PointModel(BaseModel):
    x: float
    y: float
    polarity: Literal["positive", "negative"]


class CorrectionPayloadModel(BaseModel):
    """Staged human corrections for one image, applied atomically."""

    added_points: list[PointModel] = Field(default_factory=list)
    added_boxes: list[list[float]] = Field(default_factory=list)
    deleted_ids: list[str] = Field(default_factory=list)
    adjusted_boxes: dict[str, list[float]] = Field(default_factory=dict)


def _field_error(loc: list, message: str) -> HTTPException:
    return HTTPException(
        status_code=422, detail=[{"loc": loc, "msg": message, "type": "value_error"}]
    )


def _crop_rle(mask_array: np.ndarray) -> dict:
    """Box-cropped RLE payload: counts plus the crop origin and size."""
    ys, xs = np.nonzero(mask_array)
    if xs.size == 0:
        return {"counts": "0", "box": [0, 0, 0, 0], "width": 0, "height": 0}
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    crop = mask_array[y0:y1, x0:x1]
    return {
        "counts": rle.encode_string(crop),
        "box": [x0, y0, x1, y1],
        "width": x1 - x0,
        "height": y1 - y0,
    }


def _prediction_id(image_id: str, index: int) -> str:
    return f"{image_id}#{index}"


def create_app(
    run: PipelineRun,
    image_root: str | Path | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="segloop review service")
    writer_lock = threading.Lock()
    busy = threading.Event()

    images_by_id = run.manifest.images_by_id()

    @app.get("/api/state")
    def get_state():
        return run.summary()

    @app.get("/api/progress")
    def get_progress():
        state = run.state
        return {
            "running": busy.is_set(),
            "iteration": None if state is None else state.iteration,
        }

    @app.get("/api/review")
    def get_review(status: str | None = Query(default=None)):
        tasks = run.tasks
        if status is not None:
            tasks = [t for t in tasks if t.status == status]
        return [t.to_dict() for t in tasks]

    @app.get("/api/images/{image_id}")
    def get_image(image_id: str):
        img = images_by_id.get(image_id)
        if img is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        from PIL import Image

        if image_root is not None:
            path = Path(image_root) / img.uri
            if path.exists():
                return Response(content=path.read_bytes(), media_type="image/png")
        from .synthetic import render_image

        buffer = io.BytesIO()
        Image.fromarray(render_image(run.manifest, image_id)).save(buffer, format="PNG")
        return Response(content=buffer.getvalue(), media_type="image/png")

    @app.get("/api/images/{image_id}/predictions")
    def get_predictions(image_id: str):
        img = images_by_id.get(image_id)
        if img is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        state = run.state
        entry = None if state is None else state.per_image.get(image_id)
        instances = []
        if entry is not None:
            for k, (box, mask) in enumerate(zip(entry.boxes, entry.masks)):
                instances.append(
                    {
                        "id": _prediction_id(image_id, k),
                        "class_id": mask.class_id,
                        "confidence": box.confidence,
                        "box": list(box.corners()),
                        "mask": _crop_rle(decode_mask(mask).array),
                    }
                )
        return {
            "image": {"id": img.id, "width": img.width, "height": img.height},
            "iteration": None if state is None else state.iteration,
            "status": None if entry is None else entry.status,
            "delta": None if entry is None else entry.delta,
            "epsilon": None if state is None else state.epsilon,
            "converged": entry is not None and entry.status == "converged",
            "instances": instances,
        }

    @app.post("/api/images/{image_id}/corrections")
    def post_corrections(image_id: str, payload: CorrectionPayloadModel):
        img = images_by_id.get(image_id)
        if img is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        state = run.state
        entry = None if state is None else state.per_image.get(image_id)
        current = list(entry.boxes) if entry is not None else []
        known_ids = {_prediction_id(image_id, k) for k in range(len(current))}
        for ref in list(payload.deleted_ids) + list(payload.adjusted_boxes):
            if ref not in known_ids:
                raise _field_error(
                    ["body", "deleted_ids"], f"unknown prediction id {ref!r}"
                )
        for coords in list(payload.added_boxes) + list(payload.adjusted_boxes.values()):
            if len(coords) != 4 or not all(math.isfinite(c) for c in coords):
                raise _field_error(["body", "added_boxes"], f"malformed box {coords}")

        edited: list[BBox] = []
        for k, box in enumerate(current):
            pid = _prediction_id(image_id, k)
            if pid in payload.deleted_ids:
                continue
            if pid in payload.adjusted_boxes:
                x0, y0, x1, y1 = payload.adjusted_boxes[pid]
                edited.append(BBox(x0, y0, x1, y1, confidence=box.confidence))
            else:
                edited.append(box)
        for coords in payload.added_boxes:
            x0, y0, x1, y1 = coords
            edited.append(BBox(x0, y0, x1, y1))

        positive = tuple(
            (p.x, p.y) for p in payload.added_points if p.polarity == "positive"
        )
        negative = tuple(
            (p.x, p.y) for p in payload.added_points if p.polarity == "negative"
        )
        prompts = (
            PromptSet(positive_points=positive, negative_points=negative)
            if (positive or negative)
            else None
        )

        pending = next(
            (
                t
                for t in run.tasks
                if t.image_id == image_id and t.status == "pending"
            ),
            None,
        )
        iteration = 0 if run.state is None else run.state.iteration
        task = ReviewTask(
            id=pending.id if pending else f"{image_id}:manual:{iteration}",
            image_id=image_id,
            kind=pending.kind if pending else "false_positive",
            status="corrected",
            created_iteration=pending.created_iteration if pending else iteration,
            proposed_boxes=pending.proposed_boxes if pending else (),
            correction_prompts=prompts,
            corrected_boxes=tuple(edited),
        )
        with writer_lock:
            try:
                run.apply_corrections([task])
            except SegloopError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        applied = next(t for t in run.tasks if t.id == task.id)
        return {"task": applied.to_dict(), "applied": True}

    @app.post("/api/iterate")
    def post_iterate():
        if busy.is_set():
            raise HTTPException(status_code=409, detail="iteration already running")
        if not writer_lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="iteration already running")
        try:
            busy.set()
            try:
                status = run.step()
            except SegloopError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        finally:
            busy.clear()
            writer_lock.release()
        summary = run.summary()
        summary["status"] = status
        return JSONResponse(summary)

    if ui_dir is not None and Path(ui_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
