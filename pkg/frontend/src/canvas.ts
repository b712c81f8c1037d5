/**
 * Canvas-editor geometry: hit-testing, corner dragging, nudging, and the
 * overlay renderer. The math helpers are pure so they can be unit-tested
 * without a DOM; only `renderOverlay` touches a 2D context.
 */

import type { PredictedInstance } from "./api.js";
import type { Box, StagedCorrection } from "./store.js";
import { maskToRgba } from "./rle.js";

export type Handle = "nw" | "ne" | "sw" | "se";

export function normalizeBox(box: Box): Box {
  const [x0, y0, x1, y1] = box;
  return [Math.min(x0, x1), Math.min(y0, y1), Math.max(x0, x1), Math.max(y0, y1)];
}

export function boxContains(box: Box, x: number, y: number): boolean {
  return x >= box[0] && x <= box[2] && y >= box[1] && y <= box[3];
}

/** Topmost (last-drawn) instance whose box contains the point. */
export function hitTestInstances(
  instances: { id: string; box: Box }[],
  x: number,
  y: number,
): string | null {
  for (let i = instances.length - 1; i >= 0; i--) {
    const inst = instances[i];
    if (inst && boxContains(inst.box, x, y)) {
      return inst.id;
    }
  }
  return null;
}

export function hitTestHandle(
  box: Box,
  x: number,
  y: number,
  tolerance: number,
): Handle | null {
  const corners: [Handle, number, number][] = [
    ["nw", box[0], box[1]],
    ["ne", box[2], box[1]],
    ["sw", box[0], box[3]],
    ["se", box[2], box[3]],
  ];
  for (const [handle, cx, cy] of corners) {
    if (Math.abs(x - cx) <= tolerance && Math.abs(y - cy) <= tolerance) {
      return handle;
    }
  }
  return null;
}

export function applyHandleDrag(box: Box, handle: Handle, dx: number, dy: number): Box {
  const [x0, y0, x1, y1] = box;
  switch (handle) {
    case "nw":
      return normalizeBox([x0 + dx, y0 + dy, x1, y1]);
    case "ne":
      return normalizeBox([x0, y0 + dy, x1 + dx, y1]);
    case "sw":
      return normalizeBox([x0 + dx, y0, x1, y1 + dy]);
    case "se":
      return normalizeBox([x0, y0, x1 + dx, y1 + dy]);
  }
}

export function nudgeBox(box: Box, dx: number, dy: number): Box {
  return [box[0] + dx, box[1] + dy, box[2] + dx, box[3] + dy];
}

export function clampBox(box: Box, width: number, height: number): Box {
  const [x0, y0, x1, y1] = normalizeBox(box);
  return [
    Math.max(0, Math.min(x0, width)),
    Math.max(0, Math.min(y0, height)),
    Math.max(0, Math.min(x1, width)),
    Math.max(0, Math.min(y1, height)),
  ];
}

const CLASS_COLORS: [number, number, number][] = [
  [96, 200, 120],
  [240, 170, 80],
  [120, 150, 250],
  [230, 110, 170],
  [110, 210, 210],
  [220, 220, 110],
];

export function classColor(classId: number): [number, number, number] {
  return CLASS_COLORS[classId % CLASS_COLORS.length] ?? [200, 200, 200];
}

/** The effective box of an instance after staged adjustments. */
export function effectiveBox(inst: PredictedInstance, staged: StagedCorrection): Box {
  return staged.adjustedBoxes[inst.id] ?? inst.box;
}

export function visibleInstances(
  instances: PredictedInstance[],
  staged: StagedCorrection,
): PredictedInstance[] {
  return instances.filter((inst) => !staged.deletedIds.includes(inst.id));
}

export interface OverlayOptions {
  scale: number;
  selectedId: string | null;
  showMasks: boolean;
}

export function renderOverlay(
  ctx: CanvasRenderingContext2D,
  image: CanvasImageSource | null,
  width: number,
  height: number,
  instances: PredictedInstance[],
  staged: StagedCorrection,
  options: OverlayOptions,
): void {
  const { scale, selectedId, showMasks } = options;
  ctx.save();
  ctx.clearRect(0, 0, width * scale, height * scale);
  if (image) {
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(image, 0, 0, width * scale, height * scale);
  } else {
    ctx.fillStyle = "#15181d";
    ctx.fillRect(0, 0, width * scale, height * scale);
  }

  const visible = visibleInstances(instances, staged);
  if (showMasks) {
    for (const inst of visible) {
      if (inst.mask.width === 0 || inst.mask.height === 0) continue;
      const rgba = maskToRgba(inst.mask, classColor(inst.class_id));
      const tile = new OffscreenCanvas(inst.mask.width, inst.mask.height);
      const tileCtx = tile.getContext("2d");
      if (!tileCtx) continue;
      const imageData = tileCtx.createImageData(inst.mask.width, inst.mask.height);
      imageData.data.set(rgba);
      tileCtx.putImageData(imageData, 0, 0);
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(
        tile,
        inst.mask.box[0] * scale,
        inst.mask.box[1] * scale,
        inst.mask.width * scale,
        inst.mask.height * scale,
      );
    }
  }

  for (const inst of visible) {
    const box = effectiveBox(inst, staged);
    const [r, g, b] = classColor(inst.class_id);
    const selected = inst.id === selectedId;
    ctx.lineWidth = selected ? 3 : 1.5;
    ctx.strokeStyle = `rgb(${r}, ${g}, ${b})`;
    ctx.strokeRect(
      box[0] * scale,
      box[1] * scale,
      (box[2] - box[0]) * scale,
      (box[3] - box[1]) * scale,
    );
    if (selected) {
      ctx.fillStyle = "#ffffff";
      for (const [cx, cy] of [
        [box[0], box[1]],
        [box[2], box[1]],
        [box[0], box[3]],
        [box[2], box[3]],
      ]) {
        ctx.fillRect((cx as number) * scale - 3, (cy as number) * scale - 3, 6, 6);
      }
    }
  }

  ctx.lineWidth = 2;
  for (const box of staged.addedBoxes) {
    ctx.strokeStyle = "#f5f578";
    ctx.setLineDash([5, 3]);
    ctx.strokeRect(
      box[0] * scale,
      box[1] * scale,
      (box[2] - box[0]) * scale,
      (box[3] - box[1]) * scale,
    );
    ctx.setLineDash([]);
  }
  for (const point of staged.addedPoints) {
    ctx.beginPath();
    ctx.arc(point.x * scale, point.y * scale, 5, 0, Math.PI * 2);
    ctx.fillStyle = point.polarity === "positive" ? "#44dd66" : "#ee5555";
    ctx.fill();
    ctx.strokeStyle = "#101010";
    ctx.stroke();
  }
  ctx.restore();
}
