/**
 * Review UI entry point: task queue + dashboard on the left, the canvas
 * editor for the selected image on the right.
 *
 * Keyboard: p/n set point polarity, b arms box drawing, arrows nudge the
 * selected box, Delete stages a deletion, u or Ctrl+Z undoes the last
 * staged edit, Escape clears the selection.
 */

import { ApiClient } from "./api.js";
import {
  applyHandleDrag,
  clampBox,
  effectiveBox,
  hitTestHandle,
  hitTestInstances,
  normalizeBox,
  renderOverlay,
  visibleInstances,
} from "./canvas.js";
import type { Handle } from "./canvas.js";
import { ReviewStore, StaleStateError, isEmptyCorrection } from "./store.js";
import type { Box, Polarity } from "./store.js";

const client = new ApiClient("");
const store = new ReviewStore(client);

interface EditorState {
  imageId: string | null;
  selectedId: string | null;
  polarity: Polarity;
  tool: "point" | "box";
  scale: number;
  drag:
    | { kind: "handle"; id: string; handle: Handle; last: [number, number] }
    | { kind: "draw"; start: [number, number]; current: [number, number] }
    | null;
  imageEl: HTMLImageElement | null;
  taskFilter: string;
}

const editor: EditorState = {
  imageId: null,
  selectedId: null,
  polarity: "positive",
  tool: "point",
  scale: 4,
  drag: null,
  imageEl: null,
  taskFilter: "pending",
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setStatus(message: string, isError = false, retry?: () => void): void {
  const bar = el<HTMLDivElement>("status-bar");
  bar.textContent = message;
  bar.className = isError ? "status error" : "status";
  const button = el<HTMLButtonElement>("retry-button");
  if (retry) {
    button.hidden = false;
    button.onclick = () => {
      button.hidden = true;
      retry();
    };
  } else {
    button.hidden = true;
  }
}

async function guard(label: string, action: () => Promise<void>): Promise<void> {
  try {
    await action();
    setStatus(label);
  } catch (error) {
    if (error instanceof StaleStateError) {
      setStatus(
        `${store.describeError(error)} — press Refresh to reload the latest iteration`,
        true,
        () => void guard("refreshed", refreshAll),
      );
      return;
    }
    setStatus(store.describeError(error), true, () => void guard(label, action));
  }
}

// -- dashboard ---------------------------------------------------------------

function renderDashboard(): void {
  const state = store.state;
  const dash = el<HTMLDivElement>("dashboard");
  if (!state) {
    dash.textContent = "loading…";
    return;
  }
  const statuses = Object.entries(state.statuses)
    .map(([k, v]) => `${k} ${v}`)
    .join(" · ");
  const historyRows = state.history
    .map((h) => {
      const pct = Math.round(h.converged_fraction * 100);
      return (
        `<div class="hist-row"><span>t=${h.iteration}</span>` +
        `<div class="bar"><div class="fill" style="width:${pct}%"></div></div>` +
        `<span>${pct}%</span></div>`
      );
    })
    .join("");
  const deltaBins = state.delta_histogram.counts;
  const maxBin = Math.max(1, ...deltaBins);
  const deltaRows = deltaBins
    .map((count, i) => {
      const h = Math.round((count / maxBin) * 36);
      const edge = state.delta_histogram.edges[i + 1];
      return `<div class="vbar" title="≤${edge?.toExponential(1)}: ${count}" style="height:${h}px"></div>`;
    })
    .join("");
  dash.innerHTML =
    `<div><b>iteration ${state.iteration}</b> — ${state.images} images` +
    ` — pending reviews: ${state.pending_reviews}</div>` +
    `<div class="muted">${statuses}</div>` +
    `<div class="section">convergence by iteration</div>${historyRows}` +
    `<div class="section">delta histogram (ε=${state.epsilon})</div>` +
    `<div class="delta-hist">${deltaRows}</div>`;
}

// -- task list ----------------------------------------------------------------

function renderTasks(): void {
  const list = el<HTMLDivElement>("task-list");
  const filter = editor.taskFilter;
  const tasks = store.tasks.filter((t) => filter === "all" || t.status === filter);
  if (tasks.length === 0) {
    list.innerHTML = `<div class="muted">no ${filter} tasks</div>`;
    return;
  }
  list.innerHTML = tasks
    .map(
      (t) =>
        `<button class="task ${t.image_id === editor.imageId ? "active" : ""}"` +
        ` data-image="${t.image_id}">` +
        `<span class="kind ${t.kind}">${t.kind.replace("_", " ")}</span>` +
        ` ${t.image_id} <span class="muted">(${t.status})</span></button>`,
    )
    .join("");
  for (const button of Array.from(list.querySelectorAll<HTMLButtonElement>(".task"))) {
    button.onclick = () => void openImage(button.dataset["image"] ?? "");
  }
}

// -- editor --------------------------------------------------------------------

async function openImage(imageId: string): Promise<void> {
  await guard(`opened ${imageId}`, async () => {
    const predictions = await store.loadPredictions(imageId);
    editor.imageId = imageId;
    editor.selectedId = null;
    const canvas = el<HTMLCanvasElement>("editor-canvas");
    canvas.width = predictions.image.width * editor.scale;
    canvas.height = predictions.image.height * editor.scale;
    editor.imageEl = new Image();
    editor.imageEl.onload = renderEditor;
    editor.imageEl.src = client.imageUrl(imageId);
    renderEditor();
  });
}

function renderEditor(): void {
  const canvas = el<HTMLCanvasElement>("editor-canvas");
  const ctx = canvas.getContext("2d");
  const imageId = editor.imageId;
  const meta = el<HTMLDivElement>("editor-meta");
  if (!ctx || !imageId) {
    meta.textContent = "select a task to start reviewing";
    return;
  }
  const predictions = store.predictions.get(imageId);
  if (!predictions) return;
  const staged = store.staged(imageId);
  renderOverlay(
    ctx,
    editor.imageEl && editor.imageEl.complete ? editor.imageEl : null,
    predictions.image.width,
    predictions.image.height,
    predictions.instances,
    staged,
    { scale: editor.scale, selectedId: editor.selectedId, showMasks: true },
  );
  if (editor.drag?.kind === "draw") {
    const [sx, sy] = editor.drag.start;
    const [cx, cy] = editor.drag.current;
    ctx.setLineDash([4, 3]);
    ctx.strokeStyle = "#f5f578";
    ctx.strokeRect(
      Math.min(sx, cx) * editor.scale,
      Math.min(sy, cy) * editor.scale,
      Math.abs(cx - sx) * editor.scale,
      Math.abs(cy - sy) * editor.scale,
    );
    ctx.setLineDash([]);
  }
  const deltaText =
    predictions.delta === null ? "—" : predictions.delta.toExponential(2);
  meta.innerHTML =
    `<b>${imageId}</b> — status ${predictions.status} — delta ${deltaText}` +
    ` — tool <b>${editor.tool}</b> (${editor.polarity})` +
    (isEmptyCorrection(staged) ? "" : " — <b>staged edits pending</b>");
}

function canvasPoint(event: MouseEvent): [number, number] {
  const canvas = el<HTMLCanvasElement>("editor-canvas");
  const rect = canvas.getBoundingClientRect();
  return [
    (event.clientX - rect.left) / editor.scale,
    (event.clientY - rect.top) / editor.scale,
  ];
}

function wireCanvas(): void {
  const canvas = el<HTMLCanvasElement>("editor-canvas");
  canvas.addEventListener("mousedown", (event) => {
    const imageId = editor.imageId;
    if (!imageId) return;
    const predictions = store.predictions.get(imageId);
    if (!predictions) return;
    const [x, y] = canvasPoint(event);
    const staged = store.staged(imageId);
    if (editor.selectedId) {
      const inst = predictions.instances.find((i) => i.id === editor.selectedId);
      if (inst) {
        const handle = hitTestHandle(effectiveBox(inst, staged), x, y, 2.5);
        if (handle) {
          editor.drag = { kind: "handle", id: inst.id, handle, last: [x, y] };
          return;
        }
      }
    }
    if (editor.tool === "box") {
      editor.drag = { kind: "draw", start: [x, y], current: [x, y] };
      return;
    }
    const visible = visibleInstances(predictions.instances, staged).map((i) => ({
      id: i.id,
      box: effectiveBox(i, staged),
    }));
    const hit = hitTestInstances(visible, x, y);
    if (hit && hit !== editor.selectedId) {
      editor.selectedId = hit;
    } else {
      store.addPoint(imageId, x, y, editor.polarity);
    }
    renderEditor();
  });
  canvas.addEventListener("mousemove", (event) => {
    const imageId = editor.imageId;
    const drag = editor.drag;
    if (!imageId || !drag) return;
    const [x, y] = canvasPoint(event);
    if (drag.kind === "handle") {
      const predictions = store.predictions.get(imageId);
      const inst = predictions?.instances.find((i) => i.id === drag.id);
      if (inst && predictions) {
        const staged = store.staged(imageId);
        const current = effectiveBox(inst, staged);
        const [lx, ly] = drag.last;
        const next = applyHandleDrag(current, drag.handle, x - lx, y - ly);
        // mutate without growing the undo stack per mouse move
        staged.adjustedBoxes[inst.id] = clampBox(
          next,
          predictions.image.width,
          predictions.image.height,
        );
        drag.last = [x, y];
      }
    } else {
      drag.current = [x, y];
    }
    renderEditor();
  });
  canvas.addEventListener("mouseup", () => {
    const imageId = editor.imageId;
    if (!imageId || !editor.drag) return;
    if (editor.drag.kind === "handle") {
      // commit the final box as one undoable step
      const staged = store.staged(imageId);
      const box = staged.adjustedBoxes[editor.drag.id];
      if (box) {
        delete staged.adjustedBoxes[editor.drag.id];
        store.adjustBox(imageId, editor.drag.id, box);
      }
    } else if (editor.drag.kind === "draw") {
      const predictions = store.predictions.get(imageId);
      const [sx, sy] = editor.drag.start;
      const [cx, cy] = editor.drag.current;
      const box = normalizeBox([sx, sy, cx, cy] as Box);
      if (predictions && box[2] - box[0] >= 2 && box[3] - box[1] >= 2) {
        store.addBox(
          imageId,
          clampBox(box, predictions.image.width, predictions.image.height),
        );
      }
      editor.tool = "point";
    }
    editor.drag = null;
    renderEditor();
  });
}

function wireKeyboard(): void {
  document.addEventListener("keydown", (event) => {
    const imageId = editor.imageId;
    if (event.key === "p") editor.polarity = "positive";
    else if (event.key === "n") editor.polarity = "negative";
    else if (event.key === "b") editor.tool = "box";
    else if (event.key === "Escape") {
      editor.selectedId = null;
      editor.tool = "point";
    } else if (imageId && (event.key === "u" || (event.ctrlKey && event.key === "z"))) {
      store.undo(imageId);
    } else if (imageId && event.key === "Delete" && editor.selectedId) {
      store.stageDeletion(imageId, editor.selectedId);
      editor.selectedId = null;
    } else if (imageId && editor.selectedId && event.key.startsWith("Arrow")) {
      const predictions = store.predictions.get(imageId);
      const inst = predictions?.instances.find((i) => i.id === editor.selectedId);
      if (inst && predictions) {
        const step = event.shiftKey ? 5 : 1;
        const dx = event.key === "ArrowLeft" ? -step : event.key === "ArrowRight" ? step : 0;
        const dy = event.key === "ArrowUp" ? -step : event.key === "ArrowDown" ? step : 0;
        const current = effectiveBox(inst, store.staged(imageId));
        store.adjustBox(
          imageId,
          inst.id,
          clampBox(
            [current[0] + dx, current[1] + dy, current[2] + dx, current[3] + dy],
            predictions.image.width,
            predictions.image.height,
          ),
        );
      }
      event.preventDefault();
    } else {
      return;
    }
    renderEditor();
  });
}

// -- top-level actions ---------------------------------------------------------

async function refreshAll(): Promise<void> {
  await store.refresh();
  if (editor.imageId) {
    await store.loadPredictions(editor.imageId);
  }
}

function wireControls(): void {
  el<HTMLButtonElement>("refresh-button").onclick = () =>
    void guard("refreshed", refreshAll);
  el<HTMLButtonElement>("undo-button").onclick = () => {
    if (editor.imageId) store.undo(editor.imageId);
  };
  el<HTMLButtonElement>("submit-button").onclick = () => {
    const imageId = editor.imageId;
    if (!imageId) return;
    void guard("correction submitted", async () => {
      await store.submitCorrections(imageId);
    });
  };
  el<HTMLButtonElement>("iterate-button").onclick = () => {
    const override = el<HTMLInputElement>("override-checkbox").checked;
    void guard("iteration finished", async () => {
      await store.iterate(override);
      if (editor.imageId) await store.loadPredictions(editor.imageId);
    });
  };
  el<HTMLSelectElement>("task-filter").onchange = (event) => {
    editor.taskFilter = (event.target as HTMLSelectElement).value;
    renderTasks();
  };
}

function renderAll(): void {
  renderDashboard();
  renderTasks();
  renderEditor();
  const iterate = el<HTMLButtonElement>("iterate-button");
  const override = el<HTMLInputElement>("override-checkbox").checked;
  iterate.disabled = !store.canIterate(override);
}

export function start(): void {
  wireCanvas();
  wireKeyboard();
  wireControls();
  el<HTMLInputElement>("override-checkbox").onchange = renderAll;
  store.subscribe(renderAll);
  void guard("loaded", refreshAll);
}

if (typeof document !== "undefined" && document.getElementById("editor-canvas")) {
  start();
}
