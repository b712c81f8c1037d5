/**
 * Review-session state: server snapshots, per-image staged corrections
 * with an undo stack, stale-iteration detection, and atomic submission.
 *
 * Corrections are staged locally and never touch the server until
 * `submitCorrections` posts them as one payload; undo restores the exact
 * prior staged state (snapshots are deep copies).
 */

import {
  ApiClient,
  ApiError,
  CorrectionPayload,
  Predictions,
  ReviewTask,
  StateSummary,
} from "./api.js";

export type Polarity = "positive" | "negative";
export type Box = [number, number, number, number];

export interface StagedCorrection {
  addedPoints: { x: number; y: number; polarity: Polarity }[];
  addedBoxes: Box[];
  deletedIds: string[];
  adjustedBoxes: Record<string, Box>;
}

export function emptyCorrection(): StagedCorrection {
  return { addedPoints: [], addedBoxes: [], deletedIds: [], adjustedBoxes: {} };
}

function clone(correction: StagedCorrection): StagedCorrection {
  return JSON.parse(JSON.stringify(correction)) as StagedCorrection;
}

export function isEmptyCorrection(c: StagedCorrection): boolean {
  return (
    c.addedPoints.length === 0 &&
    c.addedBoxes.length === 0 &&
    c.deletedIds.length === 0 &&
    Object.keys(c.adjustedBoxes).length === 0
  );
}

export function toPayload(c: StagedCorrection): CorrectionPayload {
  return {
    added_points: c.addedPoints.map((p) => ({ x: p.x, y: p.y, polarity: p.polarity })),
    added_boxes: c.addedBoxes.map((b) => [...b] as Box),
    deleted_ids: [...c.deletedIds],
    adjusted_boxes: Object.fromEntries(
      Object.entries(c.adjustedBoxes).map(([k, v]) => [k, [...v] as Box]),
    ),
  };
}

export class StaleStateError extends Error {
  constructor(
    public readonly stagedIteration: number,
    public readonly serverIteration: number,
  ) {
    super(
      `staged against iteration ${stagedIteration}, server is at ` +
        `${serverIteration}; refresh required`,
    );
  }
}

interface ImageSession {
  staged: StagedCorrection;
  undoStack: StagedCorrection[];
  loadedIteration: number | null;
}

export class ReviewStore {
  state: StateSummary | null = null;
  tasks: ReviewTask[] = [];
  predictions = new Map<string, Predictions>();
  lastError: string | null = null;

  private sessions = new Map<string, ImageSession>();
  private listeners: (() => void)[] = [];

  constructor(private readonly client: ApiClient) {}

  subscribe(listener: () => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  private session(imageId: string): ImageSession {
    let session = this.sessions.get(imageId);
    if (!session) {
      session = { staged: emptyCorrection(), undoStack: [], loadedIteration: null };
      this.sessions.set(imageId, session);
    }
    return session;
  }

  // -- server reads --------------------------------------------------------

  async refresh(): Promise<void> {
    this.state = await this.client.getState();
    this.tasks = await this.client.getReview();
    this.lastError = null;
    this.emit();
  }

  async loadPredictions(imageId: string): Promise<Predictions> {
    const predictions = await this.client.getPredictions(imageId);
    this.predictions.set(imageId, predictions);
    this.session(imageId).loadedIteration = predictions.iteration;
    this.emit();
    return predictions;
  }

  pendingTasks(): ReviewTask[] {
    return this.tasks.filter((t) => t.status === "pending");
  }

  // -- staging (local only) ------------------------------------------------

  staged(imageId: string): StagedCorrection {
    return this.session(imageId).staged;
  }

  private mutate(imageId: string, fn: (c: StagedCorrection) => void): void {
    const session = this.session(imageId);
    session.undoStack.push(clone(session.staged));
    fn(session.staged);
    this.emit();
  }

  addPoint(imageId: string, x: number, y: number, polarity: Polarity): void {
    this.mutate(imageId, (c) => c.addedPoints.push({ x, y, polarity }));
  }

  addBox(imageId: string, box: Box): void {
    this.mutate(imageId, (c) => c.addedBoxes.push([...box] as Box));
  }

  stageDeletion(imageId: string, predictionId: string): void {
    this.mutate(imageId, (c) => {
      if (!c.deletedIds.includes(predictionId)) {
        c.deletedIds.push(predictionId);
      }
      delete c.adjustedBoxes[predictionId];
    });
  }

  adjustBox(imageId: string, predictionId: string, box: Box): void {
    this.mutate(imageId, (c) => {
      c.adjustedBoxes[predictionId] = [...box] as Box;
    });
  }

  undo(imageId: string): boolean {
    const session = this.session(imageId);
    const previous = session.undoStack.pop();
    if (previous === undefined) {
      return false;
    }
    session.staged = previous;
    this.emit();
    return true;
  }

  clearStaged(imageId: string): void {
    const session = this.session(imageId);
    session.staged = emptyCorrection();
    session.undoStack = [];
    this.emit();
  }

  // -- server writes (the only mutating endpoints) --------------------------

  async submitCorrections(imageId: string): Promise<ReviewTask> {
    const session = this.session(imageId);
    const server = await this.client.getState();
    if (
      session.loadedIteration !== null &&
      server.iteration !== null &&
      server.iteration !== session.loadedIteration
    ) {
      throw new StaleStateError(session.loadedIteration, server.iteration);
    }
    const response = await this.client.postCorrections(
      imageId,
      toPayload(session.staged),
    );
    this.clearStaged(imageId);
    await this.refresh();
    await this.loadPredictions(imageId);
    return response.task;
  }

  canIterate(override = false): boolean {
    if (override) return true;
    return this.pendingTasks().length === 0;
  }

  async iterate(override = false): Promise<StateSummary> {
    if (!this.canIterate(override)) {
      throw new Error("pending review tasks; resolve them or override");
    }
    const summary = await this.client.postIterate();
    this.state = summary;
    this.predictions.clear();
    for (const session of this.sessions.values()) {
      session.loadedIteration = null;
    }
    this.tasks = await this.client.getReview();
    this.emit();
    return summary;
  }

  describeError(error: unknown): string {
    if (error instanceof StaleStateError) {
      return `Stale view: ${error.message}`;
    }
    if (error instanceof ApiError) {
      return `Server error ${error.status}: ${JSON.stringify(error.detail)}`;
    }
    return String(error);
  }
}
