/**
 * Typed client for the review service. Every server interaction in the
 * UI goes through this module, so tests can record requests by injecting
 * a fetch function and assert nothing else is ever called.
 */

import type { CroppedRleMask } from "./rle.js";

export interface StateSummary {
  iteration: number | null;
  images: number;
  statuses: Record<string, number>;
  converged_fraction: number;
  epsilon: number;
  fine_confidence: number;
  mean_delta: number | null;
  delta_histogram: { edges: number[]; counts: number[] };
  pending_reviews: number;
  history: {
    iteration: number;
    converged_fraction: number;
    mean_delta: number | null;
  }[];
  status?: string;
}

export interface ReviewTask {
  id: string;
  image_id: string;
  kind: "missed_detection" | "false_positive";
  status: "pending" | "corrected" | "accepted";
  created_iteration: number;
  proposed_boxes: Record<string, number>[];
  resolution: string | null;
}

export interface PredictedInstance {
  id: string;
  class_id: number;
  confidence: number | null;
  box: [number, number, number, number];
  mask: CroppedRleMask;
}

export interface Predictions {
  image: { id: string; width: number; height: number };
  iteration: number | null;
  status: string | null;
  delta: number | null;
  epsilon: number | null;
  converged: boolean;
  instances: PredictedInstance[];
}

export interface CorrectionPayload {
  added_points: { x: number; y: number; polarity: "positive" | "negative" }[];
  added_boxes: [number, number, number, number][];
  deleted_ids: string[];
  adjusted_boxes: Record<string, [number, number, number, number]>;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: unknown,
  ) {
    super(`HTTP ${status}: ${typeof detail === "string" ? detail : JSON.stringify(detail)}`);
  }
}

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: Parameters<FetchLike>[1]): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    let body: unknown = null;
    try {
      body = await response.json();
    } catch {
      body = null;
    }
    if (!response.ok) {
      const detail =
        body && typeof body === "object" && "detail" in (body as Record<string, unknown>)
          ? (body as Record<string, unknown>)["detail"]
          : body;
      throw new ApiError(response.status, detail);
    }
    return body as T;
  }

  getState(): Promise<StateSummary> {
    return this.request<StateSummary>("/api/state");
  }

  getProgress(): Promise<{ running: boolean; iteration: number | null }> {
    return this.request("/api/progress");
  }

  getReview(status?: string): Promise<ReviewTask[]> {
    const query = status ? `?status=${encodeURIComponent(status)}` : "";
    return this.request<ReviewTask[]>(`/api/review${query}`);
  }

  getPredictions(imageId: string): Promise<Predictions> {
    return this.request<Predictions>(`/api/images/${encodeURIComponent(imageId)}/predictions`);
  }

  imageUrl(imageId: string): string {
    return `${this.baseUrl}/api/images/${encodeURIComponent(imageId)}`;
  }

  postCorrections(
    imageId: string,
    payload: CorrectionPayload,
  ): Promise<{ task: ReviewTask; applied: boolean }> {
    return this.request(`/api/images/${encodeURIComponent(imageId)}/corrections`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  postIterate(): Promise<StateSummary> {
    return this.request<StateSummary>("/api/iterate", { method: "POST" });
  }
}
