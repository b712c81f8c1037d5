import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient, FetchLike } from "../src/api.js";
import {
  ReviewStore,
  StaleStateError,
  emptyCorrection,
  isEmptyCorrection,
  toPayload,
} from "../src/store.js";

/** In-memory fake of the review service that records every request. */
function fakeServer() {
  const log: { method: string; url: string; body?: unknown }[] = [];
  let iteration = 1;
  const state = () => ({
    iteration,
    images: 2,
    statuses: { seed: 1, review: 1 },
    converged_fraction: 0,
    epsilon: 0.005,
    fine_confidence: 0.5,
    mean_delta: null,
    delta_histogram: { edges: [], counts: [] },
    pending_reviews: 1,
    history: [],
  });
  const tasks = [
    {
      id: "img_a:missed_detection:1",
      image_id: "img_a",
      kind: "missed_detection",
      status: "pending",
      created_iteration: 1,
      proposed_boxes: [],
      resolution: null,
    },
  ];
  const fetchFn: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const body = init?.body ? JSON.parse(init.body) : undefined;
    log.push({ method, url, body });
    const respond = (status: number, payload: unknown) => ({
      ok: status < 400,
      status,
      json: async () => payload,
    });
    if (method === "GET" && url === "/api/state") return respond(200, state());
    if (method === "GET" && url.startsWith("/api/review")) return respond(200, tasks);
    if (method === "GET" && url.endsWith("/predictions")) {
      return respond(200, {
        image: { id: "img_a", width: 8, height: 8 },
        iteration,
        status: "review",
        delta: null,
        epsilon: 0.005,
        converged: false,
        instances: [
          {
            id: "img_a#0",
            class_id: 0,
            confidence: 0.9,
            box: [1, 1, 5, 5],
            mask: { counts: "64", box: [0, 0, 0, 0], width: 8, height: 8 },
          },
        ],
      });
    }
    if (method === "POST" && url.endsWith("/corrections")) {
      tasks[0]!.status = "accepted";
      return respond(200, { task: tasks[0], applied: true });
    }
    if (method === "POST" && url === "/api/iterate") {
      iteration += 1;
      tasks.length = 0;
      return respond(200, { ...state(), status: "continue" });
    }
    return respond(404, { detail: `unknown ${method} ${url}` });
  };
  return {
    log,
    fetchFn,
    bumpIteration: () => {
      iteration += 1;
    },
  };
}

describe("staging and undo", () => {
  let store: ReviewStore;

  beforeEach(() => {
    store = new ReviewStore(new ApiClient("", fakeServer().fetchFn));
  });

  it("stages points, boxes, deletions, and adjustments", () => {
    store.addPoint("img_a", 3, 4, "positive");
    store.addBox("img_a", [1, 2, 5, 6]);
    store.stageDeletion("img_a", "img_a#0");
    store.adjustBox("img_a", "img_a#1", [2, 2, 4, 4]);
    const payload = toPayload(store.staged("img_a"));
    expect(payload).toEqual({
      added_points: [{ x: 3, y: 4, polarity: "positive" }],
      added_boxes: [[1, 2, 5, 6]],
      deleted_ids: ["img_a#0"],
      adjusted_boxes: { "img_a#1": [2, 2, 4, 4] },
    });
  });

  it("undo restores the exact prior staged state", () => {
    store.addPoint("img_a", 1, 1, "positive");
    const snapshotAfterFirst = JSON.stringify(store.staged("img_a"));
    store.addPoint("img_a", 2, 2, "negative");
    store.stageDeletion("img_a", "img_a#0");
    expect(store.undo("img_a")).toBe(true);
    expect(store.staged("img_a").deletedIds).toEqual([]);
    expect(store.undo("img_a")).toBe(true);
    expect(JSON.stringify(store.staged("img_a"))).toBe(snapshotAfterFirst);
    expect(store.undo("img_a")).toBe(true);
    expect(isEmptyCorrection(store.staged("img_a"))).toBe(true);
    expect(store.undo("img_a")).toBe(false);
  });

  it("undo after staging a deletion makes the prediction visible again", () => {
    store.stageDeletion("img_a", "img_a#0");
    expect(store.staged("img_a").deletedIds).toContain("img_a#0");
    store.undo("img_a");
    expect(store.staged("img_a").deletedIds).toEqual([]);
    expect(toPayload(store.staged("img_a"))).toEqual(toPayload(emptyCorrection()));
  });

  it("staging is per image", () => {
    store.addPoint("img_a", 1, 1, "positive");
    expect(isEmptyCorrection(store.staged("img_b"))).toBe(true);
  });
});

describe("server interaction", () => {
  it("only talks to documented endpoints", async () => {
    const server = fakeServer();
    const store = new ReviewStore(new ApiClient("", server.fetchFn));
    await store.refresh();
    await store.loadPredictions("img_a");
    store.addPoint("img_a", 3, 3, "positive");
    await store.submitCorrections("img_a");
    await store.iterate(true);

    const documented = [
      /^GET \/api\/state$/,
      /^GET \/api\/review(\?status=[a-z]+)?$/,
      /^GET \/api\/images\/[^/]+\/predictions$/,
      /^GET \/api\/images\/[^/]+$/,
      /^POST \/api\/images\/[^/]+\/corrections$/,
      /^POST \/api\/iterate$/,
      /^GET \/api\/progress$/,
    ];
    for (const entry of server.log) {
      const line = `${entry.method} ${entry.url}`;
      expect(
        documented.some((pattern) => pattern.test(line)),
        `undocumented request: ${line}`,
      ).toBe(true);
    }
    // the only mutations are corrections and iterate
    const writes = server.log.filter((e) => e.method !== "GET");
    expect(writes.map((w) => w.url)).toEqual([
      "/api/images/img_a/corrections",
      "/api/iterate",
    ]);
  });

  it("detects a stale iteration before submitting", async () => {
    const server = fakeServer();
    const store = new ReviewStore(new ApiClient("", server.fetchFn));
    await store.refresh();
    await store.loadPredictions("img_a");
    store.addPoint("img_a", 3, 3, "positive");
    server.bumpIteration();
    await expect(store.submitCorrections("img_a")).rejects.toThrow(StaleStateError);
    // staged state survives so the user can refresh and resubmit
    expect(store.staged("img_a").addedPoints).toHaveLength(1);
  });

  it("gates iteration on pending tasks unless overridden", async () => {
    const server = fakeServer();
    const store = new ReviewStore(new ApiClient("", server.fetchFn));
    await store.refresh();
    expect(store.canIterate()).toBe(false);
    await expect(store.iterate(false)).rejects.toThrow(/pending review/);
    const summary = await store.iterate(true);
    expect(summary.iteration).toBe(2);
    expect(store.canIterate()).toBe(true);
  });

  it("surfaces api errors with status and detail", async () => {
    const failing: FetchLike = async () => ({
      ok: false,
      status: 409,
      json: async () => ({ detail: "iteration already running" }),
    });
    const store = new ReviewStore(new ApiClient("", failing));
    await expect(store.refresh()).rejects.toMatchObject({ status: 409 });
  });
});
