import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";

import { describe, expect, it } from "vitest";

import { decodeString, encodeString, maskToRgba } from "../src/rle.js";

interface Fixture {
  name: string;
  width: number;
  height: number;
  counts: string;
  foreground: [number, number][];
}

const corpusPath = join(
  dirname(fileURLToPath(import.meta.url)),
  "..",
  "..",
  "tests",
  "data",
  "rle_fixtures.json",
);
const corpus: { fixtures: Fixture[] } = JSON.parse(readFileSync(corpusPath, "utf-8"));

describe("rle decoding against the shared fixture corpus", () => {
  it("has a meaningful corpus", () => {
    expect(corpus.fixtures.length).toBeGreaterThanOrEqual(10);
  });

  for (const fixture of corpus.fixtures) {
    it(`decodes ${fixture.name} identically to the primary codec`, () => {
      const bits = decodeString(fixture.counts, fixture.width, fixture.height);
      const expected = new Uint8Array(fixture.width * fixture.height);
      for (const [x, y] of fixture.foreground) {
        expected[y * fixture.width + x] = 1;
      }
      expect(Array.from(bits)).toEqual(Array.from(expected));
    });

    it(`re-encodes ${fixture.name} to the identical count string`, () => {
      const bits = decodeString(fixture.counts, fixture.width, fixture.height);
      expect(encodeString(bits, fixture.width, fixture.height)).toBe(fixture.counts);
    });
  }
});

describe("rle error handling", () => {
  it("rejects counts that do not cover the mask", () => {
    expect(() => decodeString("3 2", 2, 2)).toThrow(/sum/);
  });

  it("rejects non-integer counts", () => {
    expect(() => decodeString("1 x 3", 2, 2)).toThrow(/bad run count/);
  });
});

describe("mask rgba painting", () => {
  it("fills only foreground pixels", () => {
    const mask = {
      counts: "0 2 2", // column-major: (0,0),(0,1) fg
      box: [4, 6, 6, 8] as [number, number, number, number],
      width: 2,
      height: 2,
    };
    const rgba = maskToRgba(mask, [10, 20, 30], 99);
    // row-major pixel 0 = (0,0) fg, pixel 1 = (1,0) bg
    expect(Array.from(rgba.slice(0, 4))).toEqual([10, 20, 30, 99]);
    expect(Array.from(rgba.slice(4, 8))).toEqual([0, 0, 0, 0]);
  });
});
