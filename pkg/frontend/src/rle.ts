/**
 * Column-major run-length mask codec, matching the backend exactly:
 * counts alternate background/foreground starting with background and
 * run down each column before moving to the next. The string form is
 * space-separated decimal counts.
 */

export interface CroppedRleMask {
  counts: string;
  box: [number, number, number, number]; // x0, y0, x1, y1 in image pixels
  width: number; // crop width  (x1 - x0)
  height: number; // crop height (y1 - y0)
}

export function parseCounts(counts: string): number[] {
  const parts = counts.trim().split(/\s+/).filter((t) => t.length > 0);
  if (parts.length === 0) {
    throw new Error("empty run-length string");
  }
  return parts.map((token) => {
    const value = Number(token);
    if (!Number.isInteger(value) || value < 0) {
      throw new Error(`bad run count ${JSON.stringify(token)}`);
    }
    return value;
  });
}

/** Decode counts into a row-major boolean array of (height, width). */
export function decodeCounts(
  counts: number[],
  width: number,
  height: number,
): Uint8Array {
  const total = counts.reduce((a, b) => a + b, 0);
  if (total !== width * height) {
    throw new Error(
      `run counts sum to ${total}, expected ${width}x${height}=${width * height}`,
    );
  }
  const out = new Uint8Array(width * height); // row-major
  let flat = 0; // column-major cursor
  let value = 0;
  for (const run of counts) {
    if (value === 1) {
      for (let k = 0; k < run; k++) {
        const pos = flat + k;
        const x = Math.floor(pos / height);
        const y = pos % height;
        out[y * width + x] = 1;
      }
    }
    flat += run;
    value = 1 - value;
  }
  return out;
}

export function decodeString(
  counts: string,
  width: number,
  height: number,
): Uint8Array {
  if (width === 0 || height === 0) {
    return new Uint8Array(0);
  }
  return decodeCounts(parseCounts(counts), width, height);
}

/** Encode a row-major boolean array back into the count string. */
export function encodeString(
  mask: Uint8Array | boolean[],
  width: number,
  height: number,
): string {
  const counts: number[] = [];
  let value = 0;
  let run = 0;
  for (let x = 0; x < width; x++) {
    for (let y = 0; y < height; y++) {
      const bit = mask[y * width + x] ? 1 : 0;
      if (bit === value) {
        run += 1;
      } else {
        counts.push(run);
        value = bit;
        run = 1;
      }
    }
  }
  counts.push(run);
  return counts.join(" ");
}

/**
 * Paint a cropped mask into an RGBA buffer the size of the crop.
 * Returns data suitable for `new ImageData(data, width, height)`.
 */
export function maskToRgba(
  mask: CroppedRleMask,
  color: [number, number, number],
  alpha = 110,
): Uint8ClampedArray {
  const bits = decodeString(mask.counts, mask.width, mask.height);
  const data = new Uint8ClampedArray(mask.width * mask.height * 4);
  for (let i = 0; i < bits.length; i++) {
    if (bits[i]) {
      data[i * 4] = color[0];
      data[i * 4 + 1] = color[1];
      data[i * 4 + 2] = color[2];
      data[i * 4 + 3] = alpha;
    }
  }
  return data;
}
