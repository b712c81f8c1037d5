"""Run-length codec for binary masks.

Counts are column-major (down each column, then the next column) and
alternate background/foreground starting with background, so an
all-background mask of n pixels encodes as "n" and an all-foreground one
as "0 n". The string form is space-separated decimal counts.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def encode_counts(mask: np.ndarray) -> list[int]:
    """Encode a (height, width) boolean array into alternating run counts."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_counts(counts: list[int], width: int, height: int) -> np.ndarray:
    """Decode alternating run counts back into a (height, width) bool array."""
    if any(c < 0 for c in counts):
        raise FormatError("negative run count")
    total = sum(counts)
    if total != width * height:
        raise FormatError(
            f"run counts sum to {total}, expected {width}x{height}={width * height}"
        )
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


def encode_string(mask: np.ndarray) -> str:
    """Encode a boolean mask as a space-separated count string."""
    return " ".join(str(c) for c in encode_counts(mask))


def decode_string(counts: str, width: int, height: int) -> np.ndarray:
    """Decode a space-separated count string; inverse of :func:`encode_string`."""
    try:
        parsed = [int(tok) for tok in counts.split()]
    except ValueError as exc:
        raise FormatError(f"non-integer run count: {exc}") from exc
    if not parsed:
        raise FormatError("empty run-length string")
    return decode_counts(parsed, width, height)
