"""Row-major uncompressed RLE, the mask format of the wire contract.

Counts alternate background/foreground in row-major scan order and the
first count is always background (possibly zero), so decoders never need
a polarity bit.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> dict:
    """Encode a 2D boolean array as {"size": [h, w], "counts": [...]}."""
    arr = np.asarray(mask, dtype=bool)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {arr.shape}")
    flat = arr.ravel(order="C")
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {
        "size": [int(arr.shape[0]), int(arr.shape[1])],
        "counts": [int(c) for c in counts],
        "order": "row-major",
    }


def decode(payload: dict) -> np.ndarray:
    """Decode the wire format back to a 2D boolean array."""
    height, width = (int(v) for v in payload["size"])
    counts = np.asarray(payload["counts"], dtype=np.int64)
    if counts.sum() != height * width:
        raise ValueError(
            f"counts sum to {int(counts.sum())}, expected {height * width}"
        )
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)
