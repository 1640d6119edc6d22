"""Deterministic classical-CV backend.

Stands in for the learned models wherever weights are unavailable (CI,
offline contract tests): Otsu thresholding plus connected components for
detection, per-box Otsu for segmentation. Pure array arithmetic, so
identical requests always produce identical responses.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

DETECTOR_VERSION = "classical-otsu-0.1"
SEGMENTER_VERSION = "classical-boxfill-0.1"

MIN_BLOB_AREA = 4


def to_gray(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, uint8."""
    rgb = image.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> int:
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    omega = np.cumsum(hist) / total
    mu = np.cumsum(hist * np.arange(256)) / total
    mu_total = mu[-1]
    denom = omega * (1.0 - omega)
    variance = np.where(denom > 0, (mu_total * omega - mu) ** 2 / np.where(denom > 0, denom, 1.0), -1.0)
    return int(np.argmax(variance))


def box_slices(box, width: int, height: int):
    """Pixel-center rasterization of a box: pixel j is in iff x1 <= j+0.5 < x2."""
    x1, y1, x2, y2 = box
    j0 = max(0, int(np.ceil(x1 - 0.5)))
    j1 = min(width, int(np.ceil(x2 - 0.5)))
    i0 = max(0, int(np.ceil(y1 - 0.5)))
    i1 = min(height, int(np.ceil(y2 - 0.5)))
    return slice(i0, i1), slice(j0, j1)


class ClassicalBackend:
    """Threshold + connected components; no weights, no randomness."""

    detector_version = DETECTOR_VERSION
    segmenter_version = SEGMENTER_VERSION

    def detect(
        self,
        image: np.ndarray,
        prompt: str,
        box_threshold: float,
        text_threshold: float,
    ) -> list[dict]:
        # text_threshold has no classical analogue; accepted for contract parity
        gray = to_gray(image)
        if int(gray.max()) == int(gray.min()):
            return []
        dark = gray <= otsu_threshold(gray)
        foreground = dark if dark.sum() <= dark.size / 2 else ~dark
        labels, count = ndimage.label(foreground)
        detections = []
        for index in range(1, count + 1):
            ys, xs = np.nonzero(labels == index)
            if ys.size < MIN_BLOB_AREA:
                continue
            x1, x2 = float(xs.min()), float(xs.max() + 1)
            y1, y2 = float(ys.min()), float(ys.max() + 1)
            fill = ys.size / ((x2 - x1) * (y2 - y1))
            score = round(float(np.clip(fill, 0.01, 0.99)), 6)
            if score < box_threshold:
                continue
            detections.append(
                {"box": [x1, y1, x2, y2], "score": score, "phrase": prompt}
            )
        detections.sort(key=lambda d: (-d["score"], d["box"][0], d["box"][1]))
        return detections

    def segment(self, image: np.ndarray, boxes) -> list[np.ndarray]:
        gray = to_gray(image)
        height, width = gray.shape
        masks = []
        for box in boxes:
            rows, cols = box_slices(box, width, height)
            crop = gray[rows, cols]
            mask = np.zeros((height, width), dtype=bool)
            mask[rows, cols] = self._crop_foreground(crop)
            masks.append(mask)
        return masks

    @staticmethod
    def _crop_foreground(crop: np.ndarray) -> np.ndarray:
        if crop.size == 0:
            return np.zeros_like(crop, dtype=bool)
        if int(crop.max()) == int(crop.min()):
            return np.ones_like(crop, dtype=bool)  # uniform crop: whole box
        low = crop <= otsu_threshold(crop)
        if low.all() or not low.any():
            return np.ones_like(crop, dtype=bool)
        # the object differs from the surround, so keep whichever side
        # of the threshold sits farther from the crop's border intensity
        border = np.concatenate([crop[0, :], crop[-1, :], crop[:, 0], crop[:, -1]])
        border_mean = border.astype(np.float64).mean()
        low_mean = crop[low].astype(np.float64).mean()
        high_mean = crop[~low].astype(np.float64).mean()
        if abs(low_mean - border_mean) >= abs(high_mean - border_mean):
            return low
        return ~low
