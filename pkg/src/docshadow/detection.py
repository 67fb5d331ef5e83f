"""Shadow mask provenance: file ingestion and a global-threshold detector.

The detector is a classical Otsu split on luminance: documents are light
pages with dark shadows, so the dark class is taken as shadow. Dark-paper
inputs invert this assumption and are a known failure mode.
"""

from __future__ import annotations

import numpy as np

from .dataio import DataError, load_image


def load_mask(path: str, expected_size: tuple) -> np.ndarray:
    """Load a grayscale PNG as a soft mask and validate its size."""
    mask = load_image(path)[:, :, 0]
    if mask.shape != tuple(expected_size):
        raise DataError(
            f"mask {path} has size {mask.shape}, expected {tuple(expected_size)}")
    return mask


def luminance(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]


def otsu_threshold(bins: np.ndarray) -> int:
    """Cut point t maximizing between-class variance on a 256-bin histogram.

    Classes are {<= t} and {> t}; returns -1 when the histogram is
    single-valued (no valid split).
    """
    hist = np.bincount(bins.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    m = np.cumsum(hist * np.arange(256))
    mt = m[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return -1
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m / w0
        mu1 = (mt - m) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~valid] = -1.0
    return int(np.argmax(between))


def otsu_detect(img: np.ndarray) -> np.ndarray:
    """Binary shadow mask: 1 where luminance falls below the Otsu split.

    A constant image has no split and yields the all-zeros mask.
    """
    y = luminance(img)
    bins = np.clip(np.floor(y * 255.0 + 0.5), 0, 255).astype(np.int64)
    t = otsu_threshold(bins)
    if t < 0:
        return np.zeros(y.shape, dtype=np.float64)
    return (bins <= t).astype(np.float64)
