"""Evaluation harness: RMSE, PSNR, SSIM on the 0-255 scale, Levenshtein
edit distance for externally produced OCR text, and dataset-level reports.
"""

from __future__ import annotations

import csv
import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import ShapeError

PSNR_CAP_DB = 100.0
_SSIM_C1 = (0.01 * 255.0) ** 2
_SSIM_C2 = (0.03 * 255.0) ** 2


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Root mean square error on the 0-255 scale."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"rmse shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((255.0 * a - 255.0 * b) ** 2)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """20*log10(255/rmse) in dB, capped at 100 for identical images."""
    r = rmse(a, b)
    if r == 0.0:
        return PSNR_CAP_DB
    return float(20.0 * np.log10(255.0 / r))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    h, w = x.shape
    s0, s1 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (h - k + 1, w - k + 1, k, k), (s0, s1, s0, s1))


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> float:
    k = win.shape[0]
    wa = _windows(a, k)
    wb = _windows(b, k)
    mu_a = np.tensordot(wa, win, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(wb, win, axes=([2, 3], [0, 1]))
    ea2 = np.tensordot(wa * wa, win, axes=([2, 3], [0, 1]))
    eb2 = np.tensordot(wb * wb, win, axes=([2, 3], [0, 1]))
    eab = np.tensordot(wa * wb, win, axes=([2, 3], [0, 1]))
    va = ea2 - mu_a ** 2
    vb = eb2 - mu_b ** 2
    cov = eab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (va + vb + _SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), 0-255 scale.

    Computed per channel over valid window positions only, then averaged
    across channels.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ShapeError("ssim needs images of at least 11x11")
    win = _gaussian_window()
    vals = [_ssim_channel(255.0 * a[:, :, c], 255.0 * b[:, :, c], win)
            for c in range(a.shape[2])]
    return float(np.mean(vals))


def levenshtein(s: str, t: str) -> int:
    """Minimum single-character insertions/deletions/substitutions."""
    if s == t:
        return 0
    if len(s) < len(t):
        s, t = t, s
    prev = list(range(len(t) + 1))
    for i, cs in enumerate(s, start=1):
        cur = [i] + [0] * len(t)
        for j, ct in enumerate(t, start=1):
            cur[j] = min(prev[j - 1] + (cs != ct), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def normalize_text(text: str) -> str:
    """Collapse whitespace runs to single spaces; strip ends."""
    return re.sub(r"\s+", " ", text).strip()


@dataclass
class MetricsRow:
    name: str
    rmse: float
    psnr: float
    ssim: float
    edit_distance: Optional[int] = None


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def mean(self, attr: str) -> Optional[float]:
        vals = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        if not vals:
            return None
        return float(np.mean([float(v) for v in vals]))

    def write_table(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["name", "rmse", "psnr", "ssim", "edit_distance"])
            for r in self.rows:
                wr.writerow([r.name, f"{r.rmse:.6f}", f"{r.psnr:.6f}",
                             f"{r.ssim:.6f}",
                             "" if r.edit_distance is None else r.edit_distance])

    def write_summary(self, path: str) -> None:
        payload = {
            "metadata": self.metadata,
            "means": {
                "rmse": self.mean("rmse"),
                "psnr": self.mean("psnr"),
                "ssim": self.mean("ssim"),
                "edit_distance": self.mean("edit_distance"),
            },
            "count": len(self.rows),
            "missing": self.missing,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_pairs(pairs: list, text_pairs: Optional[dict] = None,
                   metadata: Optional[dict] = None) -> MetricsReport:
    """Per-image metrics over (name, predicted, target) image triples.

    ``text_pairs`` maps name -> (predicted_text, target_text) for the OCR
    edit-distance column; OCR itself runs externally.
    """
    report = MetricsReport(metadata=dict(metadata or {}))
    report.metadata.setdefault("timestamp", time.strftime("%Y-%m-%dT%H:%M:%S"))
    for name, pred, tgt in pairs:
        row = MetricsRow(name=name, rmse=rmse(pred, tgt), psnr=psnr(pred, tgt),
                         ssim=ssim(pred, tgt))
        if text_pairs and name in text_pairs:
            pt, tt = text_pairs[name]
            row.edit_distance = levenshtein(normalize_text(pt), normalize_text(tt))
        report.rows.append(row)
    return report


def evaluate_dirs(pred_dir: str, gt_dir: str, pred_text_dir: Optional[str] = None,
                  gt_text_dir: Optional[str] = None,
                  metadata: Optional[dict] = None, jobs: int = 1) -> MetricsReport:
    """Stem-aligned directory evaluation; missing stems are reported, not fatal."""
    from concurrent.futures import ThreadPoolExecutor

    from .dataio import load_image

    def stems(d, exts):
        if not d or not os.path.isdir(d):
            return {}
        return {os.path.splitext(f)[0]: os.path.join(d, f)
                for f in sorted(os.listdir(d))
                if os.path.splitext(f)[1].lower() in exts}

    preds = stems(pred_dir, {".png"})
    gts = stems(gt_dir, {".png"})
    common = sorted(set(preds) & set(gts))
    missing = sorted(set(preds) ^ set(gts))

    ptexts = stems(pred_text_dir, {".txt"})
    gtexts = stems(gt_text_dir, {".txt"})
    text_pairs = {}
    for stem in common:
        if stem in ptexts and stem in gtexts:
            with open(ptexts[stem], encoding="utf-8") as fh:
                pt = fh.read()
            with open(gtexts[stem], encoding="utf-8") as fh:
                tt = fh.read()
            text_pairs[stem] = (pt, tt)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            loaded = list(ex.map(lambda s: (s, load_image(preds[s]), load_image(gts[s])),
                                 common))
    else:
        loaded = [(s, load_image(preds[s]), load_image(gts[s])) for s in common]
    report = evaluate_pairs(loaded, text_pairs or None, metadata)
    report.missing = missing
    return report
