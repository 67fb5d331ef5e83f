"""Training losses: area-normalized masked L1 over both stages, a frozen
multi-level feature (perception) loss on the final stage, and their
weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor, ShapeError
from .refiner import Backbone, feature_levels


@dataclass
class LossConfig:
    lambda_pixel: float = 1.0
    lambda_phi: float = 0.1
    level_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)  # per feature level
    n_stages: int = 2

    def validate(self) -> None:
        if self.n_stages != 2:
            raise ShapeError("exactly two supervised stages are expected")
        if self.lambda_pixel < 0 or self.lambda_phi < 0 or \
                any(w < 0 for w in self.level_weights):
            raise ShapeError("loss weights must be non-negative")


def relative_l1(outputs: list, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-region L1 normalized by region area, summed over both stages.

    For each stage output I: |M*(I - target)|1 / sum(M) plus the same over
    the complement M' = 1 - M. A term with zero denominator is dropped.
    The 1-norm sums over pixels and channels; sum(M) sums mask values over
    pixels.
    """
    if len(outputs) != 2:
        raise ShapeError("relative_l1 expects the two stage outputs")
    dt = outputs[0].dtype
    tgt = Tensor(target.astype(dt))
    m3 = Tensor(np.repeat(mask[:, :, None], 3, axis=2).astype(dt))
    mc3 = Tensor(np.repeat((1.0 - mask)[:, :, None], 3, axis=2).astype(dt))
    sum_m = float(mask.sum())
    sum_mc = float((1.0 - mask).sum())
    total = Tensor(np.zeros((), dtype=dt))
    for out in outputs:
        if out.shape != tgt.shape:
            raise ShapeError("stage output/target shape mismatch")
        diff = nm.add(out, nm.mul(tgt, -1.0))
        if sum_m > 0:
            total = nm.add(total, nm.mul(nm.tsum(nm.tabs(nm.mul(m3, diff))), 1.0 / sum_m))
        if sum_mc > 0:
            total = nm.add(total, nm.mul(nm.tsum(nm.tabs(nm.mul(mc3, diff))), 1.0 / sum_mc))
    return total


def target_feature_levels(target: np.ndarray, backbone: Backbone, dtype) -> list:
    """Frozen feature levels of a constant image, as plain arrays.

    The target side of the perception loss never needs gradients, so the
    levels can be computed once per image and reused across steps.
    """
    tgt_chw = Tensor(np.ascontiguousarray(target.astype(dtype).transpose(2, 0, 1)))
    return [f.data for f in feature_levels(tgt_chw, backbone)]


def perception(pred: Tensor, target: np.ndarray, backbone: Backbone,
               level_weights: tuple = (1.0,) * 6,
               target_levels: list = None) -> Tensor:
    """Weighted mean-absolute distance between frozen feature levels.

    Level 0 is the raw image, so level_weights = (1,0,...,0) collapses to
    plain mean-L1 on pixels. ``target_levels`` may carry precomputed
    levels of the target (see target_feature_levels).
    """
    if pred.shape != target.shape:
        raise ShapeError("perception: shape mismatch")
    dt = pred.dtype
    pred_chw = nm.transpose(pred, (2, 0, 1))
    levels_p = feature_levels(pred_chw, backbone)
    if target_levels is None:
        target_levels = target_feature_levels(target, backbone, dt)
    total = Tensor(np.zeros((), dtype=dt))
    for lam, fp, ft in zip(level_weights, levels_p, target_levels):
        if lam == 0.0:
            continue
        d = nm.tmean(nm.tabs(nm.add(fp, nm.mul(Tensor(ft), -1.0))))
        total = nm.add(total, nm.mul(d, float(lam)))
    return total


def total(l_pixel, l_phi, cfg: LossConfig):
    """Weighted sum lambda_pixel*L_pixel + lambda_phi*L_phi."""
    lp = l_pixel if isinstance(l_pixel, Tensor) else Tensor(np.asarray(l_pixel))
    lf = l_phi if isinstance(l_phi, Tensor) else Tensor(np.asarray(l_phi))
    return nm.add(nm.mul(lp, cfg.lambda_pixel), nm.mul(lf, cfg.lambda_phi))
