"""Fine stage: pixel-wise refinement of the coarse output.

A frozen, seeded convolutional backbone supplies multi-level features; the
levels are upsampled to input resolution and concatenated into a
hyper-column. Two aggregation stages (3x3 conv, relu, squeeze-and-excitation
re-weighting) mix the hyper-column with the raw inputs, a spatial pooling
pyramid remixes context, and a zero-initialized 1x1 residual projection
produces a correction on top of the coarse image. At initialization the
stage is therefore the identity on I1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .numerics import Tensor, ShapeError


@dataclass
class BackboneSpec:
    """Frozen multi-level feature extractor, generated from a seed."""

    channels: tuple = (16, 32, 64, 64, 64)
    seed: int = 1234
    weight_file: Optional[str] = None  # named-tensor container override

    @property
    def hyper_channels(self) -> int:
        return 3 + sum(self.channels)


class Backbone:
    """Seeded stage convolutions; weights never receive gradients."""

    def __init__(self, spec: BackboneSpec, dtype=None):
        self.spec = spec
        dt = dtype or nm.default_dtype()
        rng = np.random.default_rng(spec.seed)
        self.convs = []
        cin = 3
        for cout in spec.channels:
            w = Tensor(nm.he_init(rng, (cout, cin, 3, 3), cin * 9, dt))
            b = Tensor(np.zeros(cout, dtype=dt))
            self.convs.append((w, b))
            cin = cout
        if spec.weight_file:
            self.load_weights(spec.weight_file)

    def named_tensors(self) -> list:
        out = []
        for i, (w, b) in enumerate(self.convs):
            out.append((f"backbone.conv{i}.w", w))
            out.append((f"backbone.conv{i}.b", b))
        return out

    def load_weights(self, path: str) -> None:
        from .pipeline import read_tensor_file
        table = read_tensor_file(path)
        for name, t in self.named_tensors():
            if name not in table:
                raise ShapeError(f"backbone weight file missing tensor {name}")
            arr = table[name].astype(t.data.dtype)
            if arr.shape != t.shape:
                raise ShapeError(f"backbone tensor {name} has shape {arr.shape}, "
                                 f"expected {t.shape}")
            t.data = arr

    def levels(self, img: Tensor) -> list:
        """Per-stage feature maps; resolution halves between stages."""
        feats = []
        x = img
        for k, (w, b) in enumerate(self.convs):
            if k > 0:
                _, h, wd = x.shape
                x = nm.adaptive_avgpool(x, max(1, -(-h // 2)), max(1, -(-wd // 2)))
            x = nm.relu(nm.conv2d(x, w, b, stride=1, padding=1))
            feats.append(x)
        return feats


@dataclass
class FeatureStack:
    levels: list          # level 0 = input image, then backbone stages, at H×W
    hypercolumn: Tensor   # channel concat of all levels


def feature_levels(img: Tensor, backbone: Backbone) -> list:
    """Level 0 = the image itself, then each backbone stage at input size."""
    _, h, w = img.shape
    return [img] + [nm.resize_bilinear(f, h, w) for f in backbone.levels(img)]


def hypercolumn(img: Tensor, backbone: Backbone) -> FeatureStack:
    """Upsample every backbone level to input size and concatenate."""
    levels = feature_levels(img, backbone)
    return FeatureStack(levels=levels, hypercolumn=nm.concat(levels, axis=0))


def se_reweight(features: Tensor, w1: Tensor, b1: Tensor,
                w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze-and-excitation: scale channels by sigmoid gates in (0,1)."""
    c = features.shape[0]
    if w1.shape[1] != c:
        raise ShapeError("se_reweight: gate input width must match channels")
    z = nm.gap(features)
    s = nm.sigmoid(nm.add(nm.matmul(w2, nm.relu(nm.add(nm.matmul(w1, z), b1))), b2))
    return nm.mul(features, nm.reshape(s, (c, 1, 1)))


SPP_GRIDS = (1, 2, 4)


def spp(features: Tensor, fuse_w: Tensor, fuse_b: Tensor) -> Tensor:
    """Spatial pooling pyramid: pool to 1/2/4 grids, upsample, fuse 1x1."""
    c, h, w = features.shape
    if h < 4 or w < 4:
        raise ShapeError("spp needs spatial extents >= 4")
    pooled = [nm.resize_bilinear(nm.adaptive_avgpool(features, g), h, w)
              for g in SPP_GRIDS]
    stacked = nm.concat([features] + pooled, axis=0)
    return nm.conv2d(stacked, fuse_w, fuse_b, stride=1, padding=0)


class RefinerWeights:
    """Trainable tensors of the refinement stage."""

    def __init__(self, backbone_spec: BackboneSpec, rng: np.random.Generator,
                 width: int = 24, se_ratio: int = 4, dtype=None):
        if width % se_ratio:
            raise ShapeError("se reduction ratio must divide the stage width")
        self.width = width
        self.se_ratio = se_ratio
        dt = dtype or nm.default_dtype()

        def param(arr):
            return Tensor(arr.astype(dt), requires_grad=True)

        hc = backbone_spec.hyper_channels
        c = width
        # 1x1 projection keeps the wide hyper-column affordable downstream
        self.hyper_w = param(nm.he_init(rng, (c, hc, 1, 1), hc))
        self.hyper_b = param(np.zeros(c))
        self.stage1_w = param(nm.he_init(rng, (c, 7 + c, 3, 3), (7 + c) * 9))
        self.stage1_b = param(np.zeros(c))
        self.se1 = tuple(param(a) for a in (
            nm.he_init(rng, (c // se_ratio, c), c), np.zeros(c // se_ratio),
            nm.he_init(rng, (c, c // se_ratio), c // se_ratio), np.zeros(c)))
        self.stage2_w = param(nm.he_init(rng, (c, c, 3, 3), c * 9))
        self.stage2_b = param(np.zeros(c))
        self.se2 = tuple(param(a) for a in (
            nm.he_init(rng, (c // se_ratio, c), c), np.zeros(c // se_ratio),
            nm.he_init(rng, (c, c // se_ratio), c // se_ratio), np.zeros(c)))
        self.fuse_w = param(nm.he_init(rng, (c, (1 + len(SPP_GRIDS)) * c, 1, 1),
                                       (1 + len(SPP_GRIDS)) * c))
        self.fuse_b = param(np.zeros(c))
        # residual head starts at exact zero so refine is the identity on I1
        self.res_w = param(np.zeros((3, c, 1, 1)))
        self.res_b = param(np.zeros(3))

    def named_parameters(self) -> list:
        out = [("refiner.hyper.w", self.hyper_w), ("refiner.hyper.b", self.hyper_b),
               ("refiner.stage1.w", self.stage1_w), ("refiner.stage1.b", self.stage1_b),
               ("refiner.stage2.w", self.stage2_w), ("refiner.stage2.b", self.stage2_b),
               ("refiner.fuse.w", self.fuse_w), ("refiner.fuse.b", self.fuse_b),
               ("refiner.res.w", self.res_w), ("refiner.res.b", self.res_b)]
        for tag, se in (("se1", self.se1), ("se2", self.se2)):
            for part, t in zip(("w1", "b1", "w2", "b2"), se):
                out.append((f"refiner.{tag}.{part}", t))
        return out


def refine(img_in: np.ndarray, i1: Tensor, mask: np.ndarray,
           weights: RefinerWeights, backbone: Backbone) -> Tensor:
    """Refinement stage output I2 = clamp(I1 + residual, 0, 1)."""
    dt = i1.dtype
    h, w = img_in.shape[:2]
    if i1.shape != (h, w, 3) or mask.shape != (h, w):
        raise ShapeError("refine inputs must share H×W")
    i1_chw = nm.transpose(i1, (2, 0, 1))
    x = nm.concat([
        Tensor(img_in.astype(dt).transpose(2, 0, 1)),
        i1_chw,
        Tensor(mask.astype(dt)[None, :, :]),
    ], axis=0)
    stack = hypercolumn(i1_chw, backbone)
    hproj = nm.relu(nm.conv2d(stack.hypercolumn, weights.hyper_w, weights.hyper_b))
    f = nm.concat([x, hproj], axis=0)
    f = nm.relu(nm.conv2d(f, weights.stage1_w, weights.stage1_b, padding=1))
    f = se_reweight(f, *weights.se1)
    f = nm.relu(nm.conv2d(f, weights.stage2_w, weights.stage2_b, padding=1))
    f = se_reweight(f, *weights.se2)
    f = spp(f, weights.fuse_w, weights.fuse_b)
    delta = nm.conv2d(f, weights.res_w, weights.res_b)
    i2 = nm.clip(nm.add(i1_chw, delta), 0.0, 1.0)
    return nm.transpose(i2, (1, 2, 0))
