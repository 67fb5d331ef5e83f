"""Image and dataset I/O plus the synthetic shadow-triplet generator.

Images travel as H,W,3 float64 arrays in [0,1]; masks as H,W float64 in
[0,1]. PNG is the only on-disk format. The generator fabricates desk-scale
document pages darkened by a single multiplicative attenuation inside a
soft-edged convex shadow region, so the remapper has an exactly achievable
solution to recover.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


class DataError(ValueError):
    """Raised on malformed datasets or unsupported image files."""


# -- PNG I/O -------------------------------------------------------------------


def load_image(path: str) -> np.ndarray:
    """Load an 8-bit RGB or grayscale PNG as H,W,3 floats (byte/255)."""
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
            return np.repeat(arr[:, :, None], 3, axis=2)
        if im.mode == "RGB":
            return np.asarray(im, dtype=np.float64) / 255.0
        raise DataError(f"unsupported PNG mode {im.mode!r} in {path} "
                        "(need 8-bit RGB or grayscale)")


def save_image(img: np.ndarray, path: str) -> None:
    """Clamp to [0,1], quantize round-half-up, write an 8-bit RGB PNG."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"refusing to save non-finite image to {path}")
    b = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5)
    b = np.clip(b, 0, 255).astype(np.uint8)
    Image.fromarray(b, mode="RGB").save(path, format="PNG")


def save_mask(mask: np.ndarray, path: str) -> None:
    """Write a soft mask as an 8-bit grayscale PNG (round half up)."""
    b = np.floor(np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    Image.fromarray(np.clip(b, 0, 255).astype(np.uint8), mode="L").save(path, format="PNG")


# -- synthetic triplets -----------------------------------------------------------


@dataclass
class SynthConfig:
    """Knobs for the uniform-illuminant shadow generator."""

    height: int = 128
    width: int = 128
    s_min: float = 0.3  # attenuation range, subset of (0,1)
    s_max: float = 0.7
    sigma: float = 0.0  # Gaussian blur radius of the mask edge
    glyph_density: float = 1.0
    seed: int = 0
    patch: int = 8  # image extents must be multiples of this

    def validate(self) -> None:
        if not (0.0 < self.s_min <= self.s_max < 1.0):
            raise DataError(f"attenuation range [{self.s_min}, {self.s_max}] "
                            "must satisfy 0 < s_min <= s_max < 1")
        if self.sigma < 0:
            raise DataError("sigma must be >= 0")
        if self.height < 2 * self.patch or self.width < 2 * self.patch:
            raise DataError("image extents must be at least 2 patches")
        if self.height % self.patch or self.width % self.patch:
            raise DataError("image extents must be multiples of the patch size")


@dataclass
class Triplet:
    input: np.ndarray   # shadow image
    target: np.ndarray  # ground-truth shadow-free image
    mask: Optional[np.ndarray]  # soft shadow mask, 1 = shadow
    stem: str = ""

    def validate(self) -> None:
        h, w = self.target.shape[:2]
        if self.input.shape[:2] != (h, w) or (
                self.mask is not None and self.mask.shape != (h, w)):
            raise DataError(f"triplet {self.stem!r}: member sizes differ")


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; pts is k×2, returns hull CCW."""
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and cross2(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(list(pts))
    upper = half(list(pts[::-1]))
    return np.array(lower[:-1] + upper[:-1])


def _rasterize_convex(h: int, w: int, hull: np.ndarray) -> np.ndarray:
    """Binary inside-test of pixel centers against a CCW convex polygon."""
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.ones((h, w), dtype=bool)
    neg = np.ones((h, w), dtype=bool)
    n = len(hull)
    for i in range(n):
        y0, x0 = hull[i]
        y1, x1 = hull[(i + 1) % n]
        # cross product of edge with (pixel - vertex); convexity means the
        # interior has one consistent sign, whichever the hull winding gives
        c = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        pos &= c >= 0
        neg &= c <= 0
    return (pos | neg).astype(np.float64)


def _draw_page(h: int, w: int, density: float, rng: np.random.Generator) -> np.ndarray:
    """White page with dark glyph-like strokes arranged in text rows."""
    page = np.ones((h, w, 3), dtype=np.float64)
    if density <= 0:
        return page
    row_h = max(6, h // 16)
    n_rows = max(1, int((h // row_h - 1) * min(density, 4.0)))
    for _ in range(n_rows):
        top = int(rng.integers(2, max(3, h - row_h - 2)))
        x = int(rng.integers(2, max(3, w // 8)))
        while x < w - 4:
            glyph_w = int(rng.integers(2, 7))
            glyph_h = int(rng.integers(row_h // 2, row_h))
            if rng.random() < 0.85:  # word gap otherwise
                shade = float(rng.uniform(0.02, 0.25))
                page[top:top + glyph_h, x:x + glyph_w, :] = shade
            x += glyph_w + int(rng.integers(1, 4))
    return page


def synth_sample(cfg: SynthConfig, rng: np.random.Generator) -> Triplet:
    """Fabricate one (input, target, mask) triplet.

    target: white page with dark strokes; mask: blurred convex polygon;
    input: target darkened by a single attenuation s inside the mask.
    Pixels with M=0 keep the target exactly; M=1 pixels are exactly
    s*target.
    """
    cfg.validate()
    h, w = cfg.height, cfg.width
    target = _draw_page(h, w, cfg.glyph_density, rng)

    k = int(rng.integers(4, 9))
    cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
    rad = rng.uniform(0.25, 0.45) * min(h, w)
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    pts = np.stack([cy + rad * rng.uniform(0.5, 1.0, k) * np.sin(ang),
                    cx + rad * rng.uniform(0.5, 1.0, k) * np.cos(ang)], axis=1)
    hull = _convex_hull(pts)
    mask = _rasterize_convex(h, w, hull)
    if cfg.sigma > 0:
        mask = gaussian_filter(mask, sigma=cfg.sigma, mode="constant")
        mask = np.clip(mask, 0.0, 1.0)

    s = float(rng.uniform(cfg.s_min, cfg.s_max))
    atten = s + (1.0 - s) * (1.0 - mask)
    inp = target * atten[:, :, None]
    # pin the saturated cases so the M=0 / M=1 identities hold bit-exactly
    m3 = mask[:, :, None]
    inp = np.where(m3 == 0.0, target, inp)
    inp = np.where(m3 == 1.0, target * s, inp)
    return Triplet(input=inp, target=target, mask=mask)


# -- datasets ---------------------------------------------------------------------


@dataclass
class Dataset:
    """Immutable, stem-sorted list of triplets."""

    triplets: list = field(default_factory=list)
    root: str = ""

    def __len__(self) -> int:
        return len(self.triplets)

    def __getitem__(self, i: int) -> Triplet:
        return self.triplets[i]


def _stems(d: str) -> dict:
    if not os.path.isdir(d):
        return {}
    return {os.path.splitext(f)[0]: os.path.join(d, f)
            for f in sorted(os.listdir(d)) if f.lower().endswith(".png")}


def load_dataset(root: str) -> Dataset:
    """Load root/{input,target,mask}/*.png as stem-aligned triplets.

    Masks are optional per stem (the pipeline falls back to the detector).
    """
    inputs = _stems(os.path.join(root, "input"))
    targets = _stems(os.path.join(root, "target"))
    masks = _stems(os.path.join(root, "mask"))
    missing = sorted(set(inputs) - set(targets))
    if missing:
        raise DataError(f"stems present in input/ but missing in target/: {missing}")
    trips = []
    for stem in sorted(inputs):
        t = Triplet(
            input=load_image(inputs[stem]),
            target=load_image(targets[stem]),
            mask=load_image(masks[stem])[:, :, 0] if stem in masks else None,
            stem=stem,
        )
        t.validate()
        trips.append(t)
    return Dataset(triplets=trips, root=root)


def write_triplet(root: str, stem: str, trip: Triplet) -> None:
    for sub in ("input", "target", "mask"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    save_image(trip.input, os.path.join(root, "input", stem + ".png"))
    save_image(trip.target, os.path.join(root, "target", stem + ".png"))
    if trip.mask is not None:
        save_mask(trip.mask, os.path.join(root, "mask", stem + ".png"))
