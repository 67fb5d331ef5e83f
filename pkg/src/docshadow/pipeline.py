"""End-to-end orchestration: model assembly, training, checkpointing and
inference.

The model is the coarse remapper followed by the refiner on top of a frozen
seeded backbone. Training optimizes the area-normalized masked L1 over both
stage outputs plus the frozen-feature perception loss on the final output,
with Adam. Checkpoints are a small binary named-tensor container (magic
"SDCN").
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from . import objective, remapper as remap_mod, refiner as refine_mod
from .dataio import DataError, SynthConfig, Triplet, synth_sample
from .detection import otsu_detect
from .numerics import Adam, Tensor, UsageError
from .objective import LossConfig
from .refiner import Backbone, BackboneSpec, RefinerWeights
from .remapper import RemapperConfig, RemapperWeights

CHECKPOINT_MAGIC = b"SDCN"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised on malformed or incompatible checkpoint files."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss goes non-finite."""


@dataclass
class PipelineOutput:
    i1: np.ndarray          # coarse remapped stage
    i2: np.ndarray          # refined final stage
    mask_used: np.ndarray
    mask_source: str        # "file" | "detector"

    @property
    def stages(self) -> tuple:
        return (self.i1, self.i2)


@dataclass
class Checkpoint:
    version: int
    hyper: dict           # string -> string
    tensors: dict         # name -> float32 array

    @property
    def backbone_seed(self) -> int:
        return int(self.hyper["backbone_seed"])


class Model:
    """Remapper + refiner over a frozen backbone."""

    def __init__(self, remap_cfg: Optional[RemapperConfig] = None,
                 backbone_spec: Optional[BackboneSpec] = None,
                 refiner_width: int = 24, se_ratio: int = 4,
                 tau: float = 0.5, seed: int = 0, dtype=None):
        self.remap_cfg = remap_cfg or RemapperConfig()
        self.backbone_spec = backbone_spec or BackboneSpec()
        self.refiner_width = refiner_width
        self.se_ratio = se_ratio
        self.tau = tau
        self.seed = seed
        dt = dtype or nm.default_dtype()
        rng = np.random.default_rng(seed)
        self.remapper = RemapperWeights(self.remap_cfg, rng, dtype=dt)
        self.refiner = RefinerWeights(self.backbone_spec, rng, width=refiner_width,
                                      se_ratio=se_ratio, dtype=dt)
        self.backbone = Backbone(self.backbone_spec, dtype=dt)

    def named_parameters(self) -> list:
        return self.remapper.named_parameters() + self.refiner.named_parameters()

    def forward(self, img: np.ndarray, mask: np.ndarray):
        """Run both stages; returns (i1, i2) graph tensors."""
        i1 = remap_mod.run(img, mask, self.remapper, tau=self.tau)
        i2 = refine_mod.refine(img, i1, mask, self.refiner, self.backbone)
        return i1, i2

    # -- checkpoint conversion ------------------------------------------------

    def hyperparameters(self) -> dict:
        c = self.remap_cfg
        return {
            "patch": str(c.patch), "dim": str(c.dim), "layers": str(c.layers),
            "heads": str(c.heads), "max_grid": str(c.max_grid),
            "mlp_hidden": ",".join(str(v) for v in c.mlp_hidden),
            "refiner_width": str(self.refiner_width),
            "se_ratio": str(self.se_ratio),
            "tau": repr(self.tau),
            "backbone_seed": str(self.backbone_spec.seed),
            "backbone_channels": ",".join(str(v) for v in self.backbone_spec.channels),
            "seed": str(self.seed),
        }

    def to_checkpoint(self) -> Checkpoint:
        tensors = {name: t.data.astype(np.float32)
                   for name, t in self.named_parameters()}
        return Checkpoint(version=CHECKPOINT_VERSION,
                          hyper=self.hyperparameters(), tensors=tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=None) -> "Model":
        h = ckpt.hyper
        try:
            remap_cfg = RemapperConfig(
                patch=int(h["patch"]), dim=int(h["dim"]), layers=int(h["layers"]),
                heads=int(h["heads"]),
                mlp_hidden=tuple(int(v) for v in h["mlp_hidden"].split(",")),
                max_grid=int(h["max_grid"]))
            spec = BackboneSpec(
                channels=tuple(int(v) for v in h["backbone_channels"].split(",")),
                seed=int(h["backbone_seed"]))
            model = cls(remap_cfg, spec, refiner_width=int(h["refiner_width"]),
                        se_ratio=int(h["se_ratio"]), tau=float(h["tau"]),
                        seed=int(h.get("seed", "0")), dtype=dtype)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"bad hyperparameter block: {e}") from e
        params = dict(model.named_parameters())
        for name, t in params.items():
            if name not in ckpt.tensors:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            arr = ckpt.tensors[name]
            if arr.shape != t.shape:
                raise CheckpointError(
                    f"tensor {name} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.data.dtype)
        return model


# -- checkpoint container --------------------------------------------------------


def _write_str(fh, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_exact(fh, n: int, what: str) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return b


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write the binary container: magic, version, hyper block, tensor table."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(ckpt.hyper)))
        for key in sorted(ckpt.hyper):
            _write_str(fh, key)
            _write_str(fh, ckpt.hyper[key])
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors.items():
            _write_str(fh, name)
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", arr32.ndim))
            for ext in arr32.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(arr32.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
        (n_hyper,) = struct.unpack("<I", _read_exact(fh, 4, "hyper count"))
        hyper = {}
        for _ in range(n_hyper):
            k = _read_str(fh, "hyper key")
            hyper[k] = _read_str(fh, f"hyper value for {k}")
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(n_tensors):
            name = _read_str(fh, "tensor name")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4, f"extent of {name}"))[0]
                          for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * count, f"data of tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return Checkpoint(version=version, hyper=hyper, tensors=tensors)


def read_tensor_file(path: str) -> dict:
    """Named-tensor table from the checkpoint container (backbone override)."""
    return load_checkpoint(path).tensors


# -- inference --------------------------------------------------------------------


def _pad_to_multiple(img: np.ndarray, p: int) -> tuple:
    h, w = img.shape[:2]
    ph = (-h) % p
    pw = (-w) % p
    if ph == 0 and pw == 0:
        return img, 0, 0
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect"), ph, pw


def infer(img: np.ndarray, mask: Optional[np.ndarray], model: Model) -> PipelineOutput:
    """Full pipeline on one image; pads (reflect) to a patch multiple."""
    h, w = img.shape[:2]
    if mask is None:
        mask_used = otsu_detect(img)
        source = "detector"
    else:
        if mask.shape != (h, w):
            raise DataError(f"mask size {mask.shape} does not match image {(h, w)}")
        mask_used = mask
        source = "file"
    p = model.remap_cfg.patch
    img_p, _, _ = _pad_to_multiple(img, p)
    mask_p, _, _ = _pad_to_multiple(mask_used, p)
    i1, i2 = model.forward(img_p, mask_p)
    return PipelineOutput(
        i1=np.asarray(i1.data[:h, :w], dtype=np.float64),
        i2=np.asarray(i2.data[:h, :w], dtype=np.float64),
        mask_used=mask_used, mask_source=source)


# -- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    dataset_root: Optional[str] = None
    synth: Optional[SynthConfig] = None
    synth_count: int = 64
    batch: int = 4
    steps: int = 2000
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    snapshot_every: int = 0  # 0 disables periodic snapshots
    out_dir: str = "train_out"
    freeze_remapper: bool = False
    freeze_refiner: bool = False
    # model hyperparameters
    patch: int = 8
    dim: int = 64
    layers: int = 4
    heads: int = 4
    refiner_width: int = 24
    backbone_seed: int = 1234

    def validate(self) -> None:
        if self.steps < 1 or self.batch < 1:
            raise UsageError("steps and batch must be >= 1")
        if self.dataset_root is None and self.synth is None:
            raise UsageError("either dataset_root or a synth config is required")
        self.loss.validate()


def _training_triplets(cfg: TrainConfig) -> list:
    if cfg.dataset_root is not None:
        from .dataio import load_dataset
        ds = load_dataset(cfg.dataset_root)
        trips = ds.triplets
    else:
        rng = np.random.default_rng(cfg.synth.seed)
        trips = [synth_sample(cfg.synth, rng) for _ in range(cfg.synth_count)]
    if not trips:
        raise DataError("training dataset is empty")
    return trips


def _sample_loss(model: Model, trip: Triplet, loss_cfg: LossConfig,
                 feat_cache: Optional[dict] = None):
    mask = trip.mask if trip.mask is not None else otsu_detect(trip.input)
    i1, i2 = model.forward(trip.input, mask)
    l_pix = objective.relative_l1([i1, i2], trip.target, mask)
    target_levels = None
    if feat_cache is not None:
        target_levels = feat_cache.get(id(trip))
        if target_levels is None:
            target_levels = objective.target_feature_levels(
                trip.target, model.backbone, i2.dtype)
            feat_cache[id(trip)] = target_levels
    l_phi = objective.perception(i2, trip.target, model.backbone,
                                 loss_cfg.level_weights, target_levels)
    return l_pix, l_phi


def train(cfg: TrainConfig, log_fn=None) -> tuple:
    """Run the optimization loop; returns (model, loss_log rows).

    Writes ``model.ckpt`` and ``loss_log.csv`` into ``cfg.out_dir``. Raises
    TrainingDiverged on a non-finite loss, leaving the last periodic
    snapshot (if any) in place.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    trips = _training_triplets(cfg)
    model = Model(
        RemapperConfig(patch=cfg.patch, dim=cfg.dim, layers=cfg.layers,
                       heads=cfg.heads),
        BackboneSpec(seed=cfg.backbone_seed),
        refiner_width=cfg.refiner_width, seed=cfg.seed)
    params = []
    if not cfg.freeze_remapper:
        params += [t for _, t in model.remapper.named_parameters()]
    if not cfg.freeze_refiner:
        params += [t for _, t in model.refiner.named_parameters()]
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas)
    rng = np.random.default_rng(cfg.seed)
    log_rows = []
    feat_cache: dict = {}
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(trips), size=cfg.batch)
        inv = 1.0 / cfg.batch
        lp_acc = Tensor(np.zeros(()))
        lf_acc = Tensor(np.zeros(()))
        for i in idx:
            l_pix, l_phi = _sample_loss(model, trips[int(i)], cfg.loss, feat_cache)
            lp_acc = nm.add(lp_acc, nm.mul(l_pix, inv))
            lf_acc = nm.add(lf_acc, nm.mul(l_phi, inv))
        l_total = objective.total(lp_acc, lf_acc, cfg.loss)
        lp_v, lf_v, lt_v = lp_acc.item(), lf_acc.item(), l_total.item()
        if not np.isfinite(lt_v):
            raise TrainingDiverged(
                f"non-finite loss at step {step}; last snapshot retained")
        opt.zero_grad()
        l_total.backward()
        opt.step()
        log_rows.append((step, lp_v, lf_v, lt_v))
        if log_fn is not None:
            log_fn(step, lp_v, lf_v, lt_v)
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            save_checkpoint(model.to_checkpoint(),
                            os.path.join(cfg.out_dir, f"snapshot_{step:06d}.ckpt"))
    save_checkpoint(model.to_checkpoint(), os.path.join(cfg.out_dir, "model.ckpt"))
    write_loss_log(log_rows, os.path.join(cfg.out_dir, "loss_log.csv"))
    return model, log_rows


def write_loss_log(rows: list, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss_pixel,loss_phi,loss_total\n")
        for step, lp, lf, lt in rows:
            fh.write(f"{step},{lp!r},{lf!r},{lt!r}\n")
