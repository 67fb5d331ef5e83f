"""Command-line entry point: synthesize data, train, remove shadows, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .dataio import (DataError, SynthConfig, load_image, save_image,
                     synth_sample, write_triplet)
from .detection import load_mask
from .metrics import evaluate_dirs
from .objective import LossConfig
from .pipeline import (CheckpointError, Model, TrainConfig, TrainingDiverged,
                       infer, load_checkpoint, train)

# Documented config-file schema for `train` (JSON, flags win over file values).
TRAIN_CONFIG_KEYS = {
    "dataset_root": "path to a root/{input,target,mask} dataset",
    "synth": "object {count,size,seed,sigma,smin,smax,density} for on-the-fly data",
    "batch": "images per optimization step (>=1)",
    "steps": "optimization steps (>=1)",
    "lr": "Adam learning rate",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "lambda_pixel": "weight of the masked L1 term",
    "lambda_phi": "weight of the frozen-feature term",
    "level_weights": "list of 6 per-level feature weights",
    "seed": "global RNG seed",
    "snapshot_every": "checkpoint cadence in steps (0 = off)",
    "out_dir": "output directory for checkpoint and loss log",
    "patch": "token patch size",
    "dim": "token embedding width",
    "layers": "transformer depth",
    "heads": "attention heads",
    "refiner_width": "refiner stage channel width",
    "backbone_seed": "seed of the frozen feature extractor",
    "freeze_remapper": "train only the refiner",
    "freeze_refiner": "train only the remapper",
}
SYNTH_CONFIG_KEYS = {"count", "size", "seed", "sigma", "smin", "smax", "density"}


def _fail(msg: str, code: int = 1) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _synth_config(size: int, sigma: float, smin: float, smax: float,
                  density: float, seed: int) -> SynthConfig:
    return SynthConfig(height=size, width=size, sigma=sigma, s_min=smin,
                       s_max=smax, glyph_density=density, seed=seed)


def cmd_synth(args) -> int:
    try:
        cfg = _synth_config(args.size, args.sigma, args.smin, args.smax,
                            args.density, args.seed)
        cfg.validate()
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        os.makedirs(args.out, exist_ok=True)
        rng = np.random.default_rng(cfg.seed)
        for i in range(args.count):
            write_triplet(args.out, f"sample_{i:04d}", synth_sample(cfg, rng))
        manifest = {"count": args.count, "height": cfg.height, "width": cfg.width,
                    "s_min": cfg.s_min, "s_max": cfg.s_max, "sigma": cfg.sigma,
                    "glyph_density": cfg.glyph_density, "seed": cfg.seed,
                    "patch": cfg.patch}
        with open(os.path.join(args.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        return _fail(str(e))
    print(f"wrote {args.count} triplets to {args.out}")
    return 0


def _load_train_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(TRAIN_CONFIG_KEYS)
    if unknown:
        raise DataError(f"unknown config key(s): {sorted(unknown)}")
    if "synth" in raw:
        bad = set(raw["synth"]) - SYNTH_CONFIG_KEYS
        if bad:
            raise DataError(f"unknown synth config key(s): {sorted(bad)}")
    return raw


def cmd_train(args) -> int:
    try:
        raw = _load_train_config(args.config)
    except (DataError, json.JSONDecodeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    def pick(key, flag_val, default):
        if flag_val is not None:
            return flag_val
        return raw.get(key, default)

    synth = None
    if "synth" in raw or args.dataset is None and "dataset_root" not in raw:
        s = raw.get("synth", {})
        synth = _synth_config(int(s.get("size", 128)), float(s.get("sigma", 0.0)),
                              float(s.get("smin", 0.3)), float(s.get("smax", 0.7)),
                              float(s.get("density", 1.0)), int(s.get("seed", 0)))
    cfg = TrainConfig(
        dataset_root=pick("dataset_root", args.dataset, None),
        synth=synth,
        synth_count=int(raw.get("synth", {}).get("count", 64)),
        batch=int(pick("batch", args.batch, 4)),
        steps=int(pick("steps", args.steps, 2000)),
        lr=float(pick("lr", args.lr, 1e-3)),
        betas=(float(raw.get("beta1", 0.9)), float(raw.get("beta2", 0.999))),
        loss=LossConfig(
            lambda_pixel=float(raw.get("lambda_pixel", 1.0)),
            lambda_phi=float(raw.get("lambda_phi", 0.1)),
            level_weights=tuple(raw.get("level_weights", [1.0] * 6))),
        seed=int(pick("seed", args.seed, 0)),
        snapshot_every=int(raw.get("snapshot_every", 0)),
        out_dir=pick("out_dir", args.out, "train_out"),
        patch=int(raw.get("patch", 8)),
        dim=int(raw.get("dim", 64)),
        layers=int(raw.get("layers", 4)),
        heads=int(raw.get("heads", 4)),
        refiner_width=int(raw.get("refiner_width", 24)),
        backbone_seed=int(raw.get("backbone_seed", 1234)),
        freeze_remapper=bool(raw.get("freeze_remapper", False)),
        freeze_refiner=bool(raw.get("freeze_refiner", False)),
    )
    if cfg.dataset_root is not None:
        cfg.synth = None

    def log_fn(step, lp, lf, lt):
        if args.verbose or step % 50 == 0 or step == 1:
            print(f"step {step}: pixel={lp:.6f} phi={lf:.6f} total={lt:.6f}")

    try:
        train(cfg, log_fn=log_fn)
    except TrainingDiverged as e:
        return _fail(str(e))
    except (DataError, OSError) as e:
        return _fail(str(e))
    print(f"checkpoint written to {os.path.join(cfg.out_dir, 'model.ckpt')}")
    return 0


def _collect_pngs(path: str) -> list:
    if os.path.isdir(path):
        return [os.path.join(path, f) for f in sorted(os.listdir(path))
                if f.lower().endswith(".png")]
    return [path]


def cmd_remove(args) -> int:
    try:
        model = Model.from_checkpoint(load_checkpoint(args.ckpt))
    except (CheckpointError, OSError) as e:
        return _fail(str(e))
    inputs = _collect_pngs(args.input)
    if not inputs:
        return _fail(f"no PNG inputs under {args.input}")
    os.makedirs(args.out, exist_ok=True)

    def mask_for(img_path: str, shape) -> tuple:
        if args.mask is None:
            return None, None
        if os.path.isdir(args.mask):
            stem = os.path.splitext(os.path.basename(img_path))[0]
            cand = os.path.join(args.mask, stem + ".png")
            if not os.path.exists(cand):
                return None, None
            return load_mask(cand, shape), cand
        return load_mask(args.mask, shape), args.mask

    def process(path: str):
        stem = os.path.splitext(os.path.basename(path))[0]
        img = load_image(path)
        mask, mask_path = mask_for(path, img.shape[:2])
        out = infer(img, mask, model)
        if args.save_coarse:
            save_image(out.i1, os.path.join(args.out, stem + "_coarse.png"))
            save_image(out.i2, os.path.join(args.out, stem + "_final.png"))
        else:
            save_image(out.i2, os.path.join(args.out, stem + ".png"))
        return stem, out.mask_source, mask_path

    failures = 0
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(lambda p: _try_process(process, p), inputs))
    else:
        results = [_try_process(process, p) for p in inputs]
    for path, res, err in results:
        if err is not None:
            failures += 1
            print(f"error: {path}: {err}", file=sys.stderr)
        else:
            stem, source, mask_path = res
            origin = mask_path if source == "file" else "detector"
            print(f"{stem}: mask from {origin}")
    return 1 if failures else 0


def _try_process(fn, path):
    try:
        return path, fn(path), None
    except Exception as e:  # per-image isolation; summarized in the exit code
        return path, None, e


def cmd_eval(args) -> int:
    try:
        report = evaluate_dirs(args.pred, args.gt, args.pred_text, args.gt_text,
                               metadata={"pred_dir": args.pred, "gt_dir": args.gt},
                               jobs=args.jobs)
    except (DataError, OSError) as e:
        return _fail(str(e))
    for stem in report.missing:
        print(f"warning: stem {stem} present on only one side", file=sys.stderr)
    if not report.rows:
        return _fail("no stem-aligned image pairs found")
    report.write_table(args.report + ".csv")
    report.write_summary(args.report + ".json")
    line = (f"RMSE {report.mean('rmse'):.2f}  "
            f"PSNR {report.mean('psnr'):.2f}  "
            f"SSIM {report.mean('ssim'):.4f}")
    med = report.mean("edit_distance")
    if med is not None:
        line += f"  EDIT {med:.1f}"
    print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="docshadow",
        description="Document shadow removal: coarse token-based remapping "
                    "plus pixel-level refinement, with training, synthetic "
                    "data and an evaluation harness.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--smin", type=float, default=0.3)
    sp.add_argument("--smax", type=float, default=0.7)
    sp.add_argument("--density", type=float, default=1.0)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train from a config file (flags win)")
    tp.add_argument("--config", default=None, help="JSON config file")
    tp.add_argument("--dataset", default=None, help="dataset root override")
    tp.add_argument("--out", default=None, help="output directory override")
    tp.add_argument("--steps", type=int, default=None)
    tp.add_argument("--batch", type=int, default=None)
    tp.add_argument("--lr", type=float, default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--verbose", action="store_true")
    tp.set_defaults(fn=cmd_train)

    rp = sub.add_parser("remove", help="remove shadows from image(s)")
    rp.add_argument("--ckpt", required=True)
    rp.add_argument("--in", dest="input", required=True,
                    help="input PNG or directory of PNGs")
    rp.add_argument("--mask", default=None, help="mask PNG or directory")
    rp.add_argument("--out", required=True)
    rp.add_argument("--save-coarse", action="store_true")
    rp.add_argument("--jobs", type=int, default=1)
    rp.set_defaults(fn=cmd_remove)

    ep = sub.add_parser("eval", help="evaluate stem-aligned directories")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--gt", required=True)
    ep.add_argument("--pred-text", default=None)
    ep.add_argument("--gt-text", default=None)
    ep.add_argument("--report", required=True, help="report base path "
                    "(writes <base>.csv and <base>.json)")
    ep.add_argument("--jobs", type=int, default=1)
    ep.set_defaults(fn=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
