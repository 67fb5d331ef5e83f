import os
import struct

import numpy as np
import pytest

from docshadow import pipeline as pl
from docshadow.dataio import DataError, SynthConfig, Triplet, synth_sample
from docshadow.refiner import BackboneSpec
from docshadow.remapper import RemapperConfig


def small_model(seed=3):
    cfg = RemapperConfig(patch=8, dim=16, layers=1, heads=2,
                         mlp_hidden=(16, 16), max_grid=8)
    spec = BackboneSpec(channels=(4, 4, 8, 8, 8), seed=7)
    return pl.Model(cfg, spec, refiner_width=8, se_ratio=2, seed=seed)


def perturbed_model(seed=3):
    model = small_model(seed)
    rng = np.random.default_rng(99)
    for _, t in model.named_parameters():
        t.data = t.data + (0.02 * rng.standard_normal(t.shape)).astype(t.data.dtype)
    return model


# -- checkpoint container -----------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = perturbed_model()
    path = str(tmp_path / "m.ckpt")
    pl.save_checkpoint(model.to_checkpoint(), path)
    ckpt = pl.load_checkpoint(path)
    assert ckpt.version == pl.CHECKPOINT_VERSION
    assert ckpt.hyper == model.hyperparameters()
    orig = dict(model.named_parameters())
    assert set(ckpt.tensors) == set(orig)
    for name, arr in ckpt.tensors.items():
        assert arr.dtype == np.float32
        assert np.array_equal(arr, orig[name].data.astype(np.float32))


def test_checkpoint_double_round_trip_identical_bytes(tmp_path):
    model = perturbed_model()
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    pl.save_checkpoint(model.to_checkpoint(), p1)
    pl.save_checkpoint(pl.Model.from_checkpoint(pl.load_checkpoint(p1)).to_checkpoint(), p2)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + struct.pack("<I", 1))
    with pytest.raises(pl.CheckpointError, match="magic"):
        pl.load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with open(path, "wb") as fh:
        fh.write(pl.CHECKPOINT_MAGIC + struct.pack("<I", 42))
        fh.write(struct.pack("<I", 0))
        fh.write(struct.pack("<I", 0))
    with pytest.raises(pl.CheckpointError, match="version 42"):
        pl.load_checkpoint(path)


def test_checkpoint_truncation_names_tensor(tmp_path):
    model = small_model()
    path = str(tmp_path / "m.ckpt")
    pl.save_checkpoint(model.to_checkpoint(), path)
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = str(tmp_path / "cut.ckpt")
    with open(cut, "wb") as fh:
        fh.write(blob[:-8])
    with pytest.raises(pl.CheckpointError, match="truncated checkpoint"):
        pl.load_checkpoint(cut)


def test_from_checkpoint_missing_tensor(tmp_path):
    ckpt = small_model().to_checkpoint()
    name = sorted(ckpt.tensors)[0]
    del ckpt.tensors[name]
    with pytest.raises(pl.CheckpointError, match=name.replace(".", "\\.")):
        pl.Model.from_checkpoint(ckpt)


def test_from_checkpoint_shape_mismatch():
    ckpt = small_model().to_checkpoint()
    name = sorted(ckpt.tensors)[0]
    ckpt.tensors[name] = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(pl.CheckpointError, match="shape"):
        pl.Model.from_checkpoint(ckpt)


# -- inference ---------------------------------------------------------------------


def test_infer_empty_mask_is_identity():
    # fresh model: remap passes a shadow-free image through and the
    # residual head starts at zero, so both stages must equal the input
    model = small_model()
    rng = np.random.default_rng(0)
    img = rng.random((16, 24, 3)).astype(np.float64)
    out = pl.infer(img, np.zeros((16, 24)), model)
    # the model computes in float32, so identity means float32-exact
    assert np.array_equal(out.i1, img.astype(np.float32).astype(np.float64))
    assert np.array_equal(out.i2, out.i1)
    assert out.mask_source == "file"


def test_infer_pads_and_crops_odd_sizes():
    model = small_model()
    rng = np.random.default_rng(1)
    img = rng.random((19, 29, 3))
    mask = (rng.random((19, 29)) > 0.5).astype(np.float64)
    out = pl.infer(img, mask, model)
    assert out.i1.shape == (19, 29, 3)
    assert out.i2.shape == (19, 29, 3)
    assert out.i2.min() >= 0.0 and out.i2.max() <= 1.0


def test_infer_mask_size_mismatch():
    model = small_model()
    with pytest.raises(DataError, match="mask size"):
        pl.infer(np.zeros((16, 16, 3)), np.zeros((8, 8)), model)


def test_infer_without_mask_uses_detector():
    model = small_model()
    cfg = SynthConfig(height=32, width=32, seed=5)
    trip = synth_sample(cfg, np.random.default_rng(5))
    out = pl.infer(trip.input, None, model)
    assert out.mask_source == "detector"
    assert out.mask_used.shape == (32, 32)


def test_infer_deterministic():
    rng = np.random.default_rng(2)
    img = rng.random((24, 24, 3))
    mask = (rng.random((24, 24)) > 0.5).astype(np.float64)
    a = pl.infer(img, mask, perturbed_model())
    b = pl.infer(img, mask, perturbed_model())
    assert np.array_equal(a.i1, b.i1)
    assert np.array_equal(a.i2, b.i2)


def test_infer_matches_after_checkpoint_reload(tmp_path):
    model = perturbed_model()
    path = str(tmp_path / "m.ckpt")
    pl.save_checkpoint(model.to_checkpoint(), path)
    clone = pl.Model.from_checkpoint(pl.load_checkpoint(path))
    rng = np.random.default_rng(3)
    img = rng.random((24, 24, 3))
    mask = (rng.random((24, 24)) > 0.4).astype(np.float64)
    a = pl.infer(img, mask, model)
    b = pl.infer(img, mask, clone)
    assert np.array_equal(a.i2, b.i2)


# -- training ----------------------------------------------------------------------


def tiny_train_cfg(tmp_path, **kw):
    base = dict(
        synth=SynthConfig(height=32, width=32, seed=11),
        synth_count=4, batch=2, steps=3, lr=1e-3, seed=9,
        out_dir=str(tmp_path / "run"),
        patch=8, dim=16, layers=1, heads=2, refiner_width=8)
    base.update(kw)
    return pl.TrainConfig(**base)


def test_train_writes_artifacts(tmp_path):
    cfg = tiny_train_cfg(tmp_path)
    model, rows = pl.train(cfg)
    assert os.path.exists(os.path.join(cfg.out_dir, "model.ckpt"))
    assert os.path.exists(os.path.join(cfg.out_dir, "loss_log.csv"))
    assert len(rows) == 3
    assert all(np.isfinite(r[3]) for r in rows)


def train_reference_model(cfg):
    return pl.Model(
        RemapperConfig(patch=cfg.patch, dim=cfg.dim, layers=cfg.layers,
                       heads=cfg.heads),
        BackboneSpec(seed=cfg.backbone_seed),
        refiner_width=cfg.refiner_width, seed=cfg.seed)


def test_train_zero_lr_keeps_weights(tmp_path):
    cfg = tiny_train_cfg(tmp_path, lr=0.0, steps=2)
    before = {n: t.data.copy()
              for n, t in train_reference_model(cfg).named_parameters()}
    model, _ = pl.train(cfg)
    after = dict(model.named_parameters())
    for name, arr in before.items():
        assert np.array_equal(arr, after[name].data)


def test_train_deterministic_loss_trace(tmp_path):
    _, rows1 = pl.train(tiny_train_cfg(tmp_path, out_dir=str(tmp_path / "r1")))
    _, rows2 = pl.train(tiny_train_cfg(tmp_path, out_dir=str(tmp_path / "r2")))
    assert rows1 == rows2
    with open(tmp_path / "r1" / "model.ckpt", "rb") as f1, \
            open(tmp_path / "r2" / "model.ckpt", "rb") as f2:
        assert f1.read() == f2.read()


def test_train_overfits_single_sample(tmp_path):
    cfg = tiny_train_cfg(tmp_path, synth_count=1, batch=1, steps=60, lr=3e-3)
    _, rows = pl.train(cfg)
    first = rows[0][3]
    last = min(r[3] for r in rows[-5:])
    assert last < first / 3.0


def test_train_backbone_stays_frozen(tmp_path):
    cfg = tiny_train_cfg(tmp_path, steps=4)
    reference = train_reference_model(cfg)
    model, _ = pl.train(cfg)
    for w_ref, w in zip(reference.backbone.convs, model.backbone.convs):
        assert np.array_equal(w_ref[0].data, w[0].data)
        assert np.array_equal(w_ref[1].data, w[1].data)


def test_train_snapshot_written(tmp_path):
    cfg = tiny_train_cfg(tmp_path, steps=4, snapshot_every=2)
    pl.train(cfg)
    assert os.path.exists(os.path.join(cfg.out_dir, "snapshot_000002.ckpt"))
    assert os.path.exists(os.path.join(cfg.out_dir, "snapshot_000004.ckpt"))


def test_train_config_validation(tmp_path):
    from docshadow.numerics import UsageError
    with pytest.raises(UsageError):
        pl.TrainConfig(steps=0, synth=SynthConfig()).validate()
    with pytest.raises(UsageError):
        pl.TrainConfig().validate()


def test_freeze_remapper_keeps_remapper_weights(tmp_path):
    cfg = tiny_train_cfg(tmp_path, steps=2, freeze_remapper=True)
    reference = train_reference_model(cfg)
    model, _ = pl.train(cfg)
    ref = dict(reference.remapper.named_parameters())
    for name, t in model.remapper.named_parameters():
        assert np.array_equal(ref[name].data, t.data)
