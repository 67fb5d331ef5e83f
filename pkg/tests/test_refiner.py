import numpy as np
import pytest

from docshadow import numerics as nm
from docshadow import refiner as rf
from docshadow.numerics import ShapeError, Tensor

from fdcheck import check_gradients


@pytest.fixture(autouse=True)
def f64():
    with nm.precision("float64"):
        yield


SMALL_PLAN = (4, 4, 8, 8, 8)


def small_backbone(seed=1):
    return rf.Backbone(rf.BackboneSpec(channels=SMALL_PLAN, seed=seed))


def small_weights(seed=2, width=8):
    return rf.RefinerWeights(rf.BackboneSpec(channels=SMALL_PLAN),
                             np.random.default_rng(seed), width=width)


# -- hypercolumn -----------------------------------------------------------------


def test_hypercolumn_default_channel_count():
    assert rf.BackboneSpec().hyper_channels == 3 + 16 + 32 + 64 + 64 + 64 == 243


def test_hypercolumn_shape_and_determinism():
    rng = np.random.default_rng(0)
    img = Tensor(rng.random((3, 16, 16)))
    bb = small_backbone()
    a = rf.hypercolumn(img, bb)
    assert a.hypercolumn.shape == (3 + sum(SMALL_PLAN), 16, 16)
    assert all(level.shape[1:] == (16, 16) for level in a.levels)
    bb2 = small_backbone()
    b = rf.hypercolumn(img, bb2)
    assert np.array_equal(a.hypercolumn.data, b.hypercolumn.data)


def test_hypercolumn_gradient_to_image_not_backbone():
    rng = np.random.default_rng(1)
    img = Tensor(rng.random((3, 8, 8)), requires_grad=True)
    bb = small_backbone()

    def make_loss():
        return nm.tsum(nm.tabs(rf.hypercolumn(img, bb).hypercolumn))

    check_gradients(make_loss, [img], tol=1e-3, sample=30)
    for _, t in bb.named_tensors():
        assert t.grad is None and not t.requires_grad


# -- squeeze-and-excitation ---------------------------------------------------------


def se_params(c, r, rng, w2_bias=0.0):
    return (Tensor(rng.standard_normal((c // r, c))), Tensor(np.zeros(c // r)),
            Tensor(rng.standard_normal((c, c // r))), Tensor(np.full(c, w2_bias)))


def test_se_saturated_gate_keeps_input():
    rng = np.random.default_rng(2)
    f = Tensor(rng.random((8, 4, 4)))
    w1, b1, w2, b2 = se_params(8, 4, rng, w2_bias=50.0)
    w2.data[:] = 0  # logits = large positive bias only
    out = rf.se_reweight(f, w1, b1, w2, b2)
    np.testing.assert_allclose(out.data, f.data, rtol=1e-6)


def test_se_zero_logits_halve_channels():
    f = Tensor(np.random.default_rng(3).random((8, 4, 4)))
    zeros = (Tensor(np.zeros((2, 8))), Tensor(np.zeros(2)),
             Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))
    out = rf.se_reweight(f, *zeros)
    np.testing.assert_allclose(out.data, 0.5 * f.data, atol=1e-12)


def test_se_gates_strictly_inside_unit_interval():
    rng = np.random.default_rng(4)
    for trial in range(10):
        f = Tensor(rng.random((8, 5, 5)))
        out = rf.se_reweight(f, *se_params(8, 4, rng))
        assert out.shape == f.shape
        ratios = out.data / np.where(f.data == 0, 1, f.data)
        gates = np.unique(np.round(ratios[f.data != 0], 12))
        assert np.all((out.data ** 2).sum(axis=(1, 2)) <=
                      (f.data ** 2).sum(axis=(1, 2)))
        assert np.all((gates > 0) & (gates < 1))


# -- spatial pooling pyramid -----------------------------------------------------------


def test_spp_constant_input_stays_constant():
    c = 0.37
    f = Tensor(np.full((4, 8, 8), c))
    rng = np.random.default_rng(5)
    fuse_w = Tensor(rng.standard_normal((4, 16, 1, 1)))
    fuse_b = Tensor(np.zeros(4))
    out = rf.spp(f, fuse_w, fuse_b).data
    for ch in out:
        np.testing.assert_allclose(ch, ch[0, 0], atol=1e-9)


def test_spp_output_spatial_size():
    rng = np.random.default_rng(6)
    f = Tensor(rng.random((4, 12, 20)))
    out = rf.spp(f, Tensor(rng.standard_normal((6, 16, 1, 1))), Tensor(np.zeros(6)))
    assert out.shape == (6, 12, 20)


def test_spp_prefusion_channel_arithmetic():
    # scale set {1,2,4} concatenated with the input gives 4C channels
    assert (1 + len(rf.SPP_GRIDS)) * 5 == 20


def test_spp_rejects_tiny_maps():
    with pytest.raises(ShapeError):
        rf.spp(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((2, 8, 1, 1))),
               Tensor(np.zeros(2)))


# -- refine ------------------------------------------------------------------------------


def test_refine_zero_init_is_identity_on_i1():
    rng = np.random.default_rng(7)
    img = rng.random((16, 16, 3))
    i1 = Tensor(rng.random((16, 16, 3)))
    mask = rng.random((16, 16))
    w = small_weights()
    out = rf.refine(img, i1, mask, w, small_backbone())
    assert np.array_equal(out.data, i1.data)


def test_refine_output_shape():
    rng = np.random.default_rng(8)
    w = small_weights()
    w.res_w.data[:] = 0.01 * rng.standard_normal(w.res_w.shape)
    out = rf.refine(rng.random((16, 24, 3)), Tensor(rng.random((16, 24, 3))),
                    rng.random((16, 24)), w, small_backbone())
    assert out.shape == (16, 24, 3)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_refine_end_to_end_gradients():
    rng = np.random.default_rng(9)
    w = small_weights(seed=10)
    # randomize the residual head: at exact zero all upstream weight
    # gradients vanish and the check would be vacuous
    w.res_w.data[:] = 0.05 * rng.standard_normal(w.res_w.shape)
    w.res_b.data[:] = 0.05 * rng.standard_normal(3)
    img = rng.random((16, 16, 3))
    i1 = Tensor(0.2 + 0.6 * rng.random((16, 16, 3)))
    mask = rng.random((16, 16))
    bb = small_backbone()
    tgt = Tensor(rng.random((16, 16, 3)))

    def make_loss():
        out = rf.refine(img, i1, mask, w, bb)
        d = nm.add(out, nm.mul(tgt, -1.0))
        return nm.tmean(nm.mul(d, d))

    params = [t for _, t in w.named_parameters()]
    check_gradients(make_loss, params, tol=1e-3, sample=25, seed=11)
    for _, t in bb.named_tensors():
        assert t.grad is None


def test_backbone_weight_file_override(tmp_path):
    from docshadow.pipeline import Checkpoint, save_checkpoint
    bb = small_backbone(seed=3)
    tensors = {name: t.data.astype(np.float32) for name, t in bb.named_tensors()}
    path = str(tmp_path / "bb.ckpt")
    save_checkpoint(Checkpoint(version=1, hyper={}, tensors=tensors), path)
    spec = rf.BackboneSpec(channels=SMALL_PLAN, seed=999, weight_file=path)
    bb2 = rf.Backbone(spec)
    for (_, a), (_, b) in zip(bb.named_tensors(), bb2.named_tensors()):
        np.testing.assert_allclose(a.data, b.data, atol=1e-7)
