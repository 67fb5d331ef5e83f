import numpy as np
import pytest

from docshadow import numerics as nm
from docshadow import remapper as rm
from docshadow.numerics import Adam, ShapeError, Tensor

from fdcheck import check_gradients


@pytest.fixture(autouse=True)
def f64():
    with nm.precision("float64"):
        yield


def tiny_weights(seed=0, dim=8, layers=1, heads=2, patch=8, max_grid=4):
    cfg = rm.RemapperConfig(patch=patch, dim=dim, layers=layers, heads=heads,
                            max_grid=max_grid)
    return rm.RemapperWeights(cfg, np.random.default_rng(seed))


def rand_img(rng, h=16, w=16):
    return rng.random((h, w, 3))


# -- tokenize / fold ---------------------------------------------------------------


def test_tokenize_count():
    w = tiny_weights()
    tok = rm.tokenize(np.zeros((8, 8, 3)), w)
    assert tok.raw.shape == (1, 192)
    tok = rm.tokenize(np.zeros((16, 16, 3)), w)
    assert tok.raw.shape == (4, 192) and tok.grid == (2, 2)


def test_tokenize_fold_round_trip_exact():
    rng = np.random.default_rng(0)
    img = rand_img(rng, 24, 16)
    w = tiny_weights()
    tok = rm.tokenize(img, w)
    back = rm.fold(tok.raw.data, tok.grid, 8)
    assert np.array_equal(back, img)


def test_tokenize_zero_weights_zero_embeddings():
    w = tiny_weights()
    w.patch_proj.data[:] = 0
    w.patch_bias.data[:] = 0
    w.pos_table.data[:] = 0
    tok = rm.tokenize(np.random.default_rng(1).random((16, 16, 3)), w)
    assert np.all(tok.embeddings.data == 0)


def test_tokenize_indivisible_size():
    with pytest.raises(ShapeError):
        rm.tokenize(np.zeros((10, 16, 3)), tiny_weights())


# -- partition ----------------------------------------------------------------------


def test_partition_all_ones():
    labels = rm.partition(np.ones((16, 16)), 8)
    assert labels.shadow.all() and len(labels.shadow) == 4


def test_partition_all_zeros():
    labels = rm.partition(np.zeros((16, 16)), 8)
    assert not labels.shadow.any()


def test_partition_top_half():
    mask = np.zeros((8, 8))
    mask[:4] = 1.0
    labels = rm.partition(mask, 4)
    assert labels.shadow.sum() == 2 and (~labels.shadow).sum() == 2
    np.testing.assert_allclose(labels.coverage, [1, 1, 0, 0])


def test_partition_tie_goes_to_shadow():
    mask = np.zeros((4, 4))
    mask[:2] = 1.0  # coverage exactly 0.5
    labels = rm.partition(mask, 4)
    assert labels.shadow.all()


def test_partition_idempotent_and_counts():
    rng = np.random.default_rng(2)
    mask = rng.random((16, 16))
    a = rm.partition(mask, 8)
    b = rm.partition(mask, 8)
    assert np.array_equal(a.shadow, b.shadow)
    assert a.shadow.sum() + (~a.shadow).sum() == 4


# -- encode ---------------------------------------------------------------------------


def test_encode_shape_preserved():
    rng = np.random.default_rng(3)
    w = tiny_weights()
    for size in ((8, 8), (16, 24)):
        img = rand_img(rng, *size)
        tok = rm.tokenize(img, w)
        labels = rm.partition(np.ones(size), 8)
        out = rm.encode(tok, labels, w)
        assert out.shape == tok.embeddings.shape


def test_encode_attention_rows_sum_to_one():
    rng = np.random.default_rng(4)
    w = tiny_weights(layers=2)
    img = rand_img(rng, 16, 16)
    tok = rm.tokenize(img, w)
    attn = rm.attention_weights(tok.embeddings, w.blocks[0], w.cfg.heads)
    np.testing.assert_allclose(attn.sum(axis=-1), np.ones(attn.shape[:2]), atol=1e-6)


def test_encode_token_permutation_equivariance():
    rng = np.random.default_rng(5)
    w = tiny_weights()
    img = rand_img(rng, 16, 16)
    mask = (rng.random((16, 16)) > 0.5).astype(float)
    tok = rm.tokenize(img, w)
    labels = rm.partition(mask, 8)
    out = rm.encode(tok, labels, w).data

    perm = np.array([2, 0, 3, 1])
    tok_p = rm.PatchTokens(raw=Tensor(tok.raw.data[perm]),
                           embeddings=Tensor(tok.embeddings.data[perm]),
                           grid=tok.grid, positions=tok.positions[perm])
    labels_p = rm.DomainLabels(shadow=labels.shadow[perm],
                               coverage=labels.coverage[perm])
    out_p = rm.encode(tok_p, labels_p, w).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-6)


def test_encode_deterministic():
    rng = np.random.default_rng(6)
    w = tiny_weights()
    img = rand_img(rng)
    tok = rm.tokenize(img, w)
    labels = rm.partition(np.ones((16, 16)), 8)
    a = rm.encode(tok, labels, w).data
    b = rm.encode(rm.tokenize(img, w), labels, w).data
    assert np.array_equal(a, b)


# -- region_embed ------------------------------------------------------------------------


def test_region_embed_single_tokens():
    enc = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    labels = rm.DomainLabels(shadow=np.array([True, False]),
                             coverage=np.array([1.0, 0.0]))
    r = rm.region_embed(enc, labels)
    np.testing.assert_array_equal(r.shadow.data, [1.0, 2.0])
    np.testing.assert_array_equal(r.free.data, [3.0, 4.0])
    assert not r.shadow_empty and not r.free_empty


def test_region_embed_mean_of_two():
    u, v = np.array([1.0, 5.0]), np.array([3.0, -1.0])
    enc = Tensor(np.stack([u, v, np.array([9.0, 9.0])]))
    labels = rm.DomainLabels(shadow=np.array([True, True, False]),
                             coverage=np.zeros(3))
    r = rm.region_embed(enc, labels)
    np.testing.assert_allclose(r.shadow.data, (u + v) / 2, atol=1e-12)


def test_region_embed_empty_group():
    enc = Tensor(np.ones((2, 3)))
    labels = rm.DomainLabels(shadow=np.array([False, False]),
                             coverage=np.zeros(2))
    r = rm.region_embed(enc, labels)
    assert r.shadow_empty and np.array_equal(r.shadow.data, np.zeros(3))


# -- remap ------------------------------------------------------------------------------


def full_regions(dim, rng):
    return rm.RegionEmbeddings(shadow=Tensor(rng.standard_normal(dim)),
                               free=Tensor(rng.standard_normal(dim)),
                               shadow_empty=False, free_empty=False)


def test_remap_zero_mask_is_identity():
    rng = np.random.default_rng(7)
    w = tiny_weights()
    img = rand_img(rng)
    out = rm.remap(img, np.zeros((16, 16)), full_regions(8, rng), w)
    assert np.array_equal(out.data, img)


def test_remap_full_mask_is_mlp_output():
    rng = np.random.default_rng(8)
    w = tiny_weights()
    img = rand_img(rng)
    out = rm.remap(img, np.ones((16, 16)), full_regions(8, rng), w).data
    assert np.all((out > 0) & (out < 1))  # pure sigmoid output
    assert not np.array_equal(out, img)


def test_remap_empty_shadow_passthrough():
    rng = np.random.default_rng(9)
    w = tiny_weights()
    img = rand_img(rng)
    regions = rm.RegionEmbeddings(shadow=Tensor(np.zeros(8)),
                                  free=Tensor(np.zeros(8)),
                                  shadow_empty=True, free_empty=False)
    out = rm.remap(img, np.ones((16, 16)), regions, w)
    assert np.array_equal(out.data, img)


def test_remap_output_in_unit_range():
    rng = np.random.default_rng(10)
    w = tiny_weights()
    img = rand_img(rng)
    mask = rng.random((16, 16))
    out = rm.run(img, mask, w).data
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_remap_can_fit_uniform_attenuation():
    # there exist MLP weights recovering a uniform-attenuation shadow: fit
    # the tiny MLP on one image's shadow pixels and check the residual
    rng = np.random.default_rng(11)
    from docshadow.dataio import SynthConfig, synth_sample
    trip = synth_sample(SynthConfig(height=16, width=16, s_min=0.5, s_max=0.5,
                                    sigma=0.0, seed=3), np.random.default_rng(3))
    w = tiny_weights(seed=12)
    regions = full_regions(8, rng)
    inside = trip.mask == 1.0
    target = trip.target[inside]
    params = [t for pair in w.mlp for t in pair]
    opt = Adam(params, lr=3e-3)
    for _ in range(400):
        out = rm.remap(trip.input, trip.mask, regions, w)
        diff = nm.add(out, nm.mul(Tensor(trip.target), -1.0))
        loss = nm.tmean(nm.mul(diff, diff))
        opt.zero_grad()
        loss.backward()
        opt.step()
    out = rm.remap(trip.input, trip.mask, regions, w).data
    assert np.max(np.abs(out[inside] - target)) < 1e-2


# -- end-to-end gradient -------------------------------------------------------------------


def test_remapper_end_to_end_gradients():
    rng = np.random.default_rng(13)
    w = tiny_weights(seed=14)
    img = rand_img(rng, 16, 16)
    mask = np.zeros((16, 16))
    mask[:8] = 1.0
    tgt = Tensor(rng.random((16, 16, 3)))

    def make_loss():
        out = rm.run(img, mask, w)
        d = nm.add(out, nm.mul(tgt, -1.0))
        return nm.tmean(nm.mul(d, d))

    params = [t for _, t in w.named_parameters()]
    check_gradients(make_loss, params, tol=1e-3, sample=40, seed=15)
