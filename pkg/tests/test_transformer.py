import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serp.geometry import PointCloud, tokenize
from serp.gradsuite import run_check
from serp.transformer import TransformerAE, TransformerConfig

TINY = TransformerConfig(c=4, n=8, d=16, latent=16, encoder_depth=1, decoder_depth=1, heads=2,
                         patch_widths=(16,), pos_hidden=16)


def tiny_inputs(rng, cfg=TINY):
    return (rng.normal(size=(cfg.c, cfg.n, 3)).astype(np.float32),
            rng.normal(size=(cfg.c, 3)).astype(np.float32))


def test_full_scale_shapes():
    cfg = TransformerConfig()
    m = TransformerAE(cfg, seed=0)
    rng = np.random.default_rng(0)
    ps = tokenize(PointCloud(rng.normal(size=(1024, 3))), cfg.c, cfg.n)
    tokens = m.embed(ps.patches, ps.centers)
    assert tokens.shape == (65, 768)
    lat = m.encode(tokens)
    assert lat.shape == (65, 384)
    dec = m.decode(lat)
    assert dec.shape == (65, 384)
    assert m.reconstruct_patches(dec).shape == (64, 32, 3)
    assert m.representation(ps.patches, ps.centers).shape == (384,)


def test_embed_patch_permutation(rng):
    m = TransformerAE(TINY, seed=1)
    p, c = tiny_inputs(rng)
    perm = rng.permutation(TINY.c)
    a = m.embed(p, c).data
    b = m.embed(p[perm], c[perm]).data
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1:][perm], b[1:])


def test_encode_cls_only_is_finite():
    m = TransformerAE(TINY, seed=0)
    out = m.encode(np.random.default_rng(0).normal(size=(1, TINY.token_dim)).astype(np.float32))
    assert out.shape == (1, TINY.latent) and np.all(np.isfinite(out.data))


def test_encoder_equivariance_and_loss_invariance(rng):
    m = TransformerAE(TINY, seed=2)
    p, c = tiny_inputs(rng)
    t = rng.normal(size=p.shape).astype(np.float32)
    perm = rng.permutation(TINY.c)
    out = m(p, c).data
    out_p = m(p[perm], c[perm]).data
    assert np.abs(out[perm] - out_p).max() < 1e-5
    l1 = float(m.pretrain_loss(p, c, t).total.data)
    l2 = float(m.pretrain_loss(p[perm], c[perm], t[perm]).total.data)
    assert l1 == pytest.approx(l2, rel=1e-6)


def test_width_errors():
    m = TransformerAE(TINY)
    with pytest.raises(ValueError):
        m.encode(np.zeros((3, 5), np.float32))
    with pytest.raises(ValueError):
        m.decode(np.zeros((3, 5), np.float32))
    with pytest.raises(ValueError):
        m.reconstruct_patches(np.zeros((3, 5), np.float32))


def test_zero_latent_is_deterministic_and_zero_head_gives_zero():
    m = TransformerAE(TINY)
    z = np.zeros((3, TINY.latent), np.float32)
    assert np.array_equal(m.decode(z).data, m.decode(z).data)
    m.head.weight.data[:] = 0
    m.head.bias.data[:] = 0
    assert np.all(m.reconstruct_patches(np.zeros((3, TINY.d), np.float32)).data == 0)


def test_no_attention_mask_anywhere(rng):
    m = TransformerAE(TINY, seed=0)
    p, c = tiny_inputs(rng)
    x = m.in_proj(m.embed(p, c))
    _, w = m.encoder_blocks[0].attn(m.encoder_blocks[0].norm1(x), return_weights=True)
    assert np.all(w.data > 0)


def test_copy_model_zero_loss(rng):
    m = TransformerAE(TINY)
    t = rng.normal(size=(TINY.c, TINY.n, 3)).astype(np.float32)
    assert float(m.pretrain_loss(*tiny_inputs(rng), t).total.data) > 0
    from serp.losses import chamfer_l2

    assert float(chamfer_l2(t, t).mean().data) == 0.0


def test_all_parameters_receive_gradient(rng):
    m = TransformerAE(TINY, seed=3)
    p = rng.normal(size=(2, TINY.c, TINY.n, 3)).astype(np.float32)
    c = rng.normal(size=(2, TINY.c, 3)).astype(np.float32)
    t = rng.normal(size=p.shape).astype(np.float32)
    m.pretrain_loss(p, c, t).total.backward()
    for name, prm in m.named_parameters():
        assert prm.grad is not None and np.any(prm.grad != 0), name


def test_representation_deterministic(rng):
    m = TransformerAE(TINY)
    p, c = tiny_inputs(rng)
    assert np.array_equal(m.representation(p, c).data, m.representation(p, c).data)


@settings(max_examples=8, deadline=None)
@given(st.integers(4, 64), st.integers(8, 32), st.integers(0, 1000))
def test_shape_contract(c, n, seed):
    cfg = TransformerConfig(c=c, n=n, d=8, latent=8, encoder_depth=1, decoder_depth=1, heads=2,
                            patch_widths=(8,), pos_hidden=8)
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(size=(max(c, n) + 16, 3)))
    ps = tokenize(cloud, c, n, seed=seed)
    assert TransformerAE(cfg, seed=seed)(ps.patches, ps.centers).shape == (c, n, 3)


@pytest.mark.parametrize("name", ["transformer_embed", "transformer_decode", "transformer_loss"])
def test_transformer_gradient_checks(name):
    assert run_check(name, seed=0).passed
