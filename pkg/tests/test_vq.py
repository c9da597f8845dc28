import numpy as np
import pytest

from serp.diffcore import Parameter, tensor
from serp.diffcore.tensor import straight_through
from serp.gradsuite import run_check
from serp.losses import chamfer_l2
from serp.transformer import TransformerConfig
from serp.vq import VASP, Codebook, nearest_code, quantize, utilization

TOY = TransformerConfig(c=3, n=4, d=8, latent=8, encoder_depth=1, decoder_depth=1, heads=2,
                        patch_widths=(8,), pos_hidden=8)


def toy_inputs(rng, b=2):
    return (rng.normal(size=(b, TOY.c, TOY.n, 3)).astype(np.float32),
            rng.normal(size=(b, TOY.c, 3)).astype(np.float32),
            rng.normal(size=(b, TOY.c, TOY.n, 3)).astype(np.float32))


def test_quantize_forced_neighbour():
    book = Parameter(np.array([[0, 0], [1, 1]], np.float32))
    zq, idx = quantize(tensor(np.array([[0.9, 0.8]], np.float32)), book)
    assert list(idx) == [1] and np.array_equal(zq.data, [[1, 1]])


def test_quantize_exact_hit_and_bitwise_rows(rng):
    cb = Codebook(32, 8, seed=1)
    z = rng.normal(size=(65, 8)).astype(np.float32)
    z[3] = cb.embeddings.data[5]
    zq, idx = quantize(tensor(z), cb)
    assert idx[3] == 5 and np.array_equal(zq.data[3], z[3])
    assert np.array_equal(zq.data, cb.embeddings.data[idx])
    d = ((z[:, None, :].astype(np.float64) - cb.embeddings.data[None].astype(np.float64)) ** 2).sum(-1)
    assert np.array_equal(idx, d.argmin(axis=1))


def test_quantize_width_mismatch():
    with pytest.raises(ValueError):
        quantize(tensor(np.zeros((2, 3), np.float32)), Codebook(4, 2))


def test_straight_through_identity_loss():
    z_e = tensor(np.array([[0.3, -1.0]], np.float32), requires_grad=True)
    z_q = tensor(np.array([[1.0, 1.0]], np.float32))
    out = straight_through(z_e, z_q)
    assert np.array_equal(out.data, z_q.data)
    out.sum().backward()
    assert np.array_equal(z_e.grad, np.ones_like(z_e.data))


def test_straight_through_gradient_equals_gradient_at_zq(rng):
    z_e = tensor(rng.normal(size=(5, 4)).astype(np.float32), requires_grad=True)
    zq_data = rng.normal(size=(5, 4)).astype(np.float32)
    w = rng.normal(size=(5, 4)).astype(np.float32)

    def f(x):
        return ((x * x) * w).sum()

    f(straight_through(z_e, tensor(zq_data))).backward()
    at_q = tensor(zq_data.copy(), requires_grad=True)
    f(at_q).backward()
    assert np.array_equal(z_e.grad, at_q.grad)


def test_straight_through_equal_inputs(rng):
    z = rng.normal(size=(3, 2)).astype(np.float32)
    z_e = tensor(z, requires_grad=True)
    out = straight_through(z_e, tensor(z.copy()))
    assert np.array_equal(out.data, z)


def test_vasp_encoder_grad_matches_identity_substitution(rng):
    model = VASP(TOY, codebook_size=16, seed=0)
    patches, centers, targets = toy_inputs(rng)
    out = model.pretrain_loss(patches, centers, targets, alpha=0.0, beta=0.0)
    out.total.backward()
    got = {k: p.grad.copy() for k, p in model.encoder_parameters().items()}
    model.zero_grad()
    # rerun with quantisation replaced by "z_e + constant offset to z_q"
    tr = model.transformer
    z_e = tr.encode(tr.embed(patches, centers))
    z_q, _ = quantize(z_e, model.codebook)
    pred = tr.reconstruct_patches(tr.decode(z_e + (z_q.data - z_e.data)))
    chamfer_l2(targets, pred).mean().backward()
    # z_e + (z_q - z_e) equals z_q only up to f32 round-off, hence allclose
    for k, p in model.encoder_parameters().items():
        assert np.allclose(got[k], p.grad, rtol=1e-4, atol=1e-6), k


def test_vasp_zero_weights_give_zero_codebook_grad(rng):
    model = VASP(TOY, codebook_size=16, seed=0)
    patches, centers, targets = toy_inputs(rng)
    model.pretrain_loss(patches, centers, targets, alpha=0.0, beta=0.0).total.backward()
    g = model.codebook.embeddings.grad
    assert g is None or np.all(g == 0)


def test_vasp_exact_codes_leave_only_reconstruction(rng):
    model = VASP(TOY, codebook_size=64, seed=0)
    patches, centers, targets = toy_inputs(rng, b=1)
    tr = model.transformer
    z = tr.encode(tr.embed(patches, centers)).data.reshape(-1, TOY.latent)
    model.codebook.embeddings.data[: len(z)] = z
    out = model.pretrain_loss(patches, centers, targets)
    f = out.as_floats()
    assert f["codebook"] == 0 and f["commit"] == 0
    assert f["total"] == pytest.approx(f["chamfer"], abs=1e-7)


def test_alpha_term_pulls_codes_toward_encoder(rng):
    model = VASP(TOY, codebook_size=16, seed=0)
    patches, centers, targets = toy_inputs(rng)
    out, idx = model.pretrain_loss(patches, centers, targets, alpha=1.0, beta=0.0, return_indices=True)
    z_e = model.transformer.encode(model.transformer.embed(patches, centers)).data
    before = np.linalg.norm(z_e - model.codebook.embeddings.data[idx])
    out.total.backward()
    model.codebook.embeddings.data -= 0.1 * model.codebook.embeddings.grad
    after = np.linalg.norm(z_e - model.codebook.embeddings.data[idx])
    assert after < before


def test_indices_deterministic(rng):
    model = VASP(TOY, codebook_size=16, seed=0)
    patches, centers, _ = toy_inputs(rng)
    a = model.forward_parts(patches, centers)[3]
    b = model.forward_parts(patches, centers)[3]
    assert np.array_equal(a, b)


def test_vasp_short_training_uses_codes_and_descends():
    from serp.diffcore import AdamW

    rng = np.random.default_rng(0)
    model = VASP(TOY, codebook_size=32, seed=0)
    patches, centers, targets = toy_inputs(rng, b=8)
    opt = AdamW(dict(model.named_parameters()), lr=3e-3, weight_decay=0.0)
    losses, used = [], set()
    for _ in range(200):
        opt.zero_grad()
        out, idx = model.pretrain_loss(patches, centers, targets, return_indices=True)
        out.total.backward()
        opt.step()
        losses.append(float(out.total.data))
        used = set(np.unique(idx))
    assert len(used) >= 2
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_codebook_init_range_and_utilization():
    cb = Codebook(32, 4, seed=3)
    assert np.abs(cb.embeddings.data).max() <= 1 / 32
    assert list(utilization([0, 0, 2], 4)) == [2, 0, 1, 0]
    assert nearest_code(np.zeros((1, 4)), cb.embeddings.data).shape == (1,)


@pytest.mark.parametrize("name", ["straight_through", "vq_total_loss", "vasp_loss"])
def test_vq_gradient_checks(name):
    assert run_check(name, seed=0).passed
