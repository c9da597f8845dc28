"""Registry of finite-difference gradient checks.

Each builder takes a numpy Generator and returns a :class:`Problem`.
Ops and model components are held to ``1e-3``; whole-model losses to
``1e-2``, the looser bound for deep f32 graphs. ``dtype="float64"``
promotes every parameter; ops and components then use ``1e-5``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffcore import F, AttentionBlock, Linear, Parameter, SharedMLPMax, finite_diff_check
from .geometry import PointCloud, perturb, tokenize
from .losses import chamfer_l2, delta_mse_loss, perturbation_cls_loss, vq_total_loss
from .pointnet import PointNetConfig, SeRPPointNet
from .transformer import TransformerAE, TransformerConfig
from .vq import VASP

OP_TOL = 1e-3
MODEL_TOL = 1e-2
F64_TOL = 1e-5
# in f64 the finite differences cannot resolve the smallest model gradients
# (around 1e-8) to better than about 1e-3 relative
MODEL_F64_TOL = 1e-3

REGISTRY = {}


@dataclass
class Problem:
    loss_fn: object
    params: list
    numeric_fn: object = None


def register(name, kind="op"):
    def deco(build):
        REGISTRY[name] = (build, kind)
        return build

    return deco


def _uniform(low=-1.0, high=1.0):
    return lambda rng, shape: rng.uniform(low, high, size=shape)


def _signed(margin=0.1):
    # keeps inputs clear of the kink at zero
    return lambda rng, shape: rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_problem(fn, *inputs):
    """Random inputs, scored through a fixed random linear functional of the output."""

    def build(rng):
        params = [
            Parameter(sample(rng, shape).astype(np.float32), name=f"in{i}")
            for i, (shape, sample) in enumerate(inputs)
        ]
        weights = rng.normal(size=fn(*params).shape).astype(np.float32)

        def loss():
            return (fn(*params) * weights).sum()

        return Problem(loss, params)

    return build


U = _uniform()
_CHAMFER_TARGET = np.linspace(-1.0, 1.0, 18, dtype=np.float32).reshape(6, 3)
_CLS_MASK = np.array([1, 0, 0, 1, 1, 0, 0, 0], dtype=bool)

_OPS = {
    "add": (lambda a, b: a + b, ((3, 4), U), ((4,), U)),
    "sub": (lambda a, b: a - b, ((3, 4), U), ((3, 1), U)),
    "mul": (lambda a, b: a * b, ((3, 4), U), ((3, 4), U)),
    "div": (lambda a, b: a / b, ((3, 4), U), ((3, 4), _uniform(0.5, 2.0))),
    "power": (lambda a: F.power(a, 3.0), ((3, 4), U)),
    "exp": (F.exp, ((3, 4), U)),
    "log": (F.log, ((3, 4), _uniform(0.2, 2.0))),
    "sqrt": (F.sqrt, ((3, 4), _uniform(0.2, 2.0))),
    "tanh": (F.tanh, ((3, 4), _uniform(-2.0, 2.0))),
    "relu": (F.relu, ((3, 4), _signed())),
    "gelu": (F.gelu, ((3, 4), _uniform(-3.0, 3.0))),
    "sigmoid": (F.sigmoid, ((3, 4), _uniform(-3.0, 3.0))),
    "softplus": (F.softplus, ((3, 4), _uniform(-3.0, 3.0))),
    "sum": (lambda a: F.sum_(a, axis=1), ((3, 4), U)),
    "mean": (lambda a: F.mean(a, axis=0), ((3, 4), U)),
    "max": (lambda a: F.max_(a, axis=-1), ((3, 5), U)),
    "reshape": (lambda a: F.reshape(a, (2, 6)), ((3, 4), U)),
    "transpose": (lambda a: F.transpose(a, (2, 0, 1)), ((2, 3, 4), U)),
    "swapaxes": (lambda a: F.swapaxes(a, 0, 1), ((2, 3, 4), U)),
    "broadcast_to": (lambda a: F.broadcast_to(a, (5, 3, 4)), ((1, 3, 4), U)),
    "concat": (lambda a, b: F.concat([a, b], axis=-1), ((3, 2), U), ((3, 4), U)),
    "stack": (lambda a, b: F.stack([a, b], axis=1), ((3, 4), U), ((3, 4), U)),
    "getitem": (lambda a: a[1:, ::2], ((3, 4), U)),
    "getitem_advanced": (lambda a: a[np.array([0, 2, 0])], ((3, 4), U)),
    "take": (lambda a: F.take(a, np.array([2, 0, 2, 1]), axis=1), ((3, 4), U)),
    "take_along_axis": (lambda a: F.take_along_axis(a, np.array([[0], [3], [3]]), axis=1), ((3, 4), U)),
    "matmul": (F.matmul, ((2, 3, 4), U), ((4, 5), U)),
    "linear": (F.linear, ((2, 4, 3), U), ((3, 2), U), ((2,), U)),
    "softmax": (lambda a: F.softmax(a, axis=-1), ((3, 5), _uniform(-2.0, 2.0))),
    "log_softmax": (lambda a: F.log_softmax(a, axis=-1), ((3, 5), _uniform(-2.0, 2.0))),
    "layer_norm": (F.layer_norm, ((3, 6), _uniform(-2.0, 2.0)), ((6,), U), ((6,), U)),
    "chamfer_l2": (lambda p: chamfer_l2(_CHAMFER_TARGET, p), ((5, 3), U)),
    "perturbation_cls_loss": (lambda z: perturbation_cls_loss(z, _CLS_MASK), ((8,), _uniform(-3.0, 3.0))),
    "delta_mse_loss": (lambda p: delta_mse_loss(p, np.full((8, 3), 0.25, np.float32)), ((8, 3), U)),
}

for _name, (_fn, *_inputs) in _OPS.items():
    register(_name)(_op_problem(_fn, *_inputs))


@register("straight_through")
def _straight_through(rng):
    z_e = Parameter(rng.uniform(-1, 1, size=(4, 3)).astype(np.float32), name="z_e")
    z_q = rng.uniform(-1, 1, size=(4, 3)).astype(np.float32)
    w = rng.normal(size=(4, 3)).astype(np.float32)
    offset = z_q - z_e.data

    def loss():
        y = F.straight_through(z_e, F.tensor(z_q))
        return (y * y * w).sum()

    def surrogate():
        y = z_e + offset
        return (y * y * w).sum()

    return Problem(loss, [z_e], surrogate)


@register("vq_total_loss")
def _vq_total_loss(rng):
    r, z, e = (Parameter(rng.uniform(-1, 1, size=shape).astype(np.float32), name=n)
               for n, shape in (("rec", (4,)), ("z_e", (5, 4)), ("codes", (5, 4))))
    z0, e0 = z.data.copy(), e.data.copy()

    def loss():
        return vq_total_loss(F.sum_(r * r), z, e, 1.0, 0.25).total

    def surrogate():
        # stop-gradient arguments become constants frozen at the base point
        rec = F.sum_(r * r)
        return rec + F.sum_((e - z0) * (e - z0)) / 5.0 + 0.25 * F.sum_((z - e0) * (z - e0)) / 5.0

    return Problem(loss, [r, z, e], surrogate)


def _module_problem(module, x):
    def build(rng):
        params = [x, *module.parameters()]
        weights = rng.normal(size=module(x).shape).astype(np.float32)
        return Problem(lambda: (module(x) * weights).sum(), params)

    return build


@register("linear_layer")
def _linear_layer(rng):
    x = Parameter(rng.uniform(-1, 1, size=(4, 3)).astype(np.float32), name="x")
    return _module_problem(Linear(3, 2, rng).assign_names("linear."), x)(rng)


@register("attention_block")
def _attention_block(rng):
    x = Parameter(rng.uniform(-1, 1, size=(4, 8)).astype(np.float32), name="x")
    return _module_problem(AttentionBlock(8, 2, rng).assign_names("block."), x)(rng)


@register("shared_mlp_max")
def _shared_mlp_max(rng):
    x = Parameter(rng.uniform(-1, 1, size=(16, 3)).astype(np.float32), name="x")
    return _module_problem(SharedMLPMax([3, 8, 6], rng).assign_names("mlp."), x)(rng)


def _unit_cloud(rng, n):
    v = rng.normal(size=(n, 3))
    return PointCloud((v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32))


def _jitter_biases(model, rng, scale=0.1):
    # zero-initialised biases can park a ReLU input exactly on its kink
    for name, p in model.named_parameters():
        if name.endswith(".bias"):
            p.data = (p.data + rng.normal(0.0, scale, size=p.shape)).astype(p.data.dtype)
    return model


def _pointnet(mode):
    def build(rng):
        cfg = PointNetConfig(global_dim=16, perpoint_dim=8, local_dim=8, fusion_widths=(16, 12, 8, 8),
                             recon_mode=mode)
        model = _jitter_biases(SeRPPointNet(cfg, seed=int(rng.integers(1 << 16))), rng)
        if mode == "delta":
            # a zero head would hide the encoder path from the check
            w = model.rec_head.weight
            w.data = rng.normal(0.0, 0.3, size=w.shape).astype(np.float32)
        clouds = [_unit_cloud(rng, 8) for _ in range(2)]
        recs = [perturb(c, 2, 3, 0.05, seed=i) for i, c in enumerate(clouds)]
        clean = np.stack([c.points for c in clouds])
        pert = np.stack([r.perturbed.points for r in recs])
        mask = np.stack([r.mask for r in recs])
        return Problem(lambda: model.forward_pretrain(pert, clean, mask).total, model.parameters())

    return build


register("pointnet_delta_loss", "model")(_pointnet("delta"))
register("pointnet_cdl2_loss", "model")(_pointnet("cdl2"))


def _token_batch(rng, c=2, n=4):
    cfg = TransformerConfig(c=c, n=n, d=8, latent=8, encoder_depth=1, decoder_depth=1, heads=2,
                            patch_widths=(8,), pos_hidden=8)
    cloud = _unit_cloud(rng, 32)
    rec = perturb(cloud, 2, 4, 0.05, seed=1)
    ps = tokenize(rec.perturbed, c, n, seed=2)
    return cfg, ps, ps.normalize(cloud.points[ps.indices])


@register("transformer_loss", "model")
def _transformer_loss(rng):
    cfg, ps, targets = _token_batch(rng)
    model = _jitter_biases(TransformerAE(cfg, seed=int(rng.integers(1 << 16))), rng)
    return Problem(lambda: model.pretrain_loss(ps.patches, ps.centers, targets).total, model.parameters())


@register("vasp_loss", "model")
def _vasp_loss(rng):
    cfg, ps, targets = _token_batch(rng)
    model = _jitter_biases(VASP(cfg, codebook_size=8, seed=int(rng.integers(1 << 16))), rng)
    # seed codes near the encoder outputs so tokens pick distinct entries;
    # with one shared code the decoder sees identical tokens and its
    # attention gradients vanish exactly, leaving only round-off to compare
    z_first = model.transformer.encode(model.transformer.embed(ps.patches, ps.centers)).data
    table = model.codebook.embeddings
    table.data[: len(z_first)] = z_first + rng.normal(0.0, 0.05, size=z_first.shape).astype(np.float32)
    _, z_e, z_q, idx = model.forward_parts(ps.patches, ps.centers)
    z_e0, z_q0 = z_e.data.copy(), z_q.data.copy()

    def loss():
        return model.pretrain_loss(ps.patches, ps.centers, targets).total

    def surrogate():
        return model.frozen_quantization_loss(ps.patches, ps.centers, targets, idx, z_e0, z_q0)

    return Problem(loss, model.parameters(), surrogate)


def _pointnet_component(method):
    def build(rng):
        cfg = PointNetConfig(global_dim=16, perpoint_dim=8, local_dim=8, fusion_widths=(16, 12, 8, 8))
        model = _jitter_biases(SeRPPointNet(cfg, seed=int(rng.integers(1 << 16))), rng)
        x = Parameter(_unit_cloud(rng, 8).points, name="points")
        fn = getattr(model, method)
        weights = rng.normal(size=fn(x).shape).astype(np.float32)
        return Problem(lambda: (fn(x) * weights).sum(), [x, *model.parameters()])

    return build


register("pointnet_encode_global", "component")(_pointnet_component("encode_global"))
register("pointnet_perpoint_features", "component")(_pointnet_component("perpoint_features"))


@register("transformer_embed", "component")
def _transformer_embed(rng):
    cfg, ps, _ = _token_batch(rng)
    model = _jitter_biases(TransformerAE(cfg, seed=int(rng.integers(1 << 16))), rng)
    weights = rng.normal(size=(cfg.c + 1, cfg.token_dim)).astype(np.float32)
    params = [p for n, p in model.named_parameters() if n.startswith(("transformer.patch_embed", "transformer.pos_embed", "transformer.cls"))]
    return Problem(lambda: (model.embed(ps.patches, ps.centers) * weights).sum(), params)


@register("transformer_decode", "component")
def _transformer_decode(rng):
    cfg, _, _ = _token_batch(rng)
    model = _jitter_biases(TransformerAE(cfg, seed=int(rng.integers(1 << 16))), rng)
    latent = Parameter(rng.normal(size=(cfg.c + 1, cfg.latent)).astype(np.float32), name="latent")
    weights = rng.normal(size=(cfg.c + 1, cfg.d)).astype(np.float32)
    params = [latent] + [p for n, p in model.named_parameters() if n.startswith(("transformer.decoder", "transformer.out_proj"))]
    return Problem(lambda: (model.decode(latent) * weights).sum(), params)


@dataclass
class CheckResult:
    name: str
    kind: str
    seed: int
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def default_tolerance(kind, dtype="float32"):
    if kind == "model":
        return MODEL_F64_TOL if dtype == "float64" else MODEL_TOL
    return F64_TOL if dtype == "float64" else OP_TOL


def run_check(name, seed=0, tolerance=None, dtype="float32", max_coords=24, eps=1e-5):
    build, kind = REGISTRY[name]
    t0 = time.perf_counter()
    problem = build(np.random.default_rng([seed, sum(map(ord, name))]))
    if dtype == "float64":
        for p in problem.params:
            p.data = p.data.astype(np.float64)
    err = finite_diff_check(problem.loss_fn, problem.params, eps=eps, max_coords=max_coords,
                            seed=seed, numeric_fn=problem.numeric_fn,
                            one_sided_fallback=kind != "op")
    tol = default_tolerance(kind, dtype) if tolerance is None else tolerance
    return CheckResult(name, kind, seed, err, tol, time.perf_counter() - t0)


def run_suite(names=None, seeds=(0,), tolerance=None, model_tolerance=None, dtype="float32"):
    """Run checks; ``tolerance`` overrides ops and components, ``model_tolerance`` full losses."""
    names = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradient checks {unknown}")
    out = []
    for n in names:
        tol = model_tolerance if REGISTRY[n][1] == "model" else tolerance
        out.extend(run_check(n, s, tol, dtype) for s in seeds)
    return out
