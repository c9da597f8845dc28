"""Parameter containers and the layers the SeRP models are assembled from."""

from __future__ import annotations

import numpy as np

from . import tensor as F
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ("trainable",)

    def __init__(self, data, name=None, trainable=True):
        super().__init__(np.array(data, dtype=getattr(data, "dtype", DEFAULT_DTYPE)), True, name)
        self.trainable = trainable


class Module:
    """Tree of parameters and sub-modules, discovered from instance attributes.

    ``prefix`` is the namespace used when no explicit prefix is passed.
    """

    prefix = ""

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}{i}", item

    def named_parameters(self, prefix=None):
        prefix = self.prefix if prefix is None else prefix
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=None):
        """Stamp every parameter with its dotted path."""
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix=None):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=None, strict=True):
        own = dict(self.named_parameters(prefix))
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, bound, shape, dtype=DEFAULT_DTYPE):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, zero_init=False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            self.weight = Parameter(np.zeros((in_dim, out_dim), DEFAULT_DTYPE))
        else:
            self.weight = Parameter(_uniform(rng, 1.0 / np.sqrt(in_dim), (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim, DEFAULT_DTYPE)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim, DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(dim, DEFAULT_DTYPE))

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


_ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu, "tanh": F.tanh}


class MLP(Module):
    """Stack of Linear layers with an activation between them (none after the last)."""

    def __init__(self, widths, rng, activation="relu", final_activation=False):
        if len(widths) < 2:
            raise ValueError("MLP needs at least an input and an output width")
        self.widths = list(widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.activation = activation
        self.final_activation = final_activation

    def forward(self, x):
        act = _ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = act(x)
        return x


class SharedMLPMax(Module):
    """Per-point shared MLP followed by a coordinatewise max over the point axis.

    Input has shape ``(..., m, widths[0])``; output ``(..., widths[-1])``.
    The result does not depend on the order of the ``m`` points.
    """

    def __init__(self, widths, rng, activation="relu"):
        self.mlp = MLP(widths, rng, activation=activation)

    def forward(self, points, return_local=None):
        if points.shape[-2] == 0:
            raise ValueError("shared_mlp_max: empty point set")
        if return_local is None:
            return self.mlp(points).max(axis=-2)
        act = _ACTIVATIONS[self.mlp.activation]
        x = points
        local = None
        last = len(self.mlp.layers) - 1
        for i, layer in enumerate(self.mlp.layers):
            x = layer(x)
            if i < last:
                x = act(x)
            if i == return_local:
                local = x
        return x.max(axis=-2), local


class MultiHeadSelfAttention(Module):
    """Unmasked multi-head self-attention: every token attends to every token."""

    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"attention width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        # no qkv bias: the key bias cancels in the softmax and only adds round-off
        self.qkv = Linear(dim, 3 * dim, rng, bias=False)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x, return_weights=False):
        *lead, s, dim = x.shape
        h = self.heads
        dh = dim // h
        qkv = self.qkv(x).reshape(tuple(lead) + (s, 3, h, dh))
        nlead = len(lead)
        # (..., 3, h, s, dh)
        qkv = qkv.transpose(*range(nlead), nlead + 1, nlead + 2, nlead, nlead + 3)
        q = qkv[(Ellipsis, 0, slice(None), slice(None), slice(None))]
        k = qkv[(Ellipsis, 1, slice(None), slice(None), slice(None))]
        v = qkv[(Ellipsis, 2, slice(None), slice(None), slice(None))]
        scores = (q @ F.swapaxes(k, -1, -2)) * x.dtype.type(1.0 / np.sqrt(dh))
        weights = F.softmax(scores, axis=-1)
        out = weights @ v  # (..., h, s, dh)
        out = F.swapaxes(out, -2, -3).reshape(tuple(lead) + (s, dim))
        out = self.proj(out)
        if return_weights:
            return out, weights
        return out


class AttentionBlock(Module):
    """Pre-LayerNorm transformer block: attention and a 4x GELU MLP, each residual."""

    def __init__(self, dim, heads, rng, mlp_ratio=4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, mlp_ratio * dim, dim], rng, activation="gelu")

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
