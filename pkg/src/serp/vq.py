"""VASP: nearest-neighbour codebook quantisation between the transformer
encoder and decoder, trained with straight-through gradients."""

from __future__ import annotations

import numpy as np

from .diffcore import F, Module, Parameter
from .diffcore.tensor import Tensor, straight_through
from .losses import DEFAULT_VQ_ALPHA, DEFAULT_VQ_BETA, chamfer_l2, vq_total_loss
from .transformer import TransformerAE, TransformerConfig

__all__ = ["Codebook", "VASP", "quantize", "straight_through", "nearest_code"]

_CHUNK = 1 << 20


class Codebook(Module):
    def __init__(self, size, dim, seed=0):
        if size < 2:
            raise ValueError("a codebook needs at least two entries")
        rng = np.random.default_rng(seed)
        self.embeddings = Parameter(rng.uniform(-1.0 / size, 1.0 / size, (size, dim)).astype(np.float32))

    @property
    def size(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


def nearest_code(z, embeddings):
    """argmin_j |z - e_j|^2 per row of ``z`` (lowest index on ties)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    rows = max(1, _CHUNK // (e.shape[0] * e.shape[1]))
    for i in range(0, flat.shape[0], rows):
        d = ((flat[i : i + rows, None, :] - e[None, :, :]) ** 2).sum(-1)
        out[i : i + rows] = d.argmin(axis=1)
    return out.reshape(z.shape[:-1])


def quantize(z_e, codebook):
    """Replace each row of ``z_e`` by its nearest codebook entry.

    Returns ``(z_q, indices)``. ``z_q`` is a gather from the embedding table,
    so its rows are bitwise copies of codebook rows and gradients reaching it
    flow to the selected embeddings only.
    """
    table = codebook.embeddings if isinstance(codebook, Codebook) else codebook
    if z_e.shape[-1] != table.shape[-1]:
        raise ValueError(f"quantize: width {z_e.shape[-1]} != codebook width {table.shape[-1]}")
    data = z_e.data if isinstance(z_e, Tensor) else z_e
    idx = nearest_code(data, table.data)
    return F.take(table, idx, axis=0), idx


class VASP(Module):
    """Transformer autoencoder with a codebook bottleneck on every encoder token."""

    def __init__(self, config=None, codebook_size=1024, seed=0, alpha=DEFAULT_VQ_ALPHA, beta=DEFAULT_VQ_BETA):
        self.config = config or TransformerConfig()
        self.alpha = alpha
        self.beta = beta
        self.transformer = TransformerAE(self.config, seed=seed)
        self.codebook = Codebook(codebook_size, self.config.latent, seed=seed + 1)
        self.transformer.assign_names(TransformerAE.prefix)
        self.codebook.assign_names("vasp.codebook.")

    @property
    def feature_dim(self):
        return self.config.latent

    def named_parameters(self, prefix=None):
        # fixed namespaces, independent of attribute names
        yield from self.transformer.named_parameters(TransformerAE.prefix)
        yield from self.codebook.named_parameters("vasp.codebook.")

    def load_state_dict(self, state, prefix=None, strict=True):
        self.transformer.load_state_dict(state, TransformerAE.prefix, strict)
        self.codebook.load_state_dict(state, "vasp.codebook.", strict)

    def forward_parts(self, patches, centers):
        tr = self.transformer
        z_e = tr.encode(tr.embed(patches, centers))
        z_q, idx = quantize(z_e, self.codebook)
        pred = tr.reconstruct_patches(tr.decode(straight_through(z_e, z_q)))
        return pred, z_e, z_q, idx

    def forward(self, patches, centers):
        return self.forward_parts(patches, centers)[0]

    def pretrain_loss(self, patches, centers, targets, alpha=None, beta=None, return_indices=False):
        pred, z_e, z_q, idx = self.forward_parts(patches, centers)
        rec = chamfer_l2(np.asarray(targets, dtype=np.float32), pred).mean()
        alpha = self.alpha if alpha is None else alpha
        beta = self.beta if beta is None else beta
        out = vq_total_loss(rec, z_e, z_q, alpha, beta)
        return (out, idx) if return_indices else out

    def frozen_quantization_loss(self, patches, centers, targets, indices, z_e0, z_q0, alpha=None, beta=None):
        """Differentiable stand-in for :meth:`pretrain_loss` around a base point.

        ``indices``, ``z_e0`` and ``z_q0`` are recorded at the base parameters.
        The code choice, the offset ``z_q0 - z_e0`` and every stop-gradient
        argument are frozen there, so this function has the same value at the
        base point and its true derivative is what the straight-through
        backward pass of :meth:`pretrain_loss` reports.
        """
        tr = self.transformer
        z_e0, z_q0 = np.asarray(z_e0), np.asarray(z_q0)
        z_e = tr.encode(tr.embed(patches, centers))
        e = F.take(self.codebook.embeddings, np.asarray(indices), axis=0)
        pred = tr.reconstruct_patches(tr.decode(z_e + (z_q0 - z_e0)))
        rec = chamfer_l2(np.asarray(targets, dtype=np.float32), pred).mean()
        alpha = self.alpha if alpha is None else alpha
        beta = self.beta if beta is None else beta
        d_code = z_e0 - e
        d_commit = z_e - z_q0
        codebook = (d_code * d_code).sum(axis=-1).mean()
        commit = (d_commit * d_commit).sum(axis=-1).mean()
        return rec + codebook * alpha + commit * beta

    def representation(self, patches, centers):
        return self.transformer.representation(patches, centers)

    def encoder_parameters(self):
        return self.transformer.encoder_parameters()


def vasp_forward(patches, centers, targets, model, alpha=None, beta=None):
    """VASP loss breakdown with optional overrides of the codebook/commitment weights."""
    return model.pretrain_loss(patches, centers, targets, alpha=alpha, beta=beta)


def utilization(indices, size):
    """Histogram of code usage."""
    return np.bincount(np.asarray(indices).reshape(-1), minlength=size)
