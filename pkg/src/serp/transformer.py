"""SeRP-Transformer: patch tokens, CLS token, asymmetric encoder-decoder and a
per-patch reconstruction head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import F, AttentionBlock, LayerNorm, Linear, MLP, Module, Parameter, SharedMLPMax, tensor
from .diffcore.tensor import Tensor
from .losses import LossBreakdown, chamfer_l2


@dataclass
class TransformerConfig:
    c: int = 64
    n: int = 32
    d: int = 384
    latent: int = 384
    encoder_depth: int = 12
    decoder_depth: int = 4
    heads: int = 6
    patch_widths: tuple = (128, 256)
    pos_hidden: int = 128

    def __post_init__(self):
        self.patch_widths = tuple(int(w) for w in self.patch_widths)
        if min(self.c, self.n, self.d, self.latent, self.heads) < 1:
            raise ValueError("transformer sizes must be positive")
        if self.latent > 2 * self.d:
            raise ValueError(f"latent width {self.latent} exceeds token width {2 * self.d}")
        if self.d % self.heads or self.latent % self.heads:
            raise ValueError(f"widths d={self.d}, latent={self.latent} must be divisible by heads={self.heads}")

    @property
    def token_dim(self):
        return 2 * self.d

    @classmethod
    def desk(cls, **overrides):
        base = dict(
            d=64, latent=64, encoder_depth=3, decoder_depth=2, heads=4,
            patch_widths=(64, 128), pos_hidden=64,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["patch_widths"] = list(self.patch_widths)
        return d


def _batched(x, ndim):
    x = x if isinstance(x, Tensor) else tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == ndim - 1:
        return x.reshape((1,) + x.shape), True
    return x, False


def _unbatch(x, single):
    return x.reshape(x.shape[1:]) if single else x


class TransformerAE(Module):
    """Embedding, encoder, decoder and head over batches of patch sets."""

    prefix = "transformer."

    def __init__(self, config=None, seed=0):
        self.config = config or TransformerConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.patch_embed = SharedMLPMax([3, *cfg.patch_widths, cfg.d], rng)
        self.pos_embed = MLP([3, cfg.pos_hidden, cfg.d], rng, activation="gelu")
        self.cls_token = Parameter((rng.normal(size=cfg.d) * 0.02).astype(np.float32))
        self.cls_pos = Parameter((rng.normal(size=cfg.d) * 0.02).astype(np.float32))
        self.in_proj = Linear(cfg.token_dim, cfg.latent, rng)
        self.encoder_blocks = [AttentionBlock(cfg.latent, cfg.heads, rng) for _ in range(cfg.encoder_depth)]
        self.encoder_norm = LayerNorm(cfg.latent)
        self.decoder_blocks = [AttentionBlock(cfg.latent, cfg.heads, rng) for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(cfg.latent)
        self.out_proj = Linear(cfg.latent, cfg.d, rng)
        self.head = Linear(cfg.d, 3 * cfg.n, rng)
        self.assign_names(self.prefix)

    @property
    def feature_dim(self):
        return self.config.latent

    def embed(self, patches, centers):
        """``(B, c, n, 3)`` patches and ``(B, c, 3)`` centers -> ``(B, c+1, 2d)`` tokens."""
        cfg = self.config
        p, single = _batched(patches, 4)
        ctr, _ = _batched(centers, 3)
        if p.shape[-1] != 3 or p.shape[:2] != ctr.shape[:2]:
            raise ValueError(f"embed: patches {p.shape} do not match centers {ctr.shape}")
        b = p.shape[0]
        t_e = self.patch_embed(p)  # (B, c, d)
        p_e = self.pos_embed(ctr)  # (B, c, d)
        cls = F.concat([self.cls_token, self.cls_pos], axis=-1).reshape((1, 1, 2 * cfg.d))
        cls = F.broadcast_to(cls, (b, 1, 2 * cfg.d))
        tokens = F.concat([cls, F.concat([t_e, p_e], axis=-1)], axis=1)
        return _unbatch(tokens, single)

    def encode(self, tokens):
        x, single = _batched(tokens, 3)
        if x.shape[-1] != self.config.token_dim:
            raise ValueError(f"encode: token width {x.shape[-1]} != {self.config.token_dim}")
        x = self.in_proj(x)
        for blk in self.encoder_blocks:
            x = blk(x)
        return _unbatch(self.encoder_norm(x), single)

    def decode(self, latent):
        x, single = _batched(latent, 3)
        if x.shape[-1] != self.config.latent:
            raise ValueError(f"decode: latent width {x.shape[-1]} != {self.config.latent}")
        for blk in self.decoder_blocks:
            x = blk(x)
        return _unbatch(self.out_proj(self.decoder_norm(x)), single)

    def reconstruct_patches(self, decoded):
        """Drop the CLS row and map each token to ``n`` points in patch coordinates."""
        cfg = self.config
        x, single = _batched(decoded, 3)
        if x.shape[-1] != cfg.d:
            raise ValueError(f"reconstruct_patches: width {x.shape[-1]} != {cfg.d}")
        out = self.head(x[:, 1:, :])
        out = out.reshape((x.shape[0], x.shape[1] - 1, cfg.n, 3))
        return _unbatch(out, single)

    def forward(self, patches, centers):
        return self.reconstruct_patches(self.decode(self.encode(self.embed(patches, centers))))

    def pretrain_loss(self, patches, centers, targets):
        """Mean patch-wise Chamfer between targets and reconstructions.

        ``targets`` are the clean points at the corrupted patches' indices,
        expressed in the corrupted patches' normalised frames.
        """
        pred = self.forward(patches, centers)
        rec = chamfer_l2(np.asarray(targets, dtype=np.float32), pred).mean()
        return LossBreakdown(rec, {"chamfer": rec}, {"chamfer": 1.0})

    def representation(self, patches, centers):
        """CLS row of the encoder output."""
        lat = self.encode(self.embed(patches, centers))
        return lat[..., 0, :]

    def encoder_parameters(self):
        skip = ("transformer.decoder_", "transformer.out_proj.", "transformer.head.")
        return {k: p for k, p in self.named_parameters(self.prefix) if not k.startswith(skip)}
