"""SeRP-PointNet: global/local PointNet features with perturbation-classification
and reconstruction heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import F, Linear, MLP, Module, SharedMLPMax, tensor
from .diffcore.tensor import Tensor
from .losses import chamfer_l2, delta_mse_loss, perturbation_cls_loss, pointnet_total_loss

RECON_MODES = ("delta", "cdl2")


@dataclass
class PointNetConfig:
    global_dim: int = 1024
    perpoint_dim: int = 128
    local_dim: int = 64
    fusion_widths: tuple = (512, 256, 128, 128)
    recon_mode: str = "delta"
    alpha_cls: float = 0.001
    alpha_rec: float = 1.5

    def __post_init__(self):
        self.fusion_widths = tuple(int(w) for w in self.fusion_widths)
        if self.global_dim <= 0 or self.local_dim <= 0:
            raise ValueError("feature widths must be positive")
        if len(self.fusion_widths) != 4 or self.fusion_widths[-1] != self.perpoint_dim:
            raise ValueError("fusion_widths must have 4 entries ending in perpoint_dim")
        if self.recon_mode not in RECON_MODES:
            raise ValueError(f"recon_mode must be one of {RECON_MODES}, got {self.recon_mode!r}")
        if self.alpha_cls < 0 or self.alpha_rec < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def desk(cls, **overrides):
        """Small widths for CPU-scale experiments."""
        base = dict(global_dim=256, perpoint_dim=64, local_dim=64, fusion_widths=(128, 64, 64, 64))
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["fusion_widths"] = list(self.fusion_widths)
        return d


def _batched(x):
    x = x if isinstance(x, Tensor) else tensor(np.asarray(x, dtype=np.float32))
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    return x, False


class SeRPPointNet(Module):
    """PointNet autoencoder over ``(B, N, 3)`` clouds."""

    prefix = "pointnet."

    def __init__(self, config=None, seed=0):
        self.config = config or PointNetConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.encoder = SharedMLPMax([3, cfg.local_dim, cfg.local_dim, 128, cfg.global_dim], rng)
        self.fusion = MLP([cfg.local_dim + cfg.global_dim, *cfg.fusion_widths], rng)
        self.cls_head = Linear(cfg.perpoint_dim, 1, rng)
        # a zero delta head starts as the identity denoiser
        self.rec_head = Linear(cfg.perpoint_dim, 3, rng, zero_init=cfg.recon_mode == "delta")
        self.assign_names(self.prefix)

    @property
    def feature_dim(self):
        return self.config.global_dim

    def _features(self, points):
        return self.encoder(points, return_local=1)

    def encode_global(self, points):
        """Permutation-invariant global vector, ``(B, global_dim)`` or ``(global_dim,)``."""
        x, single = _batched(points)
        if x.shape[-2] == 0:
            raise ValueError("encode_global: empty cloud")
        g = self.encoder(x)
        return g.reshape(g.shape[1:]) if single else g

    def perpoint_features(self, points):
        """Local features fused with the broadcast global vector, ``(B, N, perpoint_dim)``."""
        x, single = _batched(points)
        if x.shape[-2] == 0:
            raise ValueError("perpoint_features: empty cloud")
        g, local = self._features(x)
        b, n = x.shape[0], x.shape[1]
        g_rep = F.broadcast_to(g.reshape((b, 1, g.shape[-1])), (b, n, g.shape[-1]))
        feats = self.fusion(F.concat([local, g_rep], axis=-1))
        return feats.reshape(feats.shape[1:]) if single else feats

    def heads(self, points):
        feats = self.perpoint_features(points)
        logits = self.cls_head(feats)
        logits = logits.reshape(logits.shape[:-1])
        return logits, self.rec_head(feats)

    def forward_pretrain(self, perturbed, clean, mask):
        """Weighted classification + reconstruction loss for a batch.

        ``perturbed`` and ``clean`` are aligned ``(B, N, 3)`` arrays, ``mask``
        is ``(B, N)`` booleans marking displaced points.
        """
        perturbed = np.asarray(perturbed, dtype=np.float32)
        clean = np.asarray(clean, dtype=np.float32)
        if perturbed.ndim == 2:
            perturbed, clean, mask = perturbed[None], clean[None], np.asarray(mask)[None]
        if perturbed.shape != clean.shape:
            raise ValueError(f"perturbed {perturbed.shape} and clean {clean.shape} are not aligned")
        logits, rec = self.heads(perturbed)
        l_cls = perturbation_cls_loss(logits, mask)
        if self.config.recon_mode == "delta":
            l_rec = delta_mse_loss(rec, clean - perturbed)
        else:
            l_rec = chamfer_l2(clean, rec).mean()
        return pointnet_total_loss(l_cls, l_rec, self.config.alpha_cls, self.config.alpha_rec)

    def reconstruct(self, perturbed):
        """Denoised coordinates with the same point count as the input."""
        x = np.asarray(perturbed, dtype=np.float32)
        _, rec = self.heads(x)
        if self.config.recon_mode == "delta":
            return x + rec.data
        return rec.data

    def representation(self, points):
        return self.encode_global(points)

    def encoder_parameters(self):
        return dict(self.encoder.named_parameters(self.prefix + "encoder."))
