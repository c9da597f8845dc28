"""Self-supervised point-cloud pretraining by reconstructing perturbed clouds."""

from .geometry import PatchSet, PerturbationRecord, PointCloud, fps, knn, perturb, tokenize
from .losses import LossBreakdown, chamfer_l2
from .pointnet import PointNetConfig, SeRPPointNet
from .transformer import TransformerAE, TransformerConfig
from .vq import VASP, Codebook, quantize

__version__ = "0.1.0"

__all__ = [
    "VASP",
    "Codebook",
    "LossBreakdown",
    "PatchSet",
    "PerturbationRecord",
    "PointCloud",
    "PointNetConfig",
    "SeRPPointNet",
    "TransformerAE",
    "TransformerConfig",
    "chamfer_l2",
    "fps",
    "knn",
    "perturb",
    "quantize",
    "tokenize",
]
