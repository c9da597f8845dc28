"""Run configurations and model construction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..pointnet import PointNetConfig, SeRPPointNet
from ..transformer import TransformerAE, TransformerConfig
from ..vq import VASP
from .checkpoint import fingerprint
from .data import ConfigError

MODEL_KINDS = ("pointnet", "transformer", "vasp")


def _model_defaults(kind, scale):
    if kind == "pointnet":
        cfg = PointNetConfig() if scale == "full" else PointNetConfig.desk()
        d = cfg.to_dict()
        d.pop("alpha_cls")
        d.pop("alpha_rec")
        return d
    cfg = TransformerConfig() if scale == "full" else TransformerConfig.desk()
    return cfg.to_dict()


@dataclass
class TrainConfig:
    model: str = "transformer"
    epochs: int = 30
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    seed: int = 0
    num_centers: int = 20
    patch_size: int = 20
    sigma: float = 0.03
    perturb_centers: str = "random"
    alpha_cls: float = 0.001
    alpha_rec: float = 1.5
    vq_alpha: float = 1.0
    vq_beta: float = 0.25
    codebook_size: int = 1024
    model_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.perturb_centers not in ("random", "fps"):
            raise ConfigError("perturb_centers must be 'random' or 'fps'")
        merged = _model_defaults(self.model, "desk")
        merged.update(self.model_config or {})
        self.model_config = merged
        self.build_model_config()  # validate early

    @classmethod
    def full_scale(cls, model="transformer", **overrides):
        """Full-scale settings: lr 1e-3, batch 128, 100 (PointNet) or 300 epochs."""
        base = dict(
            model=model,
            batch_size=128,
            epochs=100 if model == "pointnet" else 300,
            model_config=_model_defaults(model, "full"),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def fingerprint(self):
        return fingerprint(self.to_dict())

    def build_model_config(self):
        mc = dict(self.model_config)
        try:
            if self.model == "pointnet":
                return PointNetConfig(alpha_cls=self.alpha_cls, alpha_rec=self.alpha_rec, **mc)
            return TransformerConfig(**mc)
        except TypeError as exc:
            raise ConfigError(f"bad model_config: {exc}") from None

    def build_model(self, seed=None):
        seed = self.seed if seed is None else seed
        mc = self.build_model_config()
        if self.model == "pointnet":
            return SeRPPointNet(mc, seed=seed)
        if self.model == "transformer":
            return TransformerAE(mc, seed=seed)
        return VASP(mc, codebook_size=self.codebook_size, seed=seed, alpha=self.vq_alpha, beta=self.vq_beta)


@dataclass
class FinetuneConfig:
    model: str = "transformer"
    epochs: int = 20
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    seed: int = 0
    head_hidden: int = 128
    codebook_size: int = 1024
    model_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        merged = _model_defaults(self.model, "desk")
        merged.update(self.model_config or {})
        self.model_config = merged

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def as_train_config(self):
        return TrainConfig(
            model=self.model,
            seed=self.seed,
            codebook_size=self.codebook_size,
            model_config=dict(self.model_config),
        )


def model_fingerprint(model, model_config):
    return fingerprint({"model": model, "model_config": model_config})
