"""scikit-learn style wrappers around pretraining and finetuning.

Inputs are batches of point clouds: an array of shape ``(B, N, 3)``, or a
sequence of ``(N, 3)`` arrays / :class:`PointCloud` objects sharing ``N``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .diffcore import F, no_grad
from .geometry import PointCloud
from .pipeline.checkpoint import Checkpoint
from .pipeline.config import FinetuneConfig, TrainConfig
from .pipeline.data import Dataset, split_assignment
from .pipeline.training import (
    _TOKENS,
    classification_inputs,
    derive_seed,
    finetune,
    load_pretrained,
    predict_logits,
    pretrain,
    reconstruct_cloud,
)


def check_point_clouds(X, *, min_points=1):
    """Validate a batch of clouds and return it as a float32 ``(B, N, 3)`` array."""
    if isinstance(X, PointCloud):
        raise ValueError("expected a batch of point clouds, got a single PointCloud")
    if isinstance(X, (list, tuple)):
        if len(X) == 0:
            raise ValueError("expected at least one point cloud, got an empty sequence")
        items = [x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float32) for x in X]
        shapes = {a.shape for a in items}
        if len(shapes) != 1:
            raise ValueError(f"all clouds must share one shape, got {sorted(shapes)}")
        arr = np.stack(items)
    else:
        arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected shape (B, N, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("expected at least one point cloud")
    if arr.shape[1] < min_points:
        raise ValueError(f"clouds need at least {min_points} points, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise ValueError("point coordinates must be finite")
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_cloud_labels(X, y):
    arr = check_point_clouds(X)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(arr):
        raise ValueError(f"y must be 1-D with {len(arr)} entries, got shape {y.shape}")
    return arr, y


def _dataset(points, labels, split):
    clouds = [PointCloud(p, None if labels is None else int(l)) for p, l in
              zip(points, labels if labels is not None else [None] * len(points))]
    return Dataset(clouds, split, source="array")


class SeRPPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised pretraining on unlabeled clouds.

    ``transform`` returns the encoder's cloud-level feature vector
    (CLS latent for token models, max-pooled global vector for PointNet).
    """

    def __init__(self, model="transformer", epochs=30, batch_size=32, lr_max=1e-3, lr_min=1e-6,
                 weight_decay=0.05, sigma=0.03, num_centers=20, patch_size=20,
                 perturb_centers="random", codebook_size=1024, model_config=None,
                 val_fraction=0.2, random_state=0):
        self.model = model
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.sigma = sigma
        self.num_centers = num_centers
        self.patch_size = patch_size
        self.perturb_centers = perturb_centers
        self.codebook_size = codebook_size
        self.model_config = model_config
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            model=self.model,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            weight_decay=self.weight_decay,
            seed=int(self.random_state),
            sigma=self.sigma,
            num_centers=self.num_centers,
            patch_size=self.patch_size,
            perturb_centers=self.perturb_centers,
            codebook_size=self.codebook_size,
            model_config=dict(self.model_config or {}),
        )

    def fit(self, X, y=None):
        points = check_point_clouds(X)
        config = self._train_config()
        split = split_assignment(np.zeros(len(points), dtype=int), config.seed, self.val_fraction)
        result = pretrain(_dataset(points, None, split), config)
        self.config_ = config
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.history_ = result.log
        self.n_points_in_ = points.shape[1]
        return self

    def _inputs(self, points):
        seeds = [derive_seed(self.config_.seed, _TOKENS, 0, i) for i in range(len(points))]
        clouds = [PointCloud(p) for p in points]
        return classification_inputs(clouds, self.config_.model, self.config_.build_model_config(), seeds)

    def transform(self, X):
        check_is_fitted(self, "model_")
        inputs = self._inputs(check_point_clouds(X))
        out = []
        with no_grad():
            for i in range(0, len(next(iter(inputs.values()))), 64):
                chunk = {k: v[i : i + 64] for k, v in inputs.items()}
                if self.config_.model == "pointnet":
                    out.append(self.model_.representation(chunk["points"]).data)
                else:
                    out.append(self.model_.representation(chunk["patches"], chunk["centers"]).data)
        return np.concatenate(out)

    def reconstruct(self, X, sigma=None, seed=0):
        """Corrupt and reconstruct each cloud; returns ``(corrupted, reconstructed)`` lists."""
        check_is_fitted(self, "model_")
        corrupted, recon = [], []
        for i, p in enumerate(check_point_clouds(X)):
            rec, out = reconstruct_cloud(self.model_, self.config_, PointCloud(p), sigma, seed + i)
            corrupted.append(rec.perturbed.points)
            recon.append(out)
        return corrupted, recon

    @classmethod
    def from_checkpoint(cls, checkpoint):
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
        model, config = load_pretrained(ckpt)
        est = cls(
            model=config.model, epochs=config.epochs, batch_size=config.batch_size,
            lr_max=config.lr_max, lr_min=config.lr_min, weight_decay=config.weight_decay,
            sigma=config.sigma, num_centers=config.num_centers, patch_size=config.patch_size,
            perturb_centers=config.perturb_centers, codebook_size=config.codebook_size,
            model_config=dict(config.model_config), random_state=config.seed,
        )
        est.config_, est.model_, est.checkpoint_ = config, model, ckpt
        est.history_ = ckpt.extra.get("log", [])
        return est


class SeRPClassifier(ClassifierMixin, BaseEstimator):
    """Encoder plus MLP head trained end to end on labels.

    ``pretrained`` may be ``None`` (random encoder), a checkpoint path,
    a :class:`Checkpoint` or a fitted :class:`SeRPPretrainer`; when given,
    the architecture is taken from it and ``model``/``model_config`` are
    ignored.
    """

    def __init__(self, pretrained=None, model="transformer", model_config=None, epochs=20,
                 batch_size=16, lr_max=1e-3, lr_min=1e-6, weight_decay=0.05, head_hidden=128,
                 random_state=0):
        self.pretrained = pretrained
        self.model = model
        self.model_config = model_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.head_hidden = head_hidden
        self.random_state = random_state

    def _checkpoint(self):
        src = self.pretrained
        if src is None:
            return None
        if isinstance(src, SeRPPretrainer):
            check_is_fitted(src, "checkpoint_")
            return src.checkpoint_
        return src if isinstance(src, Checkpoint) else Checkpoint.load(src)

    def fit(self, X, y):
        points, y = check_cloud_labels(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        ckpt = self._checkpoint()
        if ckpt is not None:
            model, model_config = ckpt.config["model"], dict(ckpt.config["model_config"])
            codebook_size = ckpt.config.get("codebook_size", 1024)
        else:
            model, model_config, codebook_size = self.model, dict(self.model_config or {}), 1024
        config = FinetuneConfig(
            model=model, epochs=self.epochs, batch_size=self.batch_size, lr_max=self.lr_max,
            lr_min=self.lr_min, weight_decay=self.weight_decay, seed=int(self.random_state),
            head_hidden=self.head_hidden, codebook_size=codebook_size, model_config=model_config,
        )
        dataset = _dataset(points, encoded, np.full(len(points), "train", dtype=object))
        dataset.class_names = [str(c) for c in self.classes_]
        result = finetune(ckpt, dataset, config)
        self.config_ = config
        self.model_ = result.model
        self.history_ = result.log
        self.n_points_in_ = points.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        points = check_point_clouds(X)
        seeds = [derive_seed(self.config_.seed, _TOKENS, 0, i) for i in range(len(points))]
        mc = self.config_.as_train_config().build_model_config()
        inputs = classification_inputs([PointCloud(p) for p in points], self.config_.model, mc, seeds)
        return predict_logits(self.model_, inputs)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        return F.softmax(F.tensor(logits), axis=-1).data

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
