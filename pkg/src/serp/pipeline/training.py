"""Pretraining, finetuning, evaluation and reconstruction export."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import AdamW, F, MLP, Module, cosine_lr, no_grad
from ..geometry import PointCloud, perturb, tokenize
from ..losses import chamfer_l2
from ..pointnet import SeRPPointNet
from ..vq import VASP, utilization
from .checkpoint import Checkpoint, FingerprintError
from .config import FinetuneConfig, TrainConfig, model_fingerprint
from .data import Dataset
from .io import write_cloud

log = logging.getLogger(__name__)

_TRAIN, _VAL, _TOKENS = 0, 1, 2


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def derive_seed(*parts):
    """Stable 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- batch preparation ----------------------------------------------------
def prepare_pretrain_batch(clouds, seeds, config, model_config):
    """Perturb each cloud and arrange model inputs and targets."""
    out = {"clean": [], "perturbed": [], "mask": []}
    tokens = config.model != "pointnet"
    if tokens:
        out.update(patches=[], centers=[], targets=[])
    for cloud, s in zip(clouds, seeds):
        rec = perturb(cloud, config.num_centers, config.patch_size, config.sigma, seed=s,
                      centers=config.perturb_centers)
        out["clean"].append(cloud.points)
        out["perturbed"].append(rec.perturbed.points)
        out["mask"].append(rec.mask)
        if tokens:
            ps = tokenize(rec.perturbed, model_config.c, model_config.n, seed=s)
            out["patches"].append(ps.patches)
            out["centers"].append(ps.centers)
            out["targets"].append(ps.normalize(cloud.points[ps.indices]))
    return {k: np.stack(v) for k, v in out.items()}


def pretrain_loss(model, batch):
    if isinstance(model, SeRPPointNet):
        return model.forward_pretrain(batch["perturbed"], batch["clean"], batch["mask"])
    return model.pretrain_loss(batch["patches"], batch["centers"], batch["targets"])


def component_names(kind):
    return {"pointnet": ["cls", "rec"], "transformer": ["chamfer"], "vasp": ["chamfer", "codebook", "commit"]}[kind]


def _fmt(x):
    return "" if x is None else f"{x:.9g}"


def metrics_csv(rows, kind):
    """Render metric rows as CSV text with a fixed column order."""
    cols = ["epoch", "split", "loss_total"] + [f"loss_{c}" for c in component_names(kind)] + ["lr"]
    if kind == "vasp":
        cols.append("codes_used")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r["epoch"], r["split"]] + [_fmt(r.get(c)) if c not in ("codes_used",) else r.get(c, "") for c in cols[2:]])
    return buf.getvalue()


@dataclass
class PretrainResult:
    model: Module
    checkpoint: Checkpoint
    log: list = field(default_factory=list)

    def csv(self):
        return metrics_csv(self.log, self.checkpoint.config["model"])

    def series(self, split, column):
        return [r[column] for r in self.log if r["split"] == split]


def _batches(indices, size):
    for i in range(0, len(indices), size):
        yield indices[i : i + size]


def _dump_batch(out_dir, batch, epoch, step):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nan_dump_epoch{epoch}_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **batch)
    return str(path)


def _make_checkpoint(kind, config_dict, model, opt, epoch, step, extra=None):
    arrays = dict(model.state_dict())
    if opt is not None:
        arrays.update(opt.state_arrays())
    return Checkpoint(
        kind=kind,
        config=config_dict,
        arrays=arrays,
        epoch=epoch,
        step=step,
        rng={"seed": int(config_dict["seed"]), "epoch": int(epoch)},
        extra=extra or {},
    )


def evaluate_pretrain(model, clouds, config, model_config, seeds, batch_size):
    """Size-weighted mean loss components over ``clouds`` without building a graph."""
    totals = {}
    codes = []
    count = 0
    with no_grad():
        for chunk in _batches(np.arange(len(clouds)), batch_size):
            batch = prepare_pretrain_batch([clouds[i] for i in chunk], [seeds[i] for i in chunk],
                                           config, model_config)
            if isinstance(model, VASP):
                loss, idx = model.pretrain_loss(batch["patches"], batch["centers"], batch["targets"],
                                                return_indices=True)
                codes.append(idx.reshape(-1))
            else:
                loss = pretrain_loss(model, batch)
            for k, v in loss.as_floats().items():
                totals[k] = totals.get(k, 0.0) + v * len(chunk)
            count += len(chunk)
    out = {k: v / count for k, v in totals.items()}
    if codes:
        out["codes_used"] = int(np.count_nonzero(utilization(np.concatenate(codes), model.codebook.size)))
    return out


def pretrain(dataset, config, out_dir=None, resume=None, stop_after=None):
    """Self-supervised pretraining with fresh perturbations every epoch.

    Every random choice is derived from ``(config.seed, epoch, cloud index)``
    so a run resumed from a checkpoint continues exactly as an uninterrupted
    one would. ``stop_after`` ends the run early after that epoch.
    """
    if not isinstance(config, TrainConfig):
        config = TrainConfig.from_dict(config)
    kind = config.model
    model = config.build_model()
    model_config = config.build_model_config()
    params = dict(model.named_parameters())
    opt = AdamW(params, lr=config.lr_max, weight_decay=config.weight_decay)

    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if len(train_idx) == 0:
        raise ValueError("dataset has no training clouds")
    if len(val_idx) == 0:
        val_idx = train_idx
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    rows = []
    start_epoch = 1
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ckpt.fingerprint != config.fingerprint:
            raise FingerprintError("checkpoint was written by a different configuration")
        model.load_state_dict(ckpt.params())
        opt.load_state_arrays(ckpt.arrays, ckpt.step)
        start_epoch = ckpt.epoch + 1
        rows = list(ckpt.extra.get("log", []))

    val_clouds = [dataset.clouds[i] for i in val_idx]
    val_seeds = [derive_seed(config.seed, _VAL, 0, i) for i in val_idx]
    last_epoch = config.epochs if stop_after is None else min(stop_after, config.epochs)
    ckpt = None
    step = (start_epoch - 1) * steps_per_epoch
    for epoch in range(start_epoch, last_epoch + 1):
        order = train_idx[np.random.default_rng([config.seed, epoch]).permutation(len(train_idx))]
        sums = {}
        lr = config.lr_max
        for chunk in _batches(order, config.batch_size):
            lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min)
            clouds = [dataset.clouds[i] for i in chunk]
            seeds = [derive_seed(config.seed, _TRAIN, epoch, i) for i in chunk]
            batch = prepare_pretrain_batch(clouds, seeds, config, model_config)
            opt.zero_grad()
            loss = pretrain_loss(model, batch)
            value = float(loss.total.data)
            if not math.isfinite(value):
                dump = _dump_batch(out_dir, batch, epoch, step)
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {step}: {loss.as_floats()}", dump
                )
            loss.total.backward()
            opt.step(lr)
            for k, v in loss.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * len(chunk)
            step += 1
        train_row = {"epoch": epoch, "split": "train", "lr": lr}
        for k, v in sums.items():
            train_row["loss_total" if k == "total" else f"loss_{k}"] = v / len(order)
        val = evaluate_pretrain(model, val_clouds, config, model_config, val_seeds, config.batch_size)
        val_row = {"epoch": epoch, "split": "val", "lr": lr}
        for k, v in val.items():
            key = k if k == "codes_used" else ("loss_total" if k == "total" else f"loss_{k}")
            val_row[key] = v
        rows += [train_row, val_row]
        log.info("epoch %d train %.6g val %.6g", epoch, train_row["loss_total"], val_row["loss_total"])
        ckpt = _make_checkpoint(f"pretrain-{kind}", config.to_dict(), model, opt, epoch, step,
                                extra={"log": rows})
        if out_dir is not None:
            out = Path(out_dir)
            ckpt.save(out / "checkpoint.bin")
            (out / "metrics.csv").write_text(metrics_csv(rows, kind))
    if ckpt is None:
        ckpt = _make_checkpoint(f"pretrain-{kind}", config.to_dict(), model, opt, start_epoch - 1,
                                step, extra={"log": rows})
    return PretrainResult(model, ckpt, rows)


def load_pretrained(checkpoint):
    """Rebuild the pretraining model stored in a checkpoint."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    config = TrainConfig.from_dict(ckpt.config)
    model = config.build_model()
    model.load_state_dict(ckpt.params())
    return model, config


# -- finetuning -----------------------------------------------------------
class Classifier(Module):
    """Encoder representation followed by a 2-layer MLP head."""

    def __init__(self, backbone, num_classes, hidden=128, seed=0):
        self.backbone = backbone
        self.head = MLP([backbone.feature_dim, hidden, num_classes], np.random.default_rng([seed, 99]))

    def named_parameters(self, prefix=None):
        yield from self.backbone.named_parameters()
        yield from self.head.named_parameters("head.")

    def load_state_dict(self, state, prefix=None, strict=True):
        self.backbone.load_state_dict(state, strict=strict)
        self.head.load_state_dict(state, "head.", strict)

    def trainable(self):
        out = dict(self.backbone.encoder_parameters())
        out.update(self.head.named_parameters("head."))
        return out

    def features(self, inputs):
        if isinstance(self.backbone, SeRPPointNet):
            return self.backbone.representation(inputs["points"])
        return self.backbone.representation(inputs["patches"], inputs["centers"])

    def forward(self, inputs):
        return self.head(self.features(inputs))


def classification_inputs(clouds, model_kind, model_config, seeds):
    if model_kind == "pointnet":
        return {"points": np.stack([c.points for c in clouds])}
    sets = [tokenize(c, model_config.c, model_config.n, seed=s) for c, s in zip(clouds, seeds)]
    return {"patches": np.stack([p.patches for p in sets]), "centers": np.stack([p.centers for p in sets])}


def _take(inputs, idx):
    return {k: v[idx] for k, v in inputs.items()}


def cross_entropy(logits, labels):
    logp = F.log_softmax(logits, axis=-1)
    picked = F.take_along_axis(logp, np.asarray(labels)[:, None], axis=-1)
    return -picked.mean()


@dataclass
class FinetuneResult:
    model: Classifier
    checkpoint: Checkpoint
    accuracy: float
    log: list = field(default_factory=list)
    eval_split: str = "test"

    def csv(self):
        cols = ["epoch", "split", "loss_total", "loss_ce", "accuracy", "lr"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.log:
            w.writerow([r["epoch"], r["split"]] + [_fmt(r.get(c)) for c in cols[2:]])
        return buf.getvalue()


def predict_logits(model, inputs, batch_size=64):
    out = []
    n = len(next(iter(inputs.values())))
    with no_grad():
        for chunk in _batches(np.arange(n), batch_size):
            out.append(model(_take(inputs, chunk)).data)
    return np.concatenate(out)


def finetune(checkpoint, dataset, config, out_dir=None):
    """Train encoder + head on labels; ``checkpoint=None`` is the scratch baseline."""
    if not isinstance(config, FinetuneConfig):
        config = FinetuneConfig.from_dict(config)
    if not dataset.has_labels:
        raise ValueError("finetuning needs a labeled dataset")
    if checkpoint is not None:
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
        wanted = model_fingerprint(config.model, config.model_config)
        if ckpt.model_fingerprint != wanted:
            raise FingerprintError(
                "checkpoint architecture does not match the finetuning configuration "
                f"(checkpoint model {ckpt.config.get('model')!r})"
            )
    train_cfg = config.as_train_config()
    model_config = train_cfg.build_model_config()
    backbone = train_cfg.build_model(seed=config.seed)
    if checkpoint is not None:
        # only the encoder is transferred; decoder and codebook are pretraining-only
        wanted_keys = backbone.encoder_parameters()
        stored = ckpt.params()
        missing = [k for k in wanted_keys if k not in stored]
        if missing:
            raise FingerprintError(f"checkpoint lacks encoder parameters {missing[:3]}")
        backbone.load_state_dict({k: stored[k] for k in wanted_keys}, strict=False)
    num_classes = max(int(dataset.labels().max()) + 1, len(dataset.class_names), 1)
    model = Classifier(backbone, num_classes, config.head_hidden, seed=config.seed)
    opt = AdamW(model.trainable(), lr=config.lr_max, weight_decay=config.weight_decay)

    train_idx = dataset.indices("train")
    eval_split = "test" if len(dataset.indices("test")) else "val"
    eval_idx = dataset.indices(eval_split)
    if len(eval_idx) == 0:
        eval_idx = train_idx
    labels = dataset.labels()
    tok_seeds = [derive_seed(config.seed, _TOKENS, 0, i) for i in range(len(dataset))]
    all_inputs = classification_inputs(dataset.clouds, config.model, model_config, tok_seeds)

    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    rows = []
    for epoch in range(1, config.epochs + 1):
        order = train_idx[np.random.default_rng([config.seed, epoch, 5]).permutation(len(train_idx))]
        loss_sum = 0.0
        correct = 0
        lr = config.lr_max
        for chunk in _batches(order, config.batch_size):
            lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min)
            opt.zero_grad()
            logits = model(_take(all_inputs, chunk))
            loss = cross_entropy(logits, labels[chunk])
            if not math.isfinite(float(loss.data)):
                raise NumericalError(f"non-finite finetuning loss at epoch {epoch}")
            loss.backward()
            opt.step(lr)
            loss_sum += float(loss.data) * len(chunk)
            correct += int((logits.data.argmax(-1) == labels[chunk]).sum())
            step += 1
        rows.append({"epoch": epoch, "split": "train", "loss_total": loss_sum / len(order),
                     "loss_ce": loss_sum / len(order), "accuracy": correct / len(order), "lr": lr})
        eval_logits = predict_logits(model, _take(all_inputs, eval_idx))
        acc = float((eval_logits.argmax(-1) == labels[eval_idx]).mean())
        rows.append({"epoch": epoch, "split": eval_split, "accuracy": acc, "lr": lr})
    accuracy = rows[-1]["accuracy"]
    cfg_dict = config.to_dict()
    cfg_dict["pretrained_from"] = None if checkpoint is None else ckpt.fingerprint
    ckpt_out = Checkpoint(
        kind=f"finetune-{config.model}",
        config=cfg_dict,
        arrays=model.state_dict(),
        epoch=config.epochs,
        step=step,
        rng={"seed": config.seed, "epoch": config.epochs},
        extra={"accuracy": accuracy, "eval_split": eval_split, "num_classes": num_classes},
    )
    result = FinetuneResult(model, ckpt_out, accuracy, rows, eval_split)
    if out_dir is not None:
        out = Path(out_dir)
        ckpt_out.save(out / "finetuned.bin")
        (out / "metrics.csv").write_text(result.csv())
    return result


# -- reconstruction -------------------------------------------------------
def reconstruct_cloud(model, config, cloud, sigma=None, seed=0):
    """Corrupt ``cloud`` and reconstruct it; returns ``(record, reconstructed points)``."""
    sigma = config.sigma if sigma is None else sigma
    rec = perturb(cloud, config.num_centers, config.patch_size, sigma, seed=seed,
                  centers=config.perturb_centers)
    with no_grad():
        if isinstance(model, SeRPPointNet):
            out = model.reconstruct(rec.perturbed.points)
        else:
            mc = config.build_model_config()
            ps = tokenize(rec.perturbed, mc.c, mc.n, seed=seed)
            pred = model(ps.patches, ps.centers).data
            out = ps.denormalize(pred).reshape(-1, 3)
    return rec, np.asarray(out, dtype=np.float32)


def reconstruct_and_export(checkpoint, cloud, out_dir, sigma=None, seed=0):
    """Write original/corrupted/reconstructed PLY files and Chamfer metrics."""
    model, config = load_pretrained(checkpoint)
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    rec, recon = reconstruct_cloud(model, config, cloud, sigma, seed)
    out = Path(out_dir)
    write_cloud(out / "original.ply", cloud)
    write_cloud(out / "corrupted.ply", rec.perturbed)
    write_cloud(out / "reconstructed.ply", recon)
    metrics = {
        "chamfer_original_corrupted": float(chamfer_l2(cloud.points, rec.perturbed.points).data),
        "chamfer_original_reconstructed": float(chamfer_l2(cloud.points, recon).data),
    }
    line = " ".join(f"{k}={v:.9g}" for k, v in metrics.items())
    (out / "metrics.txt").write_text(line + "\n")
    return metrics
