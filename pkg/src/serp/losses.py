"""Training objectives for the SeRP autoencoders."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import F
from .diffcore.tensor import Tensor, custom_op, stop_gradient

DEFAULT_ALPHA_CLS = 0.001
DEFAULT_ALPHA_REC = 1.5
DEFAULT_VQ_ALPHA = 1.0
DEFAULT_VQ_BETA = 0.25

# pairwise distances materialised at once
_CHUNK_ELEMS = 1 << 20


class ShapeError(ValueError):
    pass


@dataclass
class LossBreakdown:
    """A differentiable total plus its named, unweighted components."""

    total: Tensor
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def weighted(self, name):
        return self.weights.get(name, 1.0) * float(self.components[name].data)

    def as_floats(self):
        out = {"total": float(self.total.data)}
        out.update({k: float(v.data) for k, v in self.components.items()})
        return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _nearest(src, dst):
    """For each point of ``src`` (..., a, 3), the index of its first nearest point in ``dst``."""
    a, b = src.shape[-2], dst.shape[-2]
    s = src.reshape(-1, a, 3)
    d = dst.reshape(-1, b, 3)
    out = np.empty((s.shape[0], a), dtype=np.int64)
    if a * b <= _CHUNK_ELEMS:
        per = max(1, _CHUNK_ELEMS // (a * b))
        for i in range(0, s.shape[0], per):
            dist = ((s[i : i + per, :, None, :] - d[i : i + per, None, :, :]) ** 2).sum(-1)
            out[i : i + per] = dist.argmin(axis=-1)
    else:
        rows = max(1, _CHUNK_ELEMS // b)
        for i in range(s.shape[0]):
            for r in range(0, a, rows):
                dist = ((s[i, r : r + rows, None, :] - d[i, None, :, :]) ** 2).sum(-1)
                out[i, r : r + rows] = dist.argmin(axis=-1)
    return out.reshape(src.shape[:-1])


def chamfer_l2(target, pred):
    """Symmetric squared-L2 Chamfer distance between point sets.

    ``mean_{x in pred} min_{y in target} |x-y|^2 + mean_{y in target} min_{x in pred} |x-y|^2``

    Both arguments have shape ``(..., m, 3)``; leading axes are batch axes and
    the result has their shape. When a point has several nearest partners the
    lowest-index one is used, in the value and in the gradient.
    """
    target = _as_tensor(target)
    pred = _as_tensor(pred)
    if target.shape[-2] == 0 or pred.shape[-2] == 0:
        raise ValueError("chamfer_l2: empty point set")
    if target.shape[-1] != 3 or pred.shape[-1] != 3 or target.shape[:-2] != pred.shape[:-2]:
        raise ShapeError(f"chamfer_l2: incompatible shapes {target.shape} and {pred.shape}")
    P, Q = target.data, pred.data
    nn_pq = _nearest(Q, P)  # for each predicted point, nearest target
    nn_qp = _nearest(P, Q)  # for each target point, nearest prediction
    diff_q = Q - np.take_along_axis(P, nn_pq[..., None], axis=-2)
    diff_p = P - np.take_along_axis(Q, nn_qp[..., None], axis=-2)
    m_q, m_p = Q.shape[-2], P.shape[-2]
    value = (diff_q**2).sum(-1).mean(-1) + (diff_p**2).sum(-1).mean(-1)

    def backward(g):
        g = np.asarray(g)[..., None, None]
        gq_direct = g * 2.0 * diff_q / m_q
        gp_direct = g * 2.0 * diff_p / m_p
        gP = gp_direct.copy()
        gQ = gq_direct.copy()
        _scatter_add(gP, nn_pq, -gq_direct)
        _scatter_add(gQ, nn_qp, -gp_direct)
        return gP, gQ

    return custom_op(np.asarray(value, dtype=Q.dtype), (target, pred), backward)


def _scatter_add(dest, index, values):
    """dest[..., index[..., j], :] += values[..., j, :] over the batch axes."""
    lead = dest.shape[:-2]
    d = dest.reshape((-1,) + dest.shape[-2:])
    idx = index.reshape(-1, index.shape[-1])
    v = values.reshape((-1,) + values.shape[-2:])
    batch = np.repeat(np.arange(d.shape[0]), idx.shape[1])
    np.add.at(d, (batch, idx.reshape(-1)), v.reshape(-1, 3))
    dest[...] = d.reshape(lead + dest.shape[-2:])


def perturbation_cls_loss(logits, mask):
    """Mean binary cross-entropy of one logit per point against the perturbation mask."""
    logits = _as_tensor(logits)
    mask = np.asarray(mask)
    if logits.shape != mask.shape:
        raise ShapeError(f"logits {logits.shape} and mask {mask.shape} differ in shape")
    y = mask.astype(logits.dtype)
    # softplus(z) - y*z == -[y log s(z) + (1-y) log(1-s(z))]
    return (F.softplus(logits) - logits * y).mean()


def delta_mse_loss(pred_delta, true_delta):
    pred_delta = _as_tensor(pred_delta)
    true_delta = _as_tensor(true_delta)
    if pred_delta.shape != true_delta.shape:
        raise ShapeError(f"delta shapes differ: {pred_delta.shape} vs {true_delta.shape}")
    diff = pred_delta - true_delta
    return (diff * diff).mean()


def pointnet_total_loss(l_cls, l_rec, alpha_cls=DEFAULT_ALPHA_CLS, alpha_rec=DEFAULT_ALPHA_REC):
    if alpha_cls < 0 or alpha_rec < 0:
        raise ValueError("loss weights must be non-negative")
    l_cls = _as_tensor(l_cls)
    l_rec = _as_tensor(l_rec)
    total = l_cls * alpha_cls + l_rec * alpha_rec
    return LossBreakdown(
        total, {"cls": l_cls, "rec": l_rec}, {"cls": alpha_cls, "rec": alpha_rec}
    )


def _sq_norm_mean(diff):
    # squared L2 norm over the trailing axis, averaged over every other axis
    return (diff * diff).sum(axis=-1).mean()


def vq_total_loss(rec_loss, z_e, embeddings, alpha=DEFAULT_VQ_ALPHA, beta=DEFAULT_VQ_BETA):
    """Reconstruction + codebook + commitment terms.

    The codebook term sees the encoder output through a stop-gradient, so it
    only moves the embeddings; the commitment term stops the embeddings, so it
    only moves the encoder.
    """
    rec_loss = _as_tensor(rec_loss)
    if z_e.shape != embeddings.shape:
        raise ShapeError(f"z_e {z_e.shape} and embeddings {embeddings.shape} differ in shape")
    codebook = _sq_norm_mean(stop_gradient(z_e) - embeddings)
    commit = _sq_norm_mean(z_e - stop_gradient(embeddings))
    total = rec_loss + codebook * alpha + commit * beta
    return LossBreakdown(
        total,
        {"chamfer": rec_loss, "codebook": codebook, "commit": commit},
        {"chamfer": 1.0, "codebook": alpha, "commit": beta},
    )
