"""Point-cloud containers and the deterministic geometric kernels.

Everything here is a pure function of its inputs and seed. Distances are
evaluated in float64 on the float32 coordinates so that tie-breaking is
reproducible and matches straightforward reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

STD_FLOOR = 1e-8


class InvalidArgumentError(ValueError):
    """A kernel was called with arguments outside its domain."""


@dataclass(frozen=True)
class PointCloud:
    """Ordered ``(N, 3)`` float32 coordinates; point identity is the row index."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise InvalidArgumentError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class PerturbationRecord:
    perturbed: PointCloud
    mask: np.ndarray
    sigma: float
    seed: int
    centers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class PatchSet:
    """``c`` patches of ``n`` points, normalised per patch.

    ``patches[i] = (cloud[indices[i]] - means[i]) / stds[i]`` where ``means``
    is a 3-vector and ``stds`` a scalar per patch.
    """

    centers: np.ndarray  # (c, 3) coordinates of the FPS centers
    center_indices: np.ndarray  # (c,)
    indices: np.ndarray  # (c, n)
    patches: np.ndarray  # (c, n, 3)
    means: np.ndarray  # (c, 3)
    stds: np.ndarray  # (c,)

    @property
    def c(self):
        return self.indices.shape[0]

    @property
    def n(self):
        return self.indices.shape[1]

    def denormalize(self, patches=None):
        """Map patch-frame coordinates back to the cloud frame."""
        p = self.patches if patches is None else np.asarray(patches)
        return p * self.stds[:, None, None] + self.means[:, None, :]

    def normalize(self, points):
        """Express ``(c, n, 3)`` cloud-frame points in this patch set's frames."""
        return normalize_patches(points, self.means, self.stds)


def _coords(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float32)


def _check_count(name, k, n_points):
    if int(k) != k or k < 1:
        raise InvalidArgumentError(f"{name} must be a positive integer, got {k}")
    if k > n_points:
        raise InvalidArgumentError(f"{name}={k} exceeds the number of points {n_points}")


def fps(cloud, k, seed=0, start=None):
    """Farthest point sampling; returns ``k`` distinct indices.

    The first index is drawn from ``default_rng(seed)`` unless ``start`` is
    given. Each later index maximises the distance to the already selected
    set, ties going to the lowest index.
    """
    pts = _coords(cloud).astype(np.float64)
    n_points = pts.shape[0]
    _check_count("k", k, n_points)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n_points))
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    min_d = ((pts - pts[start]) ** 2).sum(axis=1)
    min_d[start] = -1.0
    for i in range(1, k):
        j = int(np.argmax(min_d))
        selected[i] = j
        d = ((pts - pts[j]) ** 2).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[selected[: i + 1]] = -1.0
    return selected


def knn(cloud, query_points, n):
    """Indices of the ``n`` nearest cloud points for each query, nearest first.

    Ties are broken by lower index.
    """
    pts = _coords(cloud).astype(np.float64)
    q = np.asarray(query_points, dtype=np.float32).astype(np.float64).reshape(-1, 3)
    _check_count("n", n, pts.shape[0])
    d = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :n]


def perturb(cloud, num_centers=20, patch_size=20, sigma=0.03, seed=0, centers="random"):
    """Add Gaussian noise to the union of ``num_centers`` KNN patches.

    Centers are drawn uniformly without replacement (or by FPS when
    ``centers="fps"``). A point that falls in several patches is noised once.
    """
    pts = _coords(cloud)
    n_points = pts.shape[0]
    _check_count("num_centers", num_centers, n_points)
    _check_count("patch_size", patch_size, n_points)
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    if centers == "random":
        center_idx = rng.choice(n_points, size=num_centers, replace=False)
    elif centers == "fps":
        center_idx = fps(pts, num_centers, start=int(rng.integers(n_points)))
    else:
        raise InvalidArgumentError(f"unknown center sampling {centers!r}")
    patches = knn(pts, pts[center_idx], patch_size)
    mask = np.zeros(n_points, dtype=bool)
    mask[patches.reshape(-1)] = True
    out = pts.copy()
    if sigma > 0:
        noise = rng.normal(0.0, sigma, size=(int(mask.sum()), 3))
        out[mask] = (pts[mask].astype(np.float64) + noise).astype(np.float32)
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PerturbationRecord(
        perturbed=PointCloud(out, label),
        mask=mask,
        sigma=float(sigma),
        seed=seed,
        centers=np.asarray(center_idx, dtype=np.int64),
    )


def normalize_patches(points, means, stds):
    p = np.asarray(points, dtype=np.float64)
    out = (p - np.asarray(means, np.float64)[:, None, :]) / np.asarray(stds, np.float64)[:, None, None]
    return out.astype(np.float32)


def patch_stats(raw):
    """Per-patch 3-vector mean and scalar std over all 3n centred coordinates."""
    raw = np.asarray(raw, dtype=np.float64)
    means = raw.mean(axis=1)
    centred = raw - means[:, None, :]
    stds = np.sqrt((centred**2).mean(axis=(1, 2)))
    return means, np.maximum(stds, STD_FLOOR)


def tokenize(cloud, c, n, seed=0):
    """FPS centers, KNN patches around them, and per-patch normalisation."""
    pts = _coords(cloud)
    center_idx = fps(pts, c, seed)
    indices = knn(pts, pts[center_idx], n)
    raw = pts[indices]
    means, stds = patch_stats(raw)
    return PatchSet(
        centers=pts[center_idx].copy(),
        center_indices=center_idx,
        indices=indices,
        patches=normalize_patches(raw, means, stds),
        means=means.astype(np.float32),
        stds=stds.astype(np.float32),
    )


def downsample(dense, m, seed=0):
    """Keep ``m`` points chosen by FPS, in selection order."""
    pts = _coords(dense)
    idx = fps(pts, m, seed)
    label = dense.label if isinstance(dense, PointCloud) else None
    return PointCloud(pts[idx], label)


def normalize_unit_sphere(points):
    """Center on the centroid and scale so the farthest point has radius 1."""
    p = np.asarray(points, dtype=np.float64)
    p = p - p.mean(axis=0)
    r = np.sqrt((p**2).sum(axis=1)).max()
    if r > 0:
        p = p / r
    return p.astype(np.float32)
