"""Datasets: synthetic analytic shapes and manifest-based ingestion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import PointCloud, downsample, normalize_unit_sphere
from .io import InvalidDataError, load_cloud, read_manifest

SHAPES = ("sphere", "cube", "cylinder", "torus", "cone")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass
class Dataset:
    clouds: list
    split: np.ndarray
    source: str = "synthetic"
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.split = np.asarray(self.split, dtype=object)
        if len(self.split) != len(self.clouds):
            raise ValueError("split assignment must have one entry per cloud")
        bad = set(self.split) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")

    def __len__(self):
        return len(self.clouds)

    def indices(self, split):
        return np.flatnonzero(self.split == split)

    def subset(self, split):
        return [self.clouds[i] for i in self.indices(split)]

    def points(self, split=None):
        idx = range(len(self.clouds)) if split is None else self.indices(split)
        return np.stack([self.clouds[i].points for i in idx])

    def labels(self, split=None):
        idx = range(len(self.clouds)) if split is None else self.indices(split)
        out = [self.clouds[i].label for i in idx]
        if any(label is None for label in out):
            raise InvalidDataError("dataset has unlabeled clouds")
        return np.asarray(out, dtype=np.int64)

    @property
    def has_labels(self):
        return all(c.label is not None for c in self.clouds)


# -- analytic surface samplers --------------------------------------------
def _sphere(m, rng):
    v = rng.normal(size=(m, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(m, rng):
    face = rng.integers(6, size=m)
    uv = rng.uniform(-1.0, 1.0, size=(m, 2))
    out = np.empty((m, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rows = axis == a
        others = [k for k in range(3) if k != a]
        out[rows, a] = sign[rows]
        out[np.ix_(rows, others)] = uv[rows]
    return out


def _cylinder(m, rng, radius=1.0, height=2.0):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    kind = rng.uniform(size=m) * (side + 2 * cap)
    theta = rng.uniform(0, 2 * np.pi, size=m)
    out = np.empty((m, 3))
    on_side = kind < side
    out[on_side, 0] = radius * np.cos(theta[on_side])
    out[on_side, 1] = radius * np.sin(theta[on_side])
    out[on_side, 2] = rng.uniform(-height / 2, height / 2, size=on_side.sum())
    caps = ~on_side
    r = radius * np.sqrt(rng.uniform(size=caps.sum()))
    out[caps, 0] = r * np.cos(theta[caps])
    out[caps, 1] = r * np.sin(theta[caps])
    out[caps, 2] = np.where(kind[caps] < side + cap, height / 2, -height / 2)
    return out


def _torus(m, rng, major=1.0, minor=0.35):
    out = np.empty((0, 3))
    while len(out) < m:
        u = rng.uniform(0, 2 * np.pi, size=2 * m)
        v = rng.uniform(0, 2 * np.pi, size=2 * m)
        # area element is proportional to (R + r cos v)
        keep = rng.uniform(size=2 * m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:m]


def _cone(m, rng, radius=1.0, height=2.0):
    slant = np.hypot(radius, height)
    lateral = np.pi * radius * slant
    base = np.pi * radius**2
    on_side = rng.uniform(size=m) * (lateral + base) < lateral
    theta = rng.uniform(0, 2 * np.pi, size=m)
    # distance from apex with density proportional to circumference
    t = np.sqrt(rng.uniform(size=m))
    r = np.where(on_side, radius * t, radius * np.sqrt(rng.uniform(size=m)))
    z = np.where(on_side, height / 2 - height * t, -height / 2)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus, "cone": _cone}


def sample_shape(name, m, rng):
    """``m`` area-uniform samples from the canonical surface of ``name``."""
    if name not in _SAMPLERS:
        raise ConfigError(f"unknown shape {name!r}; choose from {list(SHAPES)}")
    return _SAMPLERS[name](m, rng)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def split_assignment(labels, seed, val_fraction=0.2, test_fraction=0.0):
    """Seeded per-class shuffle into train/val/test."""
    labels = np.asarray(labels)
    split = np.full(len(labels), "train", dtype=object)
    rng = np.random.default_rng([seed, 7])
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        n_test = int(round(test_fraction * len(idx)))
        split[idx[:n_val]] = "val"
        split[idx[n_val : n_val + n_test]] = "test"
    return split


def synth_dataset(recipe, per_class, points=1024, seed=0, jitter=0.01, scale_range=(0.8, 1.2),
                  val_fraction=0.2, test_fraction=0.0):
    """Labeled clouds sampled from analytic shapes, one class per recipe entry.

    Each cloud gets a random rotation, a random per-axis scale and Gaussian
    jitter before being centred and scaled into the unit sphere.
    """
    recipe = list(recipe)
    if not recipe:
        raise ConfigError("recipe must name at least one shape")
    for name in recipe:
        if name not in _SAMPLERS:
            raise ConfigError(f"unknown shape {name!r}; choose from {list(SHAPES)}")
    clouds = []
    labels = []
    for label, name in enumerate(recipe):
        for i in range(per_class):
            rng = np.random.default_rng([seed, label, i])
            pts = sample_shape(name, points, rng)
            pts = pts * rng.uniform(*scale_range, size=3)
            pts = pts @ random_rotation(rng).T
            pts = pts + rng.normal(0.0, jitter, size=pts.shape)
            clouds.append(PointCloud(normalize_unit_sphere(pts), label))
            labels.append(label)
    split = split_assignment(labels, seed, val_fraction, test_fraction)
    return Dataset(clouds, split, source=f"synthetic:{','.join(recipe)}", class_names=recipe)


def fit_point_count(cloud, points, seed=0):
    """FPS-downsample or pad (by repeating seeded picks) to exactly ``points``."""
    n = len(cloud)
    if n == points:
        return cloud
    if n > points:
        return downsample(cloud, points, seed)
    rng = np.random.default_rng(seed)
    extra = rng.choice(n, size=points - n, replace=True)
    return PointCloud(np.concatenate([cloud.points, cloud.points[extra]]), cloud.label)


def load_dataset(manifest, points=1024, seed=0, val_fraction=0.2):
    """Load every file in a manifest, normalised and resampled to ``points``."""
    entries = read_manifest(manifest)
    raw_labels = [label for _, label, _ in entries]
    class_names = []
    if all(label is not None for label in raw_labels):
        class_names = sorted(set(raw_labels), key=lambda s: (len(s), s))
    elif any(label is not None for label in raw_labels):
        raise InvalidDataError(f"{manifest}: some entries have labels and some do not")
    clouds = []
    for i, (path, label, _) in enumerate(entries):
        cloud = load_cloud(path)
        lab = class_names.index(label) if label is not None else None
        cloud = PointCloud(normalize_unit_sphere(cloud.points), lab)
        clouds.append(fit_point_count(cloud, points, seed=seed + i))
    splits = [s for _, _, s in entries]
    if all(s is not None for s in splits):
        split = np.asarray(splits, dtype=object)
    else:
        strat = [c.label if c.label is not None else 0 for c in clouds]
        split = split_assignment(strat, seed, val_fraction)
    return Dataset(clouds, split, source=str(manifest), class_names=class_names)
