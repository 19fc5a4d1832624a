"""Synthetic datasets standing in for real image collections.

* ``mixture-a`` / ``mixture-b``: 2D Gaussian mixtures. A is the pretraining
  distribution (8 isotropic modes on a ring); B moves, shrinks, rotates and
  stretches those modes, so it needs more than a bias shift to reach.
* ``images:<family>``: procedural grayscale images (disks, bars, squares,
  rings) in [-1, 1].
* ``paired:<family>``: the same images with a blocky silhouette condition map.

Points are exposed to the denoisers as ``[N, 1, 1, 2]`` images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GaussianMixture2D:
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.means)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        w = np.full(self.k, 1.0 / self.k) if self.weights is None else self.weights
        labels = rng.choice(self.k, size=n, p=w)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, 2))
        pts = self.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)
        return pts, labels


def ring_mixture(k: int = 8, radius: float = 1.5, std: float = 0.12, rotation: float = 0.0,
                 shift=(0.0, 0.0), tangent_std: float | None = None, alternate: bool = False) -> GaussianMixture2D:
    """Modes on a circle; ``std`` is radial, ``tangent_std`` tangential (swapped on odd modes if ``alternate``)."""
    angles = rotation + 2 * math.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1) + np.asarray(shift)
    tangent_std = std if tangent_std is None else tangent_std
    covs = []
    for i, a in enumerate(angles):
        radial = np.array([math.cos(a), math.sin(a)])
        tangent = np.array([-math.sin(a), math.cos(a)])
        sr, st = (tangent_std, std) if alternate and i % 2 else (std, tangent_std)
        covs.append(sr ** 2 * np.outer(radial, radial) + st ** 2 * np.outer(tangent, tangent))
    return GaussianMixture2D(means, np.array(covs))


MIXTURES = {
    "mixture-a": lambda: ring_mixture(8, radius=1.5, std=0.12),
    "mixture-b": lambda: ring_mixture(8, radius=0.8, std=0.03, rotation=math.pi / 8, shift=(0.9, -0.6),
                                      tangent_std=0.25, alternate=True),
}


# -- procedural images ---------------------------------------------------------

FAMILIES = ("disks", "bars", "squares", "rings")


def render_shape(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One image in [-1, 1] plus its binary silhouette."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = rng.uniform(0.3, 0.7, 2) * size
    r = rng.uniform(0.15, 0.3) * size
    if family == "disks":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    elif family == "rings":
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        mask = (d <= r) & (d >= 0.55 * r)
    elif family == "squares":
        mask = (np.abs(xx - cx) <= r * 0.8) & (np.abs(yy - cy) <= r * 0.8)
    elif family == "bars":
        theta = rng.uniform(0, math.pi)
        dist = np.abs((xx - cx) * math.sin(theta) - (yy - cy) * math.cos(theta))
        mask = dist <= 0.2 * r + 0.6
    else:
        raise ValueError(f"unknown image family {family!r}")
    shade = rng.uniform(0.6, 1.0)
    img = np.where(mask, shade, -shade * 0.5)
    return img.astype(np.float32), mask.astype(np.float32)


def silhouette_map(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Downsample a mask by ``factor`` then upsample (nearest) back, in [-1, 1]."""
    s = mask.shape[0]
    small = mask.reshape(s // factor, factor, s // factor, factor).mean(axis=(1, 3)) > 0.5
    return (np.kron(small, np.ones((factor, factor))) * 2 - 1).astype(np.float32)


# -- dataset wrapper -----------------------------------------------------------------

@dataclass
class ToyDataset:
    """Deterministic train/eval pools for one dataset spec string."""

    spec: str
    seed: int = 0
    n_train: int = 20000
    n_eval: int = 2000
    image_size: int = 32
    train_x: np.ndarray = field(init=False, repr=False)
    train_y: np.ndarray = field(init=False, repr=False)
    eval_x: np.ndarray = field(init=False, repr=False)
    eval_y: np.ndarray = field(init=False, repr=False)
    train_cond: np.ndarray | None = field(init=False, repr=False, default=None)
    eval_cond: np.ndarray | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        total = self.n_train + self.n_eval
        if self.spec in MIXTURES:
            self.kind = "gaussian-mixture-2d"
            self.mixture = MIXTURES[self.spec]()
            pts, labels = self.mixture.sample(total, rng)
            x = pts.reshape(total, 1, 1, 2).astype(np.float32)
            cond = None
        else:
            prefix, _, family = self.spec.partition(":")
            if prefix not in ("images", "paired") or family not in FAMILIES:
                raise ValueError(f"unknown dataset spec {self.spec!r}")
            self.kind = "procedural-images" if prefix == "images" else "paired-conditional"
            imgs, masks = zip(*(render_shape(family, self.image_size, rng) for _ in range(total)))
            x = np.stack(imgs)[:, None]
            labels = np.zeros(total, dtype=np.int64)
            cond = np.stack([silhouette_map(m) for m in masks])[:, None] if prefix == "paired" else None
        # pools are disjoint slices of one stream
        self.train_x, self.eval_x = x[:self.n_train], x[self.n_train:]
        self.train_y, self.eval_y = labels[:self.n_train], labels[self.n_train:]
        if cond is not None:
            self.train_cond, self.eval_cond = cond[:self.n_train], cond[self.n_train:]

    @property
    def is_points(self) -> bool:
        return self.kind == "gaussian-mixture-2d"

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    def batch(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.n_train, size=n)
        cond = None if self.train_cond is None else self.train_cond[idx]
        return self.train_x[idx], self.train_y[idx], cond

    def eval_points(self, n: int | None = None) -> np.ndarray:
        x = self.eval_x if n is None else self.eval_x[:n]
        return x.reshape(len(x), -1)
