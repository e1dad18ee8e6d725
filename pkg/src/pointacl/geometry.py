"""Point clouds, patch grouping (FPS + KNN), perturbations and synthetic shapes."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Hashable, Optional

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "torus")

# Torus inscribed in the unit ball: major + minor radius = 1.
TORUS_MAJOR = 0.7
TORUS_MINOR = 0.3


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: Optional[Hashable] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (P, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PatchSet:
    """Grouped patches of one cloud; ``local_coords`` are center-subtracted."""

    center_indices: np.ndarray
    neighbor_indices: np.ndarray
    local_coords: np.ndarray
    centers: np.ndarray

    @property
    def n_patches(self) -> int:
        return len(self.center_indices)

    @property
    def group_size(self) -> int:
        return self.neighbor_indices.shape[1]


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def farthest_point_sample(cloud: PointCloud, n_centers: int, seed=0, first_index: Optional[int] = None) -> np.ndarray:
    """Greedy farthest point sampling.

    The first index is drawn uniformly from ``seed`` unless ``first_index`` forces it.
    Later picks maximize the minimum distance to the chosen set; ties go to the lowest index.
    """
    pts = cloud.points
    n = len(pts)
    if not 1 <= n_centers <= n:
        raise ValueError(f"n_centers must be in [1, {n}], got {n_centers}")
    if first_index is None:
        first_index = int(_rng(seed).integers(n))
    elif not 0 <= first_index < n:
        raise ValueError(f"first_index {first_index} out of range for {n} points")

    chosen = np.empty(n_centers, dtype=np.int64)
    chosen[0] = first_index
    min_dist = np.sum((pts - pts[first_index]) ** 2, axis=1)
    min_dist[first_index] = -1.0
    for i in range(1, n_centers):
        # argmax returns the first maximal entry -> lowest-index tie break
        nxt = int(np.argmax(min_dist))
        chosen[i] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_dist, d, out=min_dist)
        min_dist[chosen[: i + 1]] = -1.0
    return chosen


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points per query, ordered by distance then index."""
    d = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    # stable sort keeps the lowest index first among equal distances
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn_group(cloud: PointCloud, center_indices, k: int) -> PatchSet:
    pts = cloud.points
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    centers = pts[center_indices]
    nbrs = knn_indices(pts, centers, k)
    local = pts[nbrs] - centers[:, None, :]
    return PatchSet(center_indices, nbrs, local, centers)


def patchify(cloud: PointCloud, n_patches: int, k: int, seed=0) -> PatchSet:
    """FPS centers followed by KNN grouping, center-subtracted."""
    return knn_group(cloud, farthest_point_sample(cloud, n_patches, seed), k)


@dataclass(frozen=True)
class Perturbation:
    """One robustness perturbation. Build with the kind-specific constructors."""

    kind: str
    sigma: float = 0.0
    axis: str = "z"
    angle_range: tuple = (-30.0, 30.0)
    scale_range: tuple = (0.5, 1.5)
    ratio: float = 0.0
    seed: int = 0

    KINDS = ("gaussian_noise", "rotation", "scaling", "drop_points")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 <= self.ratio < 1:
            raise ValueError("drop ratio must be in [0, 1)")
        lo, hi = self.scale_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ValueError("scale range must be positive and ordered")
        if self.axis not in ("x", "y", "z"):
            raise ValueError(f"axis must be x, y or z, got {self.axis!r}")
        if self.angle_range[0] > self.angle_range[1]:
            raise ValueError("angle range must be ordered")

    @classmethod
    def gaussian_noise(cls, sigma: float, seed: int = 0) -> "Perturbation":
        return cls("gaussian_noise", sigma=float(sigma), seed=seed)

    @classmethod
    def rotation(cls, axis: str, low: float = -30.0, high: float = 30.0, seed: int = 0) -> "Perturbation":
        return cls("rotation", axis=axis, angle_range=(float(low), float(high)), seed=seed)

    @classmethod
    def scaling(cls, low: float = 0.5, high: float = 1.5, seed: int = 0) -> "Perturbation":
        return cls("scaling", scale_range=(float(low), float(high)), seed=seed)

    @classmethod
    def drop_points(cls, ratio: float, seed: int = 0) -> "Perturbation":
        return cls("drop_points", ratio=float(ratio), seed=seed)

    @property
    def name(self) -> str:
        if self.kind == "gaussian_noise":
            return f"gaussian_noise(sigma={self.sigma:g})"
        if self.kind == "rotation":
            lo, hi = self.angle_range
            return f"rotation({self.axis},{lo:g},{hi:g})"
        if self.kind == "scaling":
            lo, hi = self.scale_range
            return f"scaling({lo:g},{hi:g})"
        return f"drop_points(ratio={self.ratio:g})"

    def with_seed(self, seed: int) -> "Perturbation":
        return dataclasses.replace(self, seed=int(seed))


def rotation_matrix(axis: str, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise ValueError(f"axis must be x, y or z, got {axis!r}")


def perturb(cloud: PointCloud, p: Perturbation) -> PointCloud:
    rng = _rng(p.seed)
    pts = cloud.points
    if p.kind == "gaussian_noise":
        out = pts + rng.normal(0.0, p.sigma, size=pts.shape) if p.sigma > 0 else pts.copy()
    elif p.kind == "rotation":
        angle = rng.uniform(*p.angle_range) if p.angle_range[0] < p.angle_range[1] else p.angle_range[0]
        out = pts @ rotation_matrix(p.axis, angle).T
    elif p.kind == "scaling":
        out = pts * rng.uniform(*p.scale_range)
    else:
        n_drop = int(math.floor(p.ratio * len(pts)))
        keep = np.sort(rng.permutation(len(pts))[n_drop:])
        out = pts[keep]
    return PointCloud(out, cloud.label)


def _sample_torus(rng: np.random.Generator, n: int) -> np.ndarray:
    # rejection on the area element (R + r cos v) gives a uniform surface density
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * np.pi, m)
        v = rng.uniform(0, 2 * np.pi, m)
        w = rng.uniform(0, TORUS_MAJOR + TORUS_MINOR, m)
        ok = w <= TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        u, v = u[ok], v[ok]
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _sample_cube(rng: np.random.Generator, n: int) -> np.ndarray:
    half = 1.0 / math.sqrt(3.0)
    face = rng.integers(6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel] * half
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def synth_shape(kind: str, n_points: int, seed=0) -> PointCloud:
    """Uniform surface samples of a unit-ball-inscribed sphere, cube or torus."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = _rng(seed)
    if kind == "sphere":
        g = rng.normal(size=(n_points, 3))
        pts = g / np.linalg.norm(g, axis=1, keepdims=True)
    elif kind == "cube":
        pts = _sample_cube(rng, n_points)
    elif kind == "torus":
        pts = _sample_torus(rng, n_points)
    else:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    return PointCloud(pts, kind)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))
