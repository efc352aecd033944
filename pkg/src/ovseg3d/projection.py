"""Lift per-pixel 2D features onto 3D points over posed RGB-D frames, and
pool point features to a stack of voxel resolutions.

All functions here are pure; lifting averages over frames, so frame order
only matters up to float summation noise (< 1e-12).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraFrame

DEPTH_TOLERANCE = 0.02  # meters; occlusion test slack


@dataclass
class LiftedFeatures:
    """Per-point features averaged over observing frames.

    Rows with zero coverage are exactly zero; every other row is unit-norm.
    """

    features: np.ndarray  # (M, C)
    coverage_count: np.ndarray  # (M,) ints


def lift(points: np.ndarray, frames: list[CameraFrame], depth_tolerance: float = DEPTH_TOLERANCE) -> LiftedFeatures:
    """Project each point into every frame and average the visible pixels.

    A frame contributes when the point lands in front of the camera, inside
    the image, and within ``depth_tolerance`` of the recorded depth
    (nearest-neighbor pixel lookup). The per-point mean is re-normalized;
    unobserved points keep a zero row.
    """
    m = points.shape[0]
    if not frames:
        return LiftedFeatures(np.zeros((m, 0)), np.zeros(m, dtype=np.int64))
    c = frames[0].feature_image.shape[2]
    acc = np.zeros((m, c))
    coverage = np.zeros(m, dtype=np.int64)
    homo = np.concatenate([points, np.ones((m, 1))], axis=1)
    for frame in frames:
        frame.validate()
        cam = homo @ frame.world_to_camera.T  # (M, 4)
        z = cam[:, 2]
        uvw = cam[:, :3] @ frame.intrinsics.T
        front = z > 0
        u = np.full(m, -1.0)
        v = np.full(m, -1.0)
        u[front] = uvw[front, 0] / uvw[front, 2]
        v[front] = uvw[front, 1] / uvw[front, 2]
        px = np.rint(u).astype(np.int64)
        py = np.rint(v).astype(np.int64)
        h, w = frame.depth.shape
        visible = front & (px >= 0) & (px < w) & (py >= 0) & (py < h)
        idx = np.flatnonzero(visible)
        if idx.size == 0:
            continue
        depth_at = frame.depth[py[idx], px[idx]]
        ok = (depth_at > 0) & (np.abs(z[idx] - depth_at) <= depth_tolerance)
        idx = idx[ok]
        if idx.size == 0:
            continue
        acc[idx] += frame.feature_image[py[idx], px[idx]]
        coverage[idx] += 1

    features = np.zeros_like(acc)
    seen = coverage > 0
    mean = acc[seen] / coverage[seen, None]
    norms = np.linalg.norm(mean, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 1e-12
    mean[nonzero] /= norms[nonzero]
    features[seen] = mean
    return LiftedFeatures(features=features, coverage_count=coverage)


@dataclass
class ScalePyramid:
    """Voxel grids at doubling resolutions over one point set.

    ``assignments[s]`` maps each point to its scale-s voxel;
    ``centroids[s]`` is the mean position per voxel. Feature pooling is an
    arithmetic mean over member rows.
    """

    base_voxel: float
    voxel_sizes: list[float]
    assignments: list[np.ndarray]  # per scale: (M,) voxel index
    num_voxels: list[int]
    centroids: list[np.ndarray]  # per scale: (V_s, 3)

    @property
    def num_scales(self) -> int:
        return len(self.voxel_sizes)

    def pool(self, scale: int, values: np.ndarray) -> np.ndarray:
        """Mean of member rows per scale-``scale`` voxel (plain numpy)."""
        seg = self.assignments[scale]
        n = self.num_voxels[scale]
        sums = np.zeros((n,) + values.shape[1:])
        np.add.at(sums, seg, values)
        counts = np.bincount(seg, minlength=n).astype(np.float64)
        return sums / counts.reshape((-1,) + (1,) * (values.ndim - 1))

    def unpool(self, scale: int, voxel_values: np.ndarray) -> np.ndarray:
        """Broadcast per-voxel values back to the points they contain."""
        if voxel_values.shape[0] != self.num_voxels[scale]:
            raise ValueError(
                f"scale {scale} has {self.num_voxels[scale]} voxels, got {voxel_values.shape[0]} rows"
            )
        return voxel_values[self.assignments[scale]]


def build_pyramid(points: np.ndarray, num_scales: int, base_voxel: float) -> ScalePyramid:
    """Assign points to voxels at ``num_scales`` doubling voxel sizes.

    Voxel key = floor(coordinate / voxel_size) per axis; voxel order is the
    lexicographic key order, so the layout is deterministic.
    """
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")
    if base_voxel <= 0:
        raise ValueError("base_voxel must be positive")
    sizes, assignments, counts, centroids = [], [], [], []
    for s in range(num_scales):
        size = base_voxel * (2.0**s)
        keys = np.floor(points / size).astype(np.int64)
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        n = int(inverse.max()) + 1 if inverse.size else 0
        sums = np.zeros((n, 3))
        np.add.at(sums, inverse, points)
        member_counts = np.bincount(inverse, minlength=n).astype(np.float64)
        sizes.append(size)
        assignments.append(inverse)
        counts.append(n)
        centroids.append(sums / member_counts[:, None])
    return ScalePyramid(
        base_voxel=base_voxel,
        voxel_sizes=sizes,
        assignments=assignments,
        num_voxels=counts,
        centroids=centroids,
    )
