"""Point clouds, voxel downsampling, and exact spatial queries.

Every downstream stage consumes these primitives, so the contracts here are
strict: voxel keys are anchored at the world origin, and radius queries are
exact (kd-tree accelerated, then filtered against the true Euclidean
distance) rather than approximate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

CLASS_NAMES = ("background", "cane", "cordon", "post", "leaf", "sign")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

NO_LABEL = -1
NO_CAMERA = -1


@dataclass(frozen=True)
class Point:
    """Single-point view: position in meters plus optional provenance."""

    position: np.ndarray
    label: int = NO_LABEL
    camera_id: int = NO_CAMERA
    camera_distance: float = float("nan")

    @property
    def label_name(self) -> Optional[str]:
        return CLASS_NAMES[self.label] if self.label >= 0 else None


class PointCloud:
    """Ordered collection of 3D points with optional label/camera columns.

    Stored column-wise as numpy arrays. Immutable by convention: operations
    return new clouds and never mutate the arrays in place. ``labels`` uses
    -1 for unlabeled, ``camera_ids`` -1 for unknown, and ``camera_distances``
    NaN for unknown.
    """

    __slots__ = ("positions", "labels", "camera_ids", "camera_distances")

    def __init__(self, positions, labels=None, camera_ids=None, camera_distances=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(positions)):
            raise ValueError("point positions must be finite")
        n = len(positions)
        self.positions = positions
        self.labels = self._column(labels, n, np.int16, NO_LABEL)
        self.camera_ids = self._column(camera_ids, n, np.int32, NO_CAMERA)
        if camera_distances is None:
            cd = np.full(n, np.nan)
        else:
            cd = np.asarray(camera_distances, dtype=np.float64).reshape(n)
            if np.any(cd[~np.isnan(cd)] < 0):
                raise ValueError("camera_distance must be >= 0 when present")
        self.camera_distances = cd

    @staticmethod
    def _column(values, n, dtype, fill):
        if values is None:
            return np.full(n, fill, dtype=dtype)
        return np.asarray(values, dtype=dtype).reshape(n)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty((0, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    def point(self, i: int) -> Point:
        return Point(
            self.positions[i],
            int(self.labels[i]),
            int(self.camera_ids[i]),
            float(self.camera_distances[i]),
        )

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            self.positions[idx],
            self.labels[idx],
            self.camera_ids[idx],
            self.camera_distances[idx],
        )

    def with_labels(self, label: int) -> "PointCloud":
        return PointCloud(
            self.positions,
            np.full(len(self), label, dtype=np.int16),
            self.camera_ids,
            self.camera_distances,
        )

    def select_labels(self, labels) -> "PointCloud":
        """Points whose label is in ``labels`` (sequence of class indices)."""
        mask = np.isin(self.labels, np.asarray(list(labels), dtype=np.int16))
        return self.subset(np.flatnonzero(mask))

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            np.concatenate([c.camera_ids for c in clouds]),
            np.concatenate([c.camera_distances for c in clouds]),
        )


def voxel_keys(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates, grid anchored at the world origin."""
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be > 0, got {voxel_size}")
    return np.floor(np.asarray(positions, dtype=np.float64) / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One point per occupied voxel, placed at the member centroid.

    The majority label of the voxel's members is carried over (ties broken
    by the lowest class index; voxels with no labeled member stay unlabeled).
    Output voxels appear in order of first occurrence in the input, so the
    result is deterministic given the input order. Camera provenance does
    not survive resampling.
    """
    keys = voxel_keys(cloud.positions, voxel_size)
    if len(cloud) == 0:
        return PointCloud.empty()
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    n_vox = len(counts)

    centroids = np.zeros((n_vox, 3))
    np.add.at(centroids, inverse, cloud.positions)
    centroids /= counts[:, None]

    n_classes = len(CLASS_NAMES)
    votes = np.zeros((n_vox, n_classes), dtype=np.int64)
    labeled = cloud.labels >= 0
    if np.any(labeled):
        np.add.at(votes, (inverse[labeled], cloud.labels[labeled]), 1)
    labels = np.where(votes.max(axis=1) > 0, votes.argmax(axis=1), NO_LABEL).astype(np.int16)

    first_seen = np.full(n_vox, len(cloud), dtype=np.int64)
    np.minimum.at(first_seen, inverse, np.arange(len(cloud)))
    order = np.argsort(first_seen, kind="stable")
    return PointCloud(centroids[order], labels[order])


def count_filled_voxels(cloud: PointCloud, voxel_size: float) -> int:
    """Number of distinct occupied voxels at the given voxel size."""
    keys = voxel_keys(cloud.positions, voxel_size)
    if len(cloud) == 0:
        return 0
    return len(np.unique(keys, axis=0))


class SpatialIndex:
    """Exact radius / nearest-neighbor queries over a fixed set of points.

    A kd-tree prunes candidates; results are then filtered against the true
    Euclidean distance so that ``radius_query(q, r)`` returns exactly the
    indices with ``||p_i - q|| <= r`` (inclusive boundary).
    """

    # Slack applied to the kd-tree radius so boundary-exact points are never
    # pruned before the exact filter runs.
    _SLACK = 1.0 + 1e-9

    def __init__(self, positions):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def __len__(self) -> int:
        return len(self.positions)

    def radius_query(self, center, radius: float) -> np.ndarray:
        """Sorted indices of points within ``radius`` of ``center``."""
        if radius < 0:
            raise ValueError("radius must be >= 0")
        if self._tree is None:
            return np.empty(0, dtype=np.int64)
        center = np.asarray(center, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(center, radius * self._SLACK), dtype=np.int64)
        if len(cand) == 0:
            return cand
        d = np.linalg.norm(self.positions[cand] - center, axis=1)
        return np.sort(cand[d <= radius])

    def nearest(self, center) -> tuple[int, float]:
        """(index, distance) of the closest point; raises on an empty index."""
        if self._tree is None:
            raise ValueError("nearest query on empty index")
        d, i = self._tree.query(np.asarray(center, dtype=np.float64).reshape(3))
        return int(i), float(d)

    def nearest_many(self, centers) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest query: (indices, distances) per row of centers."""
        if self._tree is None:
            raise ValueError("nearest query on empty index")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        d, i = self._tree.query(centers)
        return i.astype(np.int64), d


def build_spatial_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.positions)
