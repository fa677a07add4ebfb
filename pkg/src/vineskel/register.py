"""Pairwise ICP registration of per-frame clouds and far-camera cleanup.

Frames are placed with their robot extrinsics, refined by point-to-point
ICP chained along the horizontal camera sequence, and the down-facing
frames are then aligned against the combined horizontal cloud. Stereo
depth error grows quadratically with distance, so points seen from much
closer by another camera are discarded afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud, SpatialIndex

DEFAULT_MAX_CORR_DIST = 0.05
DEFAULT_OVERLAP_RADIUS = 0.02
DEFAULT_DISTANCE_MARGIN = 0.25


class AlignmentError(RuntimeError):
    """ICP could not produce a rigid fit; carries the iteration count."""

    def __init__(self, message: str, iterations: int = 0):
        self.iterations = iterations
        super().__init__(f"{message} (iteration {iterations})")


class MissingProvenanceError(ValueError):
    """Operation requires per-point camera_distance but some are missing."""


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("transform must be finite")
        if abs(np.linalg.det(r) - 1.0) > 1e-9 or np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal with det 1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass
class FramePose:
    camera_id: int
    initial_pose: RigidTransform
    refined_pose: RigidTransform = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.refined_pose is None:
            self.refined_pose = self.initial_pose


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rigid_fit(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid fit mapping source onto target.

    Cross-covariance SVD with reflection correction. Raises AlignmentError
    when the correspondence geometry is rank-deficient (fewer than two
    significant directions).
    """
    if len(source) < 3:
        raise AlignmentError(f"need >= 3 correspondences, got {len(source)}")
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    h = (source - sc).T @ (target - tc)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0] * 1e-12, 1e-300):
        raise AlignmentError("degenerate geometry: rank-deficient covariance")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    r = _orthonormalize(r)
    return RigidTransform(r, tc - r @ sc)


def icp_align(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform = None,
    max_iters: int = 50,
    tol: float = 1e-7,
    max_corr_dist: float = DEFAULT_MAX_CORR_DIST,
) -> tuple[RigidTransform, np.ndarray]:
    """Point-to-point ICP; returns (transform, residual history).

    Each iteration matches every transformed source point to its nearest
    target point, drops pairs farther than ``max_corr_dist`` (pass None to
    keep all), solves the closed-form rigid fit, and applies it. The
    residual is the RMS distance over the kept pairs; iteration stops when
    it improves by less than ``tol`` or stops improving at all, so the
    recorded residual sequence is non-increasing.
    """
    if init is None:
        init = RigidTransform.identity()
    if len(source) < 3 or len(target) < 3:
        raise AlignmentError(f"need >= 3 points, got {len(source)} vs {len(target)}")
    index = SpatialIndex(target.positions)
    transform = init
    previous = init
    residuals = []
    for it in range(max_iters + 1):
        moved = transform.apply(source.positions)
        nn_idx, nn_d = index.nearest_many(moved)
        if max_corr_dist is not None:
            keep = nn_d <= max_corr_dist
        else:
            keep = np.ones(len(moved), dtype=bool)
        if keep.sum() < 3:
            raise AlignmentError("fewer than 3 correspondences in range", it)
        rms = float(np.sqrt(np.mean(nn_d[keep] ** 2)))
        if residuals and rms >= residuals[-1]:
            transform = previous  # revert the step that stopped improving
            break
        converged = residuals and residuals[-1] - rms < tol
        residuals.append(rms)
        if converged or it == max_iters:
            break
        try:
            step = rigid_fit(moved[keep], target.positions[nn_idx[keep]])
        except AlignmentError as err:
            raise AlignmentError(str(err), it) from None
        previous = transform
        transform = step.compose(transform)
    return transform, np.array(residuals)


@dataclass
class RegistrationSchedule:
    """Frame indices to chain horizontally, then align vertically."""

    horizontal: list[int]
    vertical: list[int] = field(default_factory=list)

    @classmethod
    def all_horizontal(cls, n: int) -> "RegistrationSchedule":
        return cls(horizontal=list(range(n)))


def register_scan(
    frames: list[tuple[PointCloud, FramePose]],
    schedule: RegistrationSchedule = None,
    max_iters: int = 50,
    tol: float = 1e-7,
    max_corr_dist: float = DEFAULT_MAX_CORR_DIST,
) -> tuple[PointCloud, list[FramePose]]:
    """Chain frames into one cloud; returns (combined, refined poses).

    Horizontal frames are ICP-refined pairwise against the previous frame's
    transformed cloud; vertical frames are aligned to the combined
    horizontal cloud. Points keep their camera id, and camera_distance is
    filled in from the refined camera center of their source frame.
    """
    if not frames:
        raise ValueError("register_scan needs at least one frame")
    if schedule is None:
        schedule = RegistrationSchedule.all_horizontal(len(frames))

    poses = [p for _, p in frames]
    placed: dict[int, PointCloud] = {}

    def place(k: int, pose: RigidTransform) -> PointCloud:
        cloud, fp = frames[k]
        moved = pose.apply(cloud.positions)
        center = pose.apply(np.zeros((1, 3)))[0]
        return PointCloud(
            moved,
            cloud.labels,
            np.full(len(cloud), fp.camera_id, dtype=np.int32),
            np.linalg.norm(moved - center, axis=1),
        )

    prev_idx = None
    for k in schedule.horizontal:
        cloud, fp = frames[k]
        if prev_idx is None:
            fp.refined_pose = fp.initial_pose
        else:
            try:
                refined, _ = icp_align(
                    cloud, placed[prev_idx], fp.initial_pose, max_iters, tol, max_corr_dist
                )
            except AlignmentError as err:
                raise AlignmentError(f"frame {k}: {err}", err.iterations) from None
            fp.refined_pose = refined
        placed[k] = place(k, fp.refined_pose)
        prev_idx = k

    horizontal = PointCloud.concatenate([placed[k] for k in schedule.horizontal])

    for k in schedule.vertical:
        cloud, fp = frames[k]
        try:
            refined, _ = icp_align(
                cloud, horizontal, fp.initial_pose, max_iters, tol, max_corr_dist
            )
        except AlignmentError as err:
            raise AlignmentError(f"frame {k}: {err}", err.iterations) from None
        fp.refined_pose = refined
        placed[k] = place(k, fp.refined_pose)

    order = schedule.horizontal + schedule.vertical
    return PointCloud.concatenate([placed[k] for k in order]), poses


def discard_far_points(
    cloud: PointCloud,
    overlap_radius: float = DEFAULT_OVERLAP_RADIUS,
    distance_margin: float = DEFAULT_DISTANCE_MARGIN,
) -> PointCloud:
    """Drop points whose neighborhood is seen much closer by another camera.

    A point is dropped when any neighbor within ``overlap_radius`` has a
    camera_distance smaller than its own by more than ``distance_margin``.
    Survivor order is preserved.
    """
    if len(cloud) == 0:
        return cloud
    cd = cloud.camera_distances
    if np.any(np.isnan(cd)):
        raise MissingProvenanceError(
            f"{int(np.isnan(cd).sum())} points lack camera_distance"
        )
    index = SpatialIndex(cloud.positions)
    pairs = index._tree.query_pairs(overlap_radius * SpatialIndex._SLACK, output_type="ndarray")
    drop = np.zeros(len(cloud), dtype=bool)
    if len(pairs):
        d = np.linalg.norm(cloud.positions[pairs[:, 0]] - cloud.positions[pairs[:, 1]], axis=1)
        pairs = pairs[d <= overlap_radius]
        i, j = pairs[:, 0], pairs[:, 1]
        drop[i[cd[i] - cd[j] > distance_margin]] = True
        drop[j[cd[j] - cd[i] > distance_margin]] = True
    return cloud.subset(np.flatnonzero(~drop))


def load_poses(path) -> dict[int, RigidTransform]:
    """Poses file: JSON array of {camera_id, pose: 16 row-major floats}."""
    data = json.loads(Path(path).read_text())
    out = {}
    for entry in data:
        m = np.array(entry["pose"], dtype=np.float64).reshape(4, 4)
        out[int(entry["camera_id"])] = RigidTransform.from_matrix(m)
    return out
