"""Skeleton type: 3D line segments with shared endpoints and radii."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "vineskel-skeleton/1"


@dataclass
class Skeleton:
    """Line segments with shared endpoint identities and per-segment radii.

    Endpoint sharing is structural: segments reference rows of ``endpoints``
    so connected segments stay connected no matter how the coordinates move.
    ``radii`` holds NaN until radius estimation has run.
    """

    endpoints: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    seg_a: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    seg_b: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    radii: np.ndarray = field(default_factory=lambda: np.empty(0))
    edge_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    cluster_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.endpoints = np.asarray(self.endpoints, dtype=np.float64).reshape(-1, 3)
        self.seg_a = np.asarray(self.seg_a, dtype=np.int64).ravel()
        self.seg_b = np.asarray(self.seg_b, dtype=np.int64).ravel()
        n = len(self.seg_a)
        self.radii = np.asarray(self.radii, dtype=np.float64).ravel() if len(self.radii) else np.full(n, np.nan)
        self.edge_ids = self._ids(self.edge_ids, n)
        self.cluster_ids = self._ids(self.cluster_ids, n)

    @staticmethod
    def _ids(arr, n):
        arr = np.asarray(arr, dtype=np.int64).ravel()
        return arr if len(arr) == n else np.zeros(n, dtype=np.int64)

    @property
    def n_segments(self) -> int:
        return len(self.seg_a)

    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.endpoints[self.seg_b] - self.endpoints[self.seg_a], axis=1)

    def total_length(self) -> float:
        return float(self.lengths().sum())

    def segment_points(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.endpoints[self.seg_a[k]], self.endpoints[self.seg_b[k]]

    @staticmethod
    def merge(parts: list["Skeleton"]) -> "Skeleton":
        """Concatenate cluster skeletons, offsetting endpoint indices."""
        parts = [p for p in parts if p.n_segments]
        if not parts:
            return Skeleton()
        offset = 0
        eps, sa, sb, rad, eids, cids = [], [], [], [], [], []
        for p in parts:
            eps.append(p.endpoints)
            sa.append(p.seg_a + offset)
            sb.append(p.seg_b + offset)
            rad.append(p.radii)
            eids.append(p.edge_ids)
            cids.append(p.cluster_ids)
            offset += len(p.endpoints)
        return Skeleton(
            np.concatenate(eps), np.concatenate(sa), np.concatenate(sb),
            np.concatenate(rad), np.concatenate(eids), np.concatenate(cids),
        )

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "endpoints": [[float(c) for c in e] for e in self.endpoints],
            "segments": [
                {
                    "a": int(self.seg_a[k]),
                    "b": int(self.seg_b[k]),
                    "radius": None if np.isnan(self.radii[k]) else float(self.radii[k]),
                    "edge_id": int(self.edge_ids[k]),
                    "cluster_id": int(self.cluster_ids[k]),
                }
                for k in range(self.n_segments)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        if data.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported skeleton version {data.get('version')!r}")
        segs = data["segments"]
        return cls(
            np.array(data["endpoints"], dtype=np.float64).reshape(-1, 3),
            np.array([s["a"] for s in segs], dtype=np.int64),
            np.array([s["b"] for s in segs], dtype=np.int64),
            np.array([np.nan if s.get("radius") is None else s["radius"] for s in segs]),
            np.array([s.get("edge_id", 0) for s in segs], dtype=np.int64),
            np.array([s.get("cluster_id", 0) for s in segs], dtype=np.int64),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))
