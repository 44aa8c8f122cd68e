"""Oriented local volumes that carry the coarse deformation to Gaussians.

A volume is an anchor point, its k-1 nearest neighbours (fixed over time)
and a triangle (anchor + two closest neighbours) whose per-frame orientation
gives the volume's rotation frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

VOLUME_SIZE = 20
DEGENERATE_AREA = 1e-10


@dataclass
class VolumeSet:
    members: np.ndarray  # (M, k): anchor index first, then its k-1 neighbours
    triangles: np.ndarray  # (M, 3): anchor + two orientation neighbours

    @property
    def k(self) -> int:
        return self.members.shape[1]

    def __len__(self) -> int:
        return len(self.members)

    def points(self, coarse):
        """Per-volume point sets V^t (M, k, 3) from coarse points (M, 3)."""
        if isinstance(coarse, Tensor):
            return ad.gather(coarse, self.members)
        return np.asarray(coarse)[self.members]


def _triangle_area(p1, p2, p3) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(p2 - p1, p3 - p1), axis=-1)


def build_volumes(points_ref: np.ndarray, k: int = VOLUME_SIZE) -> VolumeSet:
    """kNN volumes on the reference-frame points, one per point."""
    pts = np.asarray(points_ref, dtype=np.float64)
    M = len(pts)
    if len(np.unique(pts, axis=0)) < k:
        raise ValueError(f"need at least k={k} distinct points, got {len(np.unique(pts, axis=0))}")
    _, nn = cKDTree(pts).query(pts, k=k)
    # Put the anchor first even when duplicates tie at distance zero.
    members = np.empty((M, k), dtype=np.int64)
    for i in range(M):
        rest = [j for j in nn[i] if j != i][: k - 1]
        members[i] = [i] + rest
    diag2 = float(np.sum((pts.max(0) - pts.min(0)) ** 2))
    tri = np.empty((M, 3), dtype=np.int64)
    for i in range(M):
        j = members[i, 1]
        for kk in members[i, 2:]:
            if _triangle_area(pts[i], pts[j], pts[kk]) > DEGENERATE_AREA * diag2:
                tri[i] = (i, j, kk)
                break
        else:
            raise ValueError(f"volume {i}: every candidate triangle is degenerate")
    return VolumeSet(members, tri)


def volume_frame(p1, p2, p3):
    """Rotation frame of a triangle, as columns (normal, centre->p1 direction, their cross).

    Inputs are (..., 3) arrays or tensors; output (..., 3, 3).
    """
    is_t = any(isinstance(p, Tensor) for p in (p1, p2, p3))
    p1, p2, p3 = (ad.as_tensor(p) for p in (p1, p2, p3))
    e1 = ad.normalize(p2 - p1)
    e2 = ad.normalize(p3 - p1)
    a1 = ad.normalize(ad.cross(e1, e2))
    centroid = (p1 + p2 + p3) * (1.0 / 3.0)
    a2 = ad.normalize(centroid - p1)
    # a2 lies in the triangle plane, so it is already orthogonal to a1.
    a3 = ad.cross(a1, a2)
    frame = ad.stack([a1, a2, a3], axis=-1)
    return frame if is_t else frame.data


def volume_frames(coarse, volumes: VolumeSet, previous: np.ndarray | None = None,
                  area_tol: float = 1e-12):
    """Frames T^t for all volumes from coarse points (M, 3).

    Triangles that are degenerate at this frame reuse ``previous`` frames;
    without ``previous`` a degenerate triangle is an error.
    """
    is_t = isinstance(coarse, Tensor)
    c = ad.as_tensor(coarse)
    tri = volumes.triangles
    p1, p2, p3 = (ad.gather(c, tri[:, i]) for i in range(3))
    area = _triangle_area(p1.data, p2.data, p3.data)
    pts = c.data
    diag2 = float(np.sum((pts.max(0) - pts.min(0)) ** 2))
    bad = area <= area_tol * max(diag2, 1e-300)
    frames = volume_frame(p1, p2, p3)
    if np.any(bad):
        if previous is None:
            raise ValueError(f"{int(bad.sum())} degenerate volume triangles and no previous frames")
        log.warning("reusing previous frames for %d degenerate volume triangles", int(bad.sum()))
        frames = ad.where(bad[:, None, None], np.asarray(previous, dtype=c.dtype), frames)
    return frames if is_t else frames.data


def gaussian_world_position(volume_points, weights):
    """x = sum_j softmax(w)_j V_j.  ``volume_points`` (..., k, 3), ``weights`` (..., k)."""
    is_t = isinstance(volume_points, Tensor) or isinstance(weights, Tensor)
    V = ad.as_tensor(volume_points)
    w = ad.as_tensor(weights)
    if w.shape[-1] != V.shape[-2]:
        raise ad.ShapeError(f"gaussian_world_position: {w.shape[-1]} weights for {V.shape[-2]} points")
    x = (ad.expand_dims(ad.softmax(w, axis=-1), -1) * V).sum(axis=-2)
    return x if is_t else x.data


def gaussian_world_rotation(frame, rotation):
    """R_bar = T @ R."""
    is_t = isinstance(frame, Tensor) or isinstance(rotation, Tensor)
    out = ad.matmul(ad.as_tensor(frame), ad.as_tensor(rotation))
    return out if is_t else out.data
