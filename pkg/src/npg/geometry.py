"""Pinhole cameras, rotations and image sampling.

Convention: world-to-camera extrinsics, OpenCV camera axes (+x right, +y
down, +z forward).  Pixel ``(row i, col j)`` has its centre at image
coordinates ``(u, v) = (j, i)``.  Images are ``(H, W, C)`` float arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# OpenGL/Blender camera axes (y up, z back) -> OpenCV axes.
GL_TO_CV = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class Camera:
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("camera extrinsics must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise ValueError("camera rotation is not orthonormal with determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def c2w_opengl(self) -> np.ndarray:
        """Camera-to-world matrix in the NeRF/Blender axis convention."""
        m = np.eye(4)
        m[:3, :3] = self.R.T @ GL_TO_CV
        m[:3, 3] = self.center
        return m

    @classmethod
    def from_c2w_opengl(cls, c2w, fx, fy, cx, cy, width, height) -> "Camera":
        c2w = np.asarray(c2w, dtype=np.float64)
        rot = c2w[:3, :3] @ GL_TO_CV
        R = rot.T
        return cls(R, -R @ c2w[:3, 3], fx, fy, cx, cy, width, height)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye, fx, fy, cx, cy, width, height)

    def moved(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        """The same view of a world moved by ``x -> rotation @ x + translation``."""
        R = self.R @ rotation.T
        return Camera(R, self.t - R @ translation, self.fx, self.fy, self.cx, self.cy,
                      self.width, self.height)


def to_camera(camera: Camera, points):
    """World points (N, 3) -> camera-space points (N, 3)."""
    if isinstance(points, Tensor):
        return points @ camera.R.T.astype(points.dtype) + camera.t.astype(points.dtype)
    return np.asarray(points) @ camera.R.T + camera.t


def project(camera: Camera, points, near: float = 1e-8):
    """Pinhole projection.

    Returns ``(uv, depth, visible)``; ``uv`` is (N, 2) in pixels.  Points with
    depth <= ``near`` are flagged invisible and their ``uv`` is meaningless
    (finite, computed with depth 1).  Accepts arrays or tensors; a tensor input
    yields a differentiable ``uv``.
    """
    pc = to_camera(camera, points)
    is_t = isinstance(pc, Tensor)
    depth = pc.data[:, 2] if is_t else pc[:, 2]
    visible = depth > near
    safe_z = np.where(visible, depth, 1.0)
    if is_t:
        z = ad.where(visible, pc[:, 2], safe_z.astype(pc.dtype))
        u = pc[:, 0] / z * camera.fx + camera.cx
        v = pc[:, 1] / z * camera.fy + camera.cy
        return ad.stack([u, v], axis=1), depth.copy(), visible
    uv = np.stack([camera.fx * pc[:, 0] / safe_z + camera.cx,
                   camera.fy * pc[:, 1] / safe_z + camera.cy], axis=1)
    return uv, depth.copy(), visible


def quat_to_matrix(q):
    """Unit-normalised quaternion(s) (w, x, y, z) -> rotation matrices (..., 3, 3).

    Works on arrays or tensors (differentiable through the normalisation).
    """
    is_t = isinstance(q, Tensor)
    qd = q.data if is_t else np.asarray(q, dtype=np.float64)
    if qd.shape[-1] != 4:
        raise ValueError(f"quaternion must have 4 components, got shape {qd.shape}")
    if np.any(np.linalg.norm(qd, axis=-1) < 1e-12):
        raise ValueError("zero quaternion has no rotation")
    if not is_t:
        q = Tensor(qd)
    qn = ad.normalize(q, axis=-1)
    w, x, y, z = (qn[..., i] for i in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    m = ad.stack([ad.stack(r, axis=-1) for r in rows], axis=-2)
    return m if is_t else m.data


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) -> unit quaternions (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[n] = q * np.sign(q[0]) if q[0] != 0 else q
    return out.reshape(R.shape[:-2] + (4,))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def bilinear_sample(buffer, locations):
    """Bilinear interpolation of ``buffer`` (H, W, C) at pixel ``locations`` (N, 2).

    Locations are (u, v) = (column, row) and are clamped to the image border.
    Differentiable with respect to the buffer and the locations; the location
    gradient is zero along a clamped axis.
    """
    buf = ad.as_tensor(buffer)
    loc = ad.as_tensor(locations, dtype=buf.dtype)
    H, W = buf.shape[:2]
    if loc.shape[-1] != 2:
        raise ad.ShapeError(f"bilinear_sample: locations must be (N, 2), got {loc.shape}")
    u_raw, v_raw = loc.data[:, 0], loc.data[:, 1]
    u = np.clip(u_raw, 0.0, W - 1)
    v = np.clip(v_raw, 0.0, H - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    b = buf.data
    c00, c01, c10, c11 = b[v0, u0], b[v0, u1], b[v1, u0], b[v1, u1]
    top = c00 * (1 - fu) + c01 * fu
    bot = c10 * (1 - fu) + c11 * fu
    out = top * (1 - fv) + bot * fv
    free_u = (u_raw >= 0) & (u_raw <= W - 1)
    free_v = (v_raw >= 0) & (v_raw <= H - 1)

    def vjp(g):
        gbuf = None
        if buf.requires_grad:
            gbuf = np.zeros_like(b)
            np.add.at(gbuf, (v0, u0), g * (1 - fu) * (1 - fv))
            np.add.at(gbuf, (v0, u1), g * fu * (1 - fv))
            np.add.at(gbuf, (v1, u0), g * (1 - fu) * fv)
            np.add.at(gbuf, (v1, u1), g * fu * fv)
        gloc = None
        if loc.requires_grad:
            du = ((c01 - c00) * (1 - fv) + (c11 - c10) * fv)
            dv = bot - top
            gloc = np.stack([np.sum(g * du, axis=1) * free_u,
                             np.sum(g * dv, axis=1) * free_v], axis=1)
        return gbuf, gloc

    return ad.record(out, (buf, loc), vjp, "bilinear_sample")
