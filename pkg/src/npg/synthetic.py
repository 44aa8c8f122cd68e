"""Synthetic oracle scenes with an exactly low-rank deformation.

Every scene is a dense point object whose frame-t positions are
``sum_k alpha*_k(t) B*_k`` for a known basis.  Images are rendered with the
package rasterizer (isotropic Gaussians at the points), masks are
``alpha > 0.5`` and the flow is the composited 2D displacement of the points
between consecutive frames, on frame t's pixel grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coarse_model import write_container
from .dataset import SequenceDataset, save_dataset
from .gaussians import project_gaussians
from .geometry import Camera, project
from .rasterizer import rasterize

KINDS = ("bending-rod", "two-link", "breathing-sphere")
FOV_DEG = 40.0
CAMERA_DISTANCE = 5.0


@dataclass
class SyntheticScene:
    kind: str
    basis: np.ndarray  # (K*, P, 3)
    coefficients: np.ndarray  # (N, K*)
    colors: np.ndarray  # (P, 3)
    point_scale: float
    dataset: SequenceDataset
    test_dataset: SequenceDataset
    test_frames: np.ndarray  # frame index of each held-out view
    meta: dict = field(default_factory=dict)

    @property
    def k_star(self) -> int:
        return self.basis.shape[0]

    def points(self, t: int) -> np.ndarray:
        return np.einsum("k,kpi->pi", self.coefficients[t], self.basis)

    def trajectories(self) -> np.ndarray:
        """(P, N, 3) ground-truth point polylines."""
        return np.einsum("tk,kpi->pti", self.coefficients, self.basis)

    def bbox_diagonal(self) -> float:
        traj = self.trajectories().reshape(-1, 3)
        return float(np.linalg.norm(traj.max(0) - traj.min(0)))


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _rod_surface(n: int, length: float, radius: float, rng) -> np.ndarray:
    x = rng.uniform(-0.5 * length, 0.5 * length, n)
    ang = rng.uniform(0, 2 * math.pi, n)
    return np.stack([x, radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def _smooth(s: np.ndarray, j: int, rng) -> np.ndarray:
    """A smooth periodic-ish coefficient signal, distinct per mode index."""
    freq = 1.0 + 0.5 * j
    phase = rng.uniform(0, 2 * math.pi)
    return np.sin(2 * math.pi * freq * s + phase)


def _scene_basis(kind: str, k_star: int, n_frames: int, n_points: int, rng, amplitude: float):
    s = np.linspace(0.0, 1.0, n_frames)
    if kind == "bending-rod":
        X = _rod_surface(n_points, 2.0, 0.2, rng)
        x = X[:, 0]
        modes = []
        for j in range(k_star - 1):
            d = np.zeros_like(X)
            d[:, 1 + (j % 2)] = x ** (2 + j // 2) * (0.5 ** (j // 2))
            modes.append(d)
        coeffs = [np.ones(n_frames)] + [amplitude * _smooth(s, j, rng) for j in range(k_star - 1)]
    elif kind == "two-link":
        if k_star != 3:
            raise ValueError("the two-link scene is exactly rank 3; use k_star=3")
        X = _rod_surface(n_points, 2.0, 0.2, rng)
        # Rotating the x > 0 half about the z axis through the hinge at the
        # origin: R(th) = I + sin(th) A + (1 - cos(th)) A^2 on that half.
        A = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        right = (X[:, 0] > 0)[:, None]
        modes = [np.where(right, X @ A.T, 0.0), np.where(right, X @ (A @ A).T, 0.0)]
        theta = amplitude * 1.2 * _smooth(s, 0, rng)
        coeffs = [np.ones(n_frames), np.sin(theta), 1.0 - np.cos(theta)]
    elif kind == "breathing-sphere":
        if not 1 <= k_star <= 4:
            raise ValueError("breathing-sphere supports k_star in 1..4")
        X = 0.8 * _fibonacci_sphere(n_points)
        modes = []
        for j in range(k_star - 1):
            d = np.zeros_like(X)
            d[:, j] = X[:, j]
            modes.append(d)
        coeffs = [1.0 + 0.3 * amplitude * _smooth(s, 0, rng)]
        coeffs += [0.3 * amplitude * _smooth(s, j + 1, rng) for j in range(k_star - 1)]
    else:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {KINDS}")
    basis = np.stack([X] + modes)
    return basis, np.stack(coeffs, axis=1)


def _colors(X: np.ndarray) -> np.ndarray:
    c = 0.5 + 0.35 * np.stack([np.sin(3.0 * X[:, 0]), np.sin(4.0 * X[:, 1] + 1.0),
                               np.cos(3.5 * X[:, 2] + 2.0 * X[:, 0])], axis=1)
    return np.clip(c, 0.05, 0.95)


def orbit_camera(azimuth: float, elevation: float, resolution: int,
                 distance: float = CAMERA_DISTANCE, fov_deg: float = FOV_DEG) -> Camera:
    eye = distance * np.array([math.sin(azimuth) * math.cos(elevation), math.sin(elevation),
                               math.cos(azimuth) * math.cos(elevation)])
    f = 0.5 * resolution / math.tan(math.radians(0.5 * fov_deg))
    c = 0.5 * resolution - 0.5
    return Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), f, f, c, c,
                          resolution, resolution)


def render_points(points: np.ndarray, features: np.ndarray, scale: float, camera: Camera,
                  opacity: float = 0.9):
    """Isotropic world-space Gaussians; returns (features (H, W, C), alpha (H, W))."""
    n = len(points)
    cov = np.broadcast_to(np.eye(3) * scale ** 2, (n, 3, 3))
    means2d, cov2d, depth, visible = project_gaussians(points, cov, camera)
    out, _ = rasterize(means2d.data, cov2d.data, features, np.full(n, opacity), depth,
                       camera.width, camera.height, valid=visible)
    return out.data[..., :-1], out.data[..., -1]


def exact_flow(p_t: np.ndarray, p_t1: np.ndarray, scale: float, cam_t: Camera, cam_t1: Camera,
               opacity: float = 0.9) -> np.ndarray:
    """Composited per-point displacement uv_{t+1} - uv_t on frame t's grid.

    Pixels the object does not cover get zero flow.
    """
    uv_t, _, _ = project(cam_t, p_t)
    uv_t1, _, _ = project(cam_t1, p_t1)
    disp, alpha = render_points(p_t, uv_t1 - uv_t, scale, cam_t, opacity)
    flow = np.zeros_like(disp)
    cov = alpha > 1e-6
    flow[cov] = disp[cov] / alpha[cov][:, None]
    return flow


def generate_synthetic(kind: str = "bending-rod", n_frames: int = 30, resolution: int = 64,
                       k_star: int = 3, seed: int = 0, n_points: int = 2000,
                       amplitude: float = 1.0, sweep_deg: float = 90.0, elevation_deg: float = 20.0,
                       n_test: int = 10, test_offset_deg: float = 30.0, static: bool = False,
                       out: str | Path | None = None) -> SyntheticScene:
    """Build, render and optionally write an oracle scene.

    ``static`` freezes both the deformation and the camera, so all flow is
    zero.  Held-out views look at ``n_test`` evenly spaced frames from an
    azimuth ``test_offset_deg`` beyond the training camera and a lower
    elevation.
    """
    if n_frames < 2 or resolution < 8 or k_star < 1 or n_points < 1:
        raise ValueError("n_frames >= 2, resolution >= 8, k_star >= 1, n_points >= 1 required")
    rng = np.random.default_rng(seed)
    basis, coeffs = _scene_basis(kind, k_star, n_frames, n_points, rng, 0.0 if static else amplitude)
    if static:
        coeffs = np.repeat(coeffs[:1], n_frames, axis=0)
        sweep_deg = 0.0
    colors = _colors(basis[0])
    pts = np.einsum("tk,kpi->tpi", coeffs, basis)
    extent = float(np.linalg.norm(pts[0].max(0) - pts[0].min(0)))
    scale = 0.6 * extent / math.sqrt(n_points) if kind != "breathing-sphere" else 1.5 / math.sqrt(n_points)

    s = np.linspace(0.0, 1.0, n_frames)
    az = np.radians(-0.5 * sweep_deg + sweep_deg * s)
    elev = math.radians(elevation_deg)
    cams = [orbit_camera(a, elev, resolution) for a in az]

    images, masks = [], []
    for t in range(n_frames):
        rgb, alpha = render_points(pts[t], colors, scale, cams[t])
        images.append(np.clip(rgb, 0.0, 1.0))
        masks.append(alpha > 0.5)
    flows = {t: exact_flow(pts[t], pts[t + 1], scale, cams[t], cams[t + 1]) for t in range(n_frames - 1)}
    ds = SequenceDataset(np.stack(images), np.stack(masks), cams, s.copy(), flows)

    test_frames = np.unique(np.linspace(0, n_frames - 1, n_test).round().astype(int))
    t_cams, t_imgs, t_masks = [], [], []
    for t in test_frames:
        cam = orbit_camera(az[t] + math.radians(test_offset_deg), 0.5 * elev, resolution)
        rgb, alpha = render_points(pts[t], colors, scale, cam)
        t_cams.append(cam)
        t_imgs.append(np.clip(rgb, 0.0, 1.0))
        t_masks.append(alpha > 0.5)
    test_ds = SequenceDataset(np.stack(t_imgs), np.stack(t_masks), t_cams, s[test_frames].copy())

    scene = SyntheticScene(kind, basis, coeffs, colors, scale, ds, test_ds, test_frames,
                           {"seed": seed, "k_star": k_star, "n_frames": n_frames,
                            "resolution": resolution, "static": static})
    if out is not None:
        write_scene(scene, out)
    return scene


def write_scene(scene: SyntheticScene, out) -> Path:
    out = Path(out)
    save_dataset(scene.dataset, out, "train")
    save_dataset(scene.test_dataset, out, "test")
    write_container(out / "ground_truth.ckpt",
                    {"basis": scene.basis, "coefficients": scene.coefficients, "colors": scene.colors,
                     "test_frames": scene.test_frames.astype(np.int64)},
                    {"kind": scene.kind, "point_scale": scene.point_scale, **scene.meta})
    np.save(out / "trajectories.npy", scene.trajectories())
    return out
