"""Gaussians anchored in local volumes: parameters, rendering, densification."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, quat_to_matrix
from .rasterizer import rasterize
from .sh import MAX_DEGREE, n_coeffs, sh_eval
from .volumes import VolumeSet, gaussian_world_position, volume_frames

log = logging.getLogger(__name__)

NEAR_PLANE = 0.01
LOW_PASS = 0.3
SPLIT_FACTOR = 1.6

PARAM_NAMES = ("weights", "log_scales", "quats", "sh", "opacity_logit")


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class GaussianSoup:
    """Flat list of Gaussians; each carries the index of the volume it lives in."""

    volume_index: np.ndarray  # (G,)
    weights: Tensor  # (G, k) free barycentric logits
    log_scales: Tensor  # (G, 3)
    quats: Tensor  # (G, 4) rotation inside the volume frame
    sh: Tensor  # (G, 16, 3)
    opacity_logit: Tensor  # (G,)
    grad_accum: np.ndarray = field(default=None)
    grad_count: np.ndarray = field(default=None)
    max_radius: np.ndarray = field(default=None)

    def __post_init__(self):
        G = len(self.volume_index)
        self.volume_index = np.asarray(self.volume_index, dtype=np.int64)
        for name in PARAM_NAMES:
            if getattr(self, name).shape[0] != G:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows for {G} Gaussians")
        if self.grad_accum is None:
            self.reset_stats()

    def __len__(self) -> int:
        return len(self.volume_index)

    def parameters(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def reset_stats(self) -> None:
        G = len(self)
        self.grad_accum = np.zeros(G)
        self.grad_count = np.zeros(G)
        self.max_radius = np.zeros(G)

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit.data))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.data)

    def take(self, index: np.ndarray) -> "GaussianSoup":
        index = np.asarray(index, dtype=np.int64)
        params = {n: Tensor(getattr(self, n).data[index].copy(), requires_grad=True) for n in PARAM_NAMES}
        return GaussianSoup(self.volume_index[index].copy(), **params)

    def check(self, n_volumes: int) -> None:
        if len(self) and (self.volume_index.min() < 0 or self.volume_index.max() >= n_volumes):
            raise ValueError("Gaussian refers to a volume that does not exist")


def init_gaussians(volumes: VolumeSet, points_ref: np.ndarray, per_volume: int = 2,
                   rng: np.random.Generator | None = None, weight_std: float = 0.5,
                   peak: float = 4.0, opacity: float = 0.1, gray: float = 0.5) -> GaussianSoup:
    """``per_volume`` Gaussians in every volume, isotropic, mid-gray, low opacity.

    Each Gaussian's weights get ``peak`` added on one member (the anchor point
    for the first Gaussian, a random member otherwise), so Gaussians start
    near coarse points rather than all at the volume centroid. The scale is the
    mean nearest-neighbour spacing of each volume's points.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = np.asarray(points_ref, dtype=np.float64)
    M, k = volumes.members.shape
    G = M * per_volume
    nn_dist, _ = cKDTree(pts).query(pts, k=2)
    spacing = nn_dist[:, 1][volumes.members].mean(axis=1)
    spacing = np.maximum(spacing, 1e-6)
    vidx = np.repeat(np.arange(M), per_volume)
    weights = rng.normal(0.0, weight_std, size=(G, k))
    hot = rng.integers(0, k, size=G)
    hot[::per_volume] = 0
    weights[np.arange(G), hot] += peak
    sh = np.zeros((G, n_coeffs(MAX_DEGREE), 3))
    sh[:, 0, :] = (gray - 0.5) / 0.28209479177387814
    quats = np.zeros((G, 4))
    quats[:, 0] = 1.0
    return GaussianSoup(
        vidx,
        Tensor(weights, requires_grad=True),
        Tensor(np.repeat(np.log(spacing), per_volume)[:, None] * np.ones((1, 3)), requires_grad=True),
        Tensor(quats, requires_grad=True),
        Tensor(sh, requires_grad=True),
        Tensor(np.full(G, logit(opacity)), requires_grad=True),
    )


def covariance_world(log_scales, quats, frames):
    """Sigma = R_bar S S^T R_bar^T with R_bar = T R and S = diag(exp(log_scales))."""
    is_t = any(isinstance(x, Tensor) for x in (log_scales, quats, frames))
    ls = ad.as_tensor(log_scales)
    Rbar = ad.matmul(ad.as_tensor(frames), quat_to_matrix(ad.as_tensor(quats)))
    A = Rbar * ad.expand_dims(ad.exp(ls), -2)
    cov = A @ A.swapaxes(-1, -2)
    return cov if is_t else cov.data


def project_gaussians(means, cov, camera: Camera, near: float = NEAR_PLANE,
                      low_pass: float = LOW_PASS):
    """Perspective-linearised projection of 3D Gaussians.

    Returns ``(means2d (G, 2), cov2d (G, 2, 2), depth (G,), visible (G,))``;
    ``cov2d = J W Sigma W^T J^T + low_pass * I`` with J the projection
    Jacobian at the camera-space mean.
    """
    x = ad.as_tensor(means)
    cov = ad.as_tensor(cov, dtype=x.dtype)
    W = camera.R.astype(x.dtype)
    pc = x @ W.T + camera.t.astype(x.dtype)
    depth = pc.data[:, 2].copy()
    visible = depth > near
    z = ad.where(visible, pc[:, 2], np.ones_like(depth))
    X, Y = pc[:, 0], pc[:, 1]
    inv_z = 1.0 / z
    u = X * inv_z * camera.fx + camera.cx
    v = Y * inv_z * camera.fy + camera.cy
    zero = inv_z * 0.0
    row0 = ad.stack([inv_z * camera.fx, zero, -X * inv_z * inv_z * camera.fx], axis=-1)
    row1 = ad.stack([zero, inv_z * camera.fy, -Y * inv_z * inv_z * camera.fy], axis=-1)
    JW = ad.stack([row0, row1], axis=1) @ W
    cov2d = JW @ cov @ JW.swapaxes(-1, -2) + low_pass * np.eye(2, dtype=x.dtype)
    return ad.stack([u, v], axis=1), cov2d, depth, visible


@dataclass
class RenderOutput:
    image: Tensor  # (H, W, 3)
    alpha: Tensor  # (H, W)
    means2d: Tensor  # (G, 2), kept to read screen-space gradients
    radii: np.ndarray
    frames: np.ndarray  # (M, 3, 3) volume frames used
    positions: np.ndarray  # (G, 3) world positions


def render(soup: GaussianSoup, coarse_points, volumes: VolumeSet, camera: Camera,
           sh_degree: int = MAX_DEGREE, previous_frames: np.ndarray | None = None,
           background=None) -> RenderOutput:
    """Rasterize the soup driven by the coarse points of one frame.

    View directions are expressed in each Gaussian's volume frame before the
    SH lookup, so appearance travels rigidly with the volume.
    """
    coarse = ad.as_tensor(coarse_points)
    vidx = soup.volume_index
    V = ad.gather(coarse, volumes.members[vidx])  # (G, k, 3)
    x = gaussian_world_position(V, soup.weights)
    frames_all = volume_frames(coarse, volumes, previous_frames)
    T = ad.gather(frames_all, vidx)
    cov = covariance_world(soup.log_scales, soup.quats, T)
    dirs = ad.normalize(x - camera.center.astype(x.dtype), axis=-1)
    local_dirs = (T.swapaxes(-1, -2) @ ad.expand_dims(dirs, -1))[..., 0]
    rgb = sh_eval(soup.sh, local_dirs, sh_degree)
    opacity = ad.sigmoid(soup.opacity_logit)
    means2d, cov2d, depth, visible = project_gaussians(x, cov, camera)
    out, radii = rasterize(means2d, cov2d, rgb, opacity, depth, camera.width, camera.height,
                           background=background, valid=visible)
    return RenderOutput(out[:, :, :3], out[:, :, 3], means2d, radii,
                        ad.as_tensor(frames_all).data, x.data)


def gaussian_positions(soup: GaussianSoup, coarse_points: np.ndarray, volumes: VolumeSet) -> np.ndarray:
    V = np.asarray(coarse_points)[volumes.members[soup.volume_index]]
    return gaussian_world_position(V, soup.weights.data)


def accumulate_stats(soup: GaussianSoup, grad_means2d: np.ndarray, radii: np.ndarray,
                     width: int, height: int) -> None:
    """Add this view's screen-space positional gradient norms (NDC units)."""
    seen = radii > 0
    g_ndc = grad_means2d * np.array([0.5 * width, 0.5 * height])
    soup.grad_accum[seen] += np.linalg.norm(g_ndc[seen], axis=1)
    soup.grad_count[seen] += 1
    soup.max_radius[seen] = np.maximum(soup.max_radius[seen], radii[seen])


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    percent_dense: float = 0.01
    max_screen_size: float | None = None
    max_world_scale: float | None = None  # fraction of scene extent
    weight_noise: float = 0.01
    interval: int = 100
    start: int = 500
    stop: int = 15000
    opacity_reset: int = 3000
    max_gaussians: int = 200_000


def densify_and_prune(soup: GaussianSoup, config: DensifyConfig, scene_extent: float,
                      rng: np.random.Generator):
    """Clone small and split large high-gradient Gaussians, then prune.

    New Gaussians stay in their parent's volume; the barycentric weights of
    parent and offspring get N(0, weight_noise) jitter.  Returns
    ``(new_soup, source)`` where ``source[i]`` is the old index that row
    ``i`` continues, or -1 for newly created rows.
    """
    G = len(soup)
    avg = soup.grad_accum / np.maximum(soup.grad_count, 1)
    high = (avg >= config.grad_threshold) & (soup.grad_count > 0)
    big = soup.scales.max(axis=1) > config.percent_dense * scene_extent
    clone = np.nonzero(high & ~big)[0]
    split = np.nonzero(high & big)[0]
    n_new = len(clone) + len(split)
    if G + n_new > config.max_gaussians:
        warnings.warn(f"Gaussian budget {config.max_gaussians} reached; densification paused",
                      RuntimeWarning, stacklevel=2)
        clone = split = np.zeros(0, np.int64)

    p = {n: getattr(soup, n).data.copy() for n in PARAM_NAMES}
    k = p["weights"].shape[1]
    p["weights"][clone] += rng.normal(0.0, config.weight_noise, size=(len(clone), k))

    keep = np.ones(G, bool)
    keep[split] = False
    keep_idx = np.nonzero(keep)[0]
    parts = {n: [p[n][keep_idx]] for n in PARAM_NAMES}
    vparts = [soup.volume_index[keep_idx]]
    source = [keep_idx]

    clone_p = {n: p[n][clone].copy() for n in PARAM_NAMES}
    clone_p["weights"] = soup.weights.data[clone] + rng.normal(0.0, config.weight_noise, size=(len(clone), k))
    for n in PARAM_NAMES:
        parts[n].append(clone_p[n])
    vparts.append(soup.volume_index[clone])
    source.append(np.full(len(clone), -1))

    child_src = np.repeat(split, 2)
    child = {n: p[n][child_src].copy() for n in PARAM_NAMES}
    child["weights"] += rng.normal(0.0, config.weight_noise, size=(len(child_src), k))
    child["log_scales"] -= np.log(SPLIT_FACTOR)
    for n in PARAM_NAMES:
        parts[n].append(child[n])
    vparts.append(soup.volume_index[child_src])
    source.append(np.full(len(child_src), -1))

    merged = {n: np.concatenate(parts[n], axis=0) for n in PARAM_NAMES}
    vidx = np.concatenate(vparts)
    source = np.concatenate(source)
    max_r = np.concatenate([soup.max_radius[keep_idx], np.zeros(len(vidx) - len(keep_idx))])

    opacity = 1.0 / (1.0 + np.exp(-merged["opacity_logit"]))
    prune = opacity < config.min_opacity
    if config.max_screen_size is not None:
        prune |= max_r > config.max_screen_size
    if config.max_world_scale is not None:
        prune |= np.exp(merged["log_scales"]).max(axis=1) > config.max_world_scale * scene_extent
    alive = ~prune
    out = GaussianSoup(vidx[alive], **{n: Tensor(merged[n][alive], requires_grad=True) for n in PARAM_NAMES})
    log.debug("densify: %d cloned, %d split, %d pruned -> %d", len(clone), len(split),
              int(prune.sum()), len(out))
    return out, source[alive]


def reset_opacity(soup: GaussianSoup, ceiling: float = 0.01) -> None:
    soup.opacity_logit = Tensor(np.minimum(soup.opacity_logit.data, logit(ceiling)), requires_grad=True)


def with_params(soup: GaussianSoup, **params) -> GaussianSoup:
    return replace(soup, **params)
