"""Stage-1 losses: mask Chamfer, neighbour rigidity and flow consistency."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Camera, bilinear_sample, project
from .rasterizer import rasterize

HUBER_EPS = 0.01
DESCRIPTOR_SIGMA = 1.5
DESCRIPTOR_CUTOFF = 3.0
N_MASK_SAMPLES = 2000
DESCRIPTOR_TILE = 8  # small footprints: smaller tiles waste fewer evaluations


class EmptyMaskError(ValueError):
    """A mask without foreground pixels cannot supervise a frame."""


@dataclass
class LossWeights:
    mask: float = 1.0
    flow: float = 10.0
    rigidity: float = 1.0
    huber_eps: float = HUBER_EPS

    def __post_init__(self):
        if min(self.mask, self.flow, self.rigidity, self.huber_eps) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class NeighborGraph:
    """Directed neighbour pairs (i, j), i != j, built on a reference frame."""

    src: np.ndarray
    dst: np.ndarray
    n_points: int
    reference_frame: int = 0

    def neighbors(self, i: int) -> np.ndarray:
        return self.dst[self.src == i]

    def __len__(self) -> int:
        return len(self.src)


def build_neighbor_graph(points: np.ndarray, radius_frac: float = 0.05, min_neighbors: int = 4,
                         reference_frame: int = 0) -> NeighborGraph:
    """Radius neighbourhoods, radius = ``radius_frac`` x bounding-box diagonal,
    grown per point until it holds ``min_neighbors`` others (or all of them)."""
    pts = np.asarray(points, dtype=np.float64)
    M = len(pts)
    if M < 2:
        raise ValueError("a neighbour graph needs at least two points")
    radius = radius_frac * np.linalg.norm(pts.max(0) - pts.min(0))
    tree = cKDTree(pts)
    need = min(min_neighbors, M - 1)
    kth, _ = tree.query(pts, k=need + 1)
    kth = np.atleast_2d(kth)[:, -1] if need > 0 else np.zeros(M)
    src, dst = [], []
    for i, r in enumerate(np.maximum(radius, kth)):
        nb = tree.query_ball_point(pts[i], r * (1 + 1e-12))
        nb = sorted(j for j in nb if j != i)
        src.extend([i] * len(nb))
        dst.extend(nb)
    return NeighborGraph(np.asarray(src, np.int64), np.asarray(dst, np.int64), M, reference_frame)


# -- mask Chamfer ------------------------------------------------------------

def sample_mask(mask: np.ndarray, n_samples: int, rng: np.random.Generator,
                jitter: bool = True) -> np.ndarray:
    """Uniform pixel-space samples (u, v) from the foreground of a binary mask."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    rows, cols = np.nonzero(m > 0.5)
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    pick = rng.integers(0, rows.size, size=n_samples)
    uv = np.stack([cols[pick], rows[pick]], axis=1).astype(np.float64)
    if jitter:
        uv += rng.uniform(-0.5, 0.5, size=uv.shape)
    return uv


def chamfer_squared(a, b: np.ndarray) -> Tensor:
    """Symmetric Chamfer with squared distances, averaged in each direction.

    ``a`` (n, D) may be a tensor; ``b`` (m, D) is a fixed target set.
    """
    a = ad.as_tensor(a)
    b = np.asarray(b, dtype=a.dtype)
    tree_b = cKDTree(b)
    _, nn_ab = tree_b.query(a.data)
    _, nn_ba = cKDTree(a.data).query(b)
    d_ab = a - b[nn_ab]
    d_ba = ad.gather(a, nn_ba) - b
    return (d_ab * d_ab).sum(axis=1).mean() + (d_ba * d_ba).sum(axis=1).mean()


def mask_chamfer_loss(points, camera: Camera, mask: np.ndarray, n_samples: int = N_MASK_SAMPLES,
                      rng: np.random.Generator | None = None, samples: np.ndarray | None = None) -> Tensor:
    """Chamfer between projected points and mask samples in [0, 1]^2 image coordinates."""
    if samples is None:
        samples = sample_mask(mask, n_samples, rng if rng is not None else np.random.default_rng())
    uv, _, visible = project(camera, points)
    if not np.any(visible):
        raise ValueError("no point lies in front of the camera")
    scale = np.array([1.0 / camera.width, 1.0 / camera.height])
    if not visible.all():
        uv = ad.gather(uv, np.nonzero(visible)[0])
    return chamfer_squared(uv * scale, samples * scale)


def chamfer_pixels(uv: np.ndarray, mask: np.ndarray) -> float:
    """Evaluation metric: symmetric mean (unsquared) nearest distance, in pixels,
    between projected points and the mask's foreground pixel centres."""
    m = mask[..., 0] if mask.ndim == 3 else mask
    rows, cols = np.nonzero(m > 0.5)
    fg = np.stack([cols, rows], axis=1).astype(np.float64)
    d_pm, _ = cKDTree(fg).query(uv)
    d_mp, _ = cKDTree(uv).query(fg)
    return 0.5 * (float(d_pm.mean()) + float(d_mp.mean()))


# -- rigidity ------------------------------------------------------------------

def rigidity_loss(points_t, points_r, graph: NeighborGraph) -> Tensor:
    """sum_i sum_{j in N(i)} (|P^r_i - P^r_j| - |P^t_i - P^t_j|)^2."""
    pt = ad.as_tensor(points_t)
    pr = ad.as_tensor(points_r)
    d_t = ad.norm(ad.gather(pt, graph.src) - ad.gather(pt, graph.dst), axis=1)
    d_r = ad.norm(ad.gather(pr, graph.src) - ad.gather(pr, graph.dst), axis=1)
    diff = d_r - d_t
    return (diff * diff).sum()


# -- descriptor renderer and flow consistency ------------------------------------

def render_descriptors(points, descriptors: np.ndarray, camera: Camera,
                       sigma: float = DESCRIPTOR_SIGMA, cutoff: float = DESCRIPTOR_CUTOFF,
                       tile_size: int = DESCRIPTOR_TILE):
    """Splat each point as an isotropic footprint carrying its descriptor.

    Nearest-first alpha compositing with alpha = exp(-r^2 / 2 sigma^2),
    clipped at ``cutoff`` sigma, then normalised by the accumulated alpha.
    Returns ``(descriptor_image (H, W, d), coverage (H, W))`` tensors,
    differentiable with respect to ``points`` only.
    """
    pts = ad.as_tensor(points)
    uv, depth, visible = project(camera, pts)
    n = len(depth)
    cov = np.broadcast_to(np.eye(2) * sigma ** 2, (n, 2, 2))
    desc = np.asarray(descriptors, dtype=pts.dtype)
    out, _ = rasterize(uv, cov, desc, np.ones(n), depth, camera.width, camera.height,
                       alpha_min=0.0, max_mahalanobis=cutoff, valid=visible, tile_size=tile_size)
    d = desc.shape[1]
    feat = out[:, :, :d]
    cover = out[:, :, d]
    empty = cover.data <= 0
    denom = ad.where(empty, np.ones_like(cover.data), cover)
    return feat / ad.expand_dims(denom, 2), cover


def flow_consistency_loss(points_t, points_t1, descriptors: np.ndarray, flow: np.ndarray,
                          mask_t: np.ndarray, camera_t: Camera, camera_t1: Camera,
                          eps: float = HUBER_EPS, erode: int = 0) -> Tensor:
    """Huber distance between the frame-t descriptor render and the frame-(t+1)
    render resampled at ``x + flow(x)``, over the pixels of ``mask_t``.

    ``flow`` (H, W, 2) lives on the frame-t grid and points to where each
    frame-t pixel lands in frame t+1.
    """
    img_t, _ = render_descriptors(points_t, descriptors, camera_t)
    img_t1, _ = render_descriptors(points_t1, descriptors, camera_t1)
    return warp_loss(img_t, img_t1, flow, mask_t, eps, erode)


def warp_loss(img_t, img_t1, flow: np.ndarray, mask_t: np.ndarray, eps: float = HUBER_EPS,
              erode: int = 0) -> Tensor:
    """Masked Huber distance between ``img_t`` and ``img_t1`` sampled at ``x + flow(x)``."""
    m = mask_t[..., 0] if mask_t.ndim == 3 else mask_t
    m = m > 0.5
    if erode > 0:
        m = binary_erosion(m, iterations=erode)
    rows, cols = np.nonzero(m)
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    d = img_t.shape[2]
    flat_idx = rows * img_t.shape[1] + cols
    here = ad.gather(img_t.reshape(-1, d), flat_idx)
    target = np.stack([cols + flow[rows, cols, 0], rows + flow[rows, cols, 1]], axis=1)
    there = bilinear_sample(img_t1, target)
    return ad.huber(here - there, eps).sum()
