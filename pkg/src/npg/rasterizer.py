"""Tile-based front-to-back alpha compositing of 2D Gaussians.

The compositor is a single tape primitive: its inputs are screen-space means,
2x2 covariances, per-Gaussian colour/feature vectors and opacities, and its
adjoint is written out by hand.  Output is an ``(H, W, C + 1)`` tensor whose
last channel is the accumulated alpha.

Per pixel, with Gaussians sorted front to back::

    alpha_n = opacity_n * exp(-0.5 d^T Sigma_n^-1 d)   (zeroed below alpha_min)
    color   = sum_n c_n alpha_n prod_{m<n} (1 - alpha_m) + T_final * background
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

ALPHA_MIN = 1.0 / 255.0
TILE_SIZE = 8  # 64x64 desk renders: half the work of 16x16 tiles


def _inverse2x2(cov: np.ndarray) -> np.ndarray:
    a, b, c, d = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 0], cov[:, 1, 1]
    det = a * d - b * c
    inv = np.empty_like(cov)
    inv[:, 0, 0] = d / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -c / det
    inv[:, 1, 1] = a / det
    return inv


def footprint_radius(cov: np.ndarray, opacity: np.ndarray, alpha_min: float = ALPHA_MIN,
                     max_mahalanobis: float | None = None) -> np.ndarray:
    """Pixel radius outside which a Gaussian's alpha is exactly zero.

    Returns -1 for Gaussians that can never reach ``alpha_min``.
    """
    a = cov[:, 0, 0]
    c = cov[:, 1, 1]
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        if alpha_min > 0:
            qmax = 2.0 * np.log(np.maximum(opacity, 1e-300) / alpha_min)
        else:
            qmax = np.full(opacity.shape, np.inf)
    if max_mahalanobis is not None:
        qmax = np.minimum(qmax, max_mahalanobis ** 2)
    r = np.minimum(np.sqrt(np.maximum(qmax, 0.0) * lam), 1e7)
    r = np.where((qmax >= 0) & ~np.isnan(r) & (opacity > 0), r, -1.0)
    return r


def _tile_bins(means: np.ndarray, radius: np.ndarray, depth: np.ndarray, width: int,
               height: int, tile: int):
    """Duplicate each Gaussian per overlapped tile and sort by (tile, depth)."""
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    ok = radius >= 0
    jmin = np.ceil(means[:, 0] - radius)
    jmax = np.floor(means[:, 0] + radius)
    imin = np.ceil(means[:, 1] - radius)
    imax = np.floor(means[:, 1] + radius)
    ok &= (jmax >= 0) & (jmin <= width - 1) & (imax >= 0) & (imin <= height - 1)
    ok &= np.isfinite(jmin) & np.isfinite(imin)
    gids = np.nonzero(ok)[0]
    if gids.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), ntx, nty
    tx0 = np.clip(jmin[gids], 0, width - 1).astype(np.int64) // tile
    tx1 = np.clip(jmax[gids], 0, width - 1).astype(np.int64) // tile
    ty0 = np.clip(imin[gids], 0, height - 1).astype(np.int64) // tile
    ty1 = np.clip(imax[gids], 0, height - 1).astype(np.int64) // tile
    nx = tx1 - tx0 + 1
    count = nx * (ty1 - ty0 + 1)
    rep = np.repeat(np.arange(gids.size), count)
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    tx = tx0[rep] + local % nx[rep]
    ty = ty0[rep] + local // nx[rep]
    tile_ids = ty * ntx + tx
    g = gids[rep]
    order = np.lexsort((depth[g], tile_ids))
    return tile_ids[order], g[order], ntx, nty


def rasterize(means2d, cov2d, colors, opacity, depth: np.ndarray, width: int, height: int,
              background=None, alpha_min: float = ALPHA_MIN,
              max_mahalanobis: float | None = None, valid: np.ndarray | None = None,
              tile_size: int = TILE_SIZE):
    """Composite Gaussians into an image.

    Args:
        means2d: (G, 2) pixel coordinates (u, v).
        cov2d: (G, 2, 2) screen-space covariances.
        colors: (G, C) colour or feature vectors.
        opacity: (G,) values in [0, 1].
        depth: (G,) camera depth used for ordering (not differentiated).
        valid: optional (G,) mask; invalid Gaussians are skipped.
        max_mahalanobis: optional hard cutoff of the footprint in std units.

    Returns ``(out, radii)`` where ``out`` is a tensor (H, W, C + 1) and
    ``radii`` the per-Gaussian pixel footprint radius (-1 when culled).
    """
    means2d = ad.as_tensor(means2d)
    dt = means2d.dtype
    cov2d, colors, opacity = (ad.as_tensor(x, dtype=dt) for x in (cov2d, colors, opacity))
    mu, cov, col, op = means2d.data, cov2d.data, colors.data, opacity.data
    G, C = col.shape
    depth = np.asarray(depth, dtype=np.float64)
    bg = np.zeros(C, dtype=dt) if background is None else np.asarray(background, dtype=dt)

    radius = footprint_radius(cov, op, alpha_min, max_mahalanobis) if G else np.zeros(0)
    if valid is not None:
        radius = np.where(valid, radius, -1.0)
    conic = _inverse2x2(cov) if G else cov
    tile_ids, gorder, ntx, nty = _tile_bins(mu, radius, depth, width, height, tile_size)
    starts = np.searchsorted(tile_ids, np.arange(ntx * nty + 1))

    out = np.empty((height, width, C + 1), dtype=dt)
    out[..., :C] = bg
    out[..., C] = 0.0
    cache = []
    for tid in range(ntx * nty):
        ty, tx = divmod(tid, ntx)
        i0, j0 = ty * tile_size, tx * tile_size
        i1, j1 = min(i0 + tile_size, height), min(j0 + tile_size, width)
        s, e = starts[tid], starts[tid + 1]
        if s == e:
            continue
        idx = gorder[s:e]
        ii, jj = np.mgrid[i0:i1, j0:j1]
        px = jj.reshape(-1).astype(dt)
        py = ii.reshape(-1).astype(dt)
        dx = px[None, :] - mu[idx, 0][:, None]
        dy = py[None, :] - mu[idx, 1][:, None]
        Q = conic[idx]
        qoff = (Q[:, 0, 1] + Q[:, 1, 0])[:, None]
        q = Q[:, 0, 0][:, None] * dx * dx + qoff * dx * dy + Q[:, 1, 1][:, None] * dy * dy
        e_ = np.exp(-0.5 * q)
        a = op[idx][:, None] * e_
        active = a >= alpha_min
        if max_mahalanobis is not None:
            active &= q <= max_mahalanobis ** 2
        a = np.where(active, a, 0.0)
        one_m = 1.0 - a
        T = np.empty_like(a)
        T[0] = 1.0
        if len(idx) > 1:
            np.cumprod(one_m[:-1], axis=0, out=T[1:])
        T_final = T[-1] * one_m[-1]
        w = a * T
        tile_col = w.T @ col[idx] + T_final[:, None] * bg[None, :]
        out[i0:i1, j0:j1, :C] = tile_col.reshape(i1 - i0, j1 - j0, C)
        out[i0:i1, j0:j1, C] = (1.0 - T_final).reshape(i1 - i0, j1 - j0)
        cache.append((i0, i1, j0, j1, idx, dx, dy, e_, a, active, one_m, T, T_final, w))

    def vjp(grad):
        # Accumulate in 64-bit whatever the forward precision: the division by
        # (1 - alpha) below amplifies 32-bit rounding in the suffix sums.
        f64 = np.float64
        col64, conic64, bg64 = col.astype(f64), conic.astype(f64), bg.astype(f64)
        g_mu = np.zeros(mu.shape)
        g_col = np.zeros(col.shape)
        g_op = np.zeros(op.shape)
        g_Q = np.zeros(cov.shape)
        for entry in cache:
            i0, i1, j0, j1, idx = entry[:5]
            dx, dy, e_, a, active, one_m, T, T_final, w = (x.astype(f64) if x.dtype != bool else x
                                                           for x in entry[5:])
            gt = grad[i0:i1, j0:j1].reshape(-1, C + 1).astype(f64)
            gc, ga = gt[:, :C], gt[:, C]
            cidx = col64[idx]
            g_col[idx] += w @ gc
            s = cidx @ gc.T
            ws = w * s
            suffix = np.cumsum(ws[::-1], axis=0)[::-1]
            suffix = suffix - ws
            tail = (gc @ bg64 - ga) * T_final
            safe = one_m > 0
            d_alpha = T * s - np.where(safe, (suffix + tail[None, :]) / np.where(safe, one_m, 1.0), 0.0)
            d_alpha = np.where(active, d_alpha, 0.0)
            g_op[idx] += np.sum(d_alpha * e_, axis=1)
            d_q = -0.5 * d_alpha * a
            Q = conic64[idx]
            qoff = (Q[:, 0, 1] + Q[:, 1, 0])[:, None]
            g_mu[idx, 0] += np.sum(d_q * -(2.0 * Q[:, 0, 0][:, None] * dx + qoff * dy), axis=1)
            g_mu[idx, 1] += np.sum(d_q * -(qoff * dx + 2.0 * Q[:, 1, 1][:, None] * dy), axis=1)
            g_Q[idx, 0, 0] += np.sum(d_q * dx * dx, axis=1)
            cross = np.sum(d_q * dx * dy, axis=1)
            g_Q[idx, 0, 1] += cross
            g_Q[idx, 1, 0] += cross
            g_Q[idx, 1, 1] += np.sum(d_q * dy * dy, axis=1)
        g_cov = np.zeros(cov.shape)
        if G:
            Qt = np.swapaxes(conic64, 1, 2)
            g_cov = -(Qt @ g_Q @ Qt)
        return tuple(g.astype(dt) for g in (g_mu, g_cov, g_col, g_op))

    result = ad.record(out, (means2d, cov2d, colors, opacity), vjp, "rasterize")
    return result, radius
