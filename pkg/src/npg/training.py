"""Two-stage optimisation: coarse point model, then volume-anchored Gaussians."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coarse_losses import (LossWeights, NeighborGraph, build_neighbor_graph, chamfer_squared,
                            render_descriptors, rigidity_loss, warp_loss)
from .coarse_model import (CoarseModel, checkpoint_arrays, init_model, model_from_arrays,
                           read_container, write_container)
from .dataset import SequenceDataset
from .gaussians import (DensifyConfig, GaussianSoup, PARAM_NAMES, accumulate_stats,
                        densify_and_prune, init_gaussians, render, reset_opacity)
from .geometry import project
from .metrics import dssim_loss, l1_loss
from .rasterizer import rasterize
from .sh import MAX_DEGREE
from .volumes import VolumeSet, build_volumes, volume_frames

log = logging.getLogger(__name__)


# -- optimiser and schedules ----------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr):
    """Bias-corrected Adam, in place.  ``lr`` is a float or one value per parameter."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state disagree in length")
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ad.ShapeError(f"adam_step: gradient {g.shape} for parameter {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data = p.data - lrs[i] * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return params, state


def lr_schedule(kind: str, iteration: int, total: int, lr: float, lr_final: float | None = None,
                warmup_frac: float = 0.02, min_frac: float = 0.01) -> float:
    """Learning rate at ``iteration`` of ``total``.

    ``cosine``: linear warm-up from 0 over the first ``warmup_frac`` of the
    run, then cosine decay to ``lr * min_frac``.  ``exponential``: log-linear
    from ``lr`` to ``lr_final``.  ``constant``: ``lr``.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if kind == "constant":
        return lr
    if kind == "exponential":
        if lr_final is None:
            raise ValueError("exponential schedule needs lr_final")
        frac = min(iteration / max(total, 1), 1.0)
        return lr * (lr_final / lr) ** frac
    if kind == "cosine":
        warm = max(int(math.ceil(warmup_frac * total)), 1)
        if iteration < warm:
            return lr * iteration / warm
        lo = lr * min_frac
        p = min((iteration - warm) / max(total - warm, 1), 1.0)
        return lo + 0.5 * (lr - lo) * (1.0 + math.cos(math.pi * p))
    raise ValueError(f"unknown schedule {kind!r}")


def _check_finite(it: int, parts: dict) -> None:
    bad = {k: v for k, v in parts.items() if not np.isfinite(v)}
    if bad:
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite loss at iteration {it}: {detail}")


def write_history(path, history: list[dict]) -> None:
    if not history:
        Path(path).write_text("")
        return
    keys = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in history:
            w.writerow([repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in keys])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- stage 1 -------------------------------------------------------------------------

@dataclass
class Stage1Config:
    iterations: int = 5000
    lr: float = 5e-4
    warmup_frac: float = 0.02
    batch_size: int = 10
    K: int = 25
    M: int = 1500
    reference_frame: int = 0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    n_mask_samples: int = 2000
    flow_pairs: int | None = None  # cap on flow pairs per step; None = every pair in the batch
    graph_iteration: int | None = None  # default: 10% of the run
    graph_radius_frac: float = 0.05
    init_extent: float = 1.0
    init_center: tuple | None = None  # default: closest point to the camera axes
    hidden: int = 256
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.K < 1 or self.M < 1:
            raise ValueError("iterations >= 0, batch_size, K and M >= 1 required")
        if self.iterations and self.iterations <= self.warmup_frac * self.iterations:
            raise ValueError("warm-up must be shorter than the run")


@dataclass
class Stage1Result:
    model: CoarseModel
    history: list
    graph: NeighborGraph | None


def axes_center(cameras) -> np.ndarray:
    """Least-squares point closest to every camera's optical axis."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.R[2]
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ cam.center
    return np.linalg.lstsq(A, b, rcond=None)[0]


def _stage1_loss(model: CoarseModel, ds: SequenceDataset, batch: np.ndarray, cfg: Stage1Config,
                 graph, samples: dict, rng: np.random.Generator):
    w = cfg.weights
    r = cfg.reference_frame
    pairs = [t for t in batch if t + 1 < len(ds) and ds.has_flow(int(t))] if w.flow > 0 else []
    if cfg.flow_pairs is not None and len(pairs) > cfg.flow_pairs:
        pairs = sorted(rng.choice(pairs, size=cfg.flow_pairs, replace=False).tolist())
    need = sorted(set(batch.tolist()) | {t + 1 for t in pairs} | ({r} if graph is not None else set()))
    slot = {t: i for i, t in enumerate(need)}
    P = model.points(np.asarray(need))
    if not np.isfinite(P.data).all():
        # Projection would silently drop NaN points as invisible.
        nan = float("nan")
        return Tensor(np.array(nan)), {"mask": nan, "rigidity": nan, "flow": nan}
    zero = Tensor(np.zeros(()))
    l_mask = zero
    for t in batch:
        cam = ds.cameras[t]
        uv, _, vis = project(cam, P[slot[t]])
        if not vis.any():
            raise ValueError(f"frame {t}: no point lies in front of the camera")
        if not vis.all():
            uv = ad.gather(uv, np.nonzero(vis)[0])
        scale = np.array([1.0 / cam.width, 1.0 / cam.height])
        l_mask = l_mask + chamfer_squared(uv * scale, samples[t] * scale)
    l_mask = l_mask * (1.0 / len(batch))
    l_rig = zero
    if graph is not None and w.rigidity > 0:
        for t in batch:
            l_rig = l_rig + rigidity_loss(P[slot[t]], P[slot[r]], graph)
        l_rig = l_rig * (1.0 / len(batch))
    l_flow = zero
    renders = {}
    for t in sorted(set(pairs) | {t + 1 for t in pairs}):
        renders[t], _ = render_descriptors(P[slot[t]], model.descriptors, ds.cameras[t])
    for t in pairs:
        l_flow = l_flow + warp_loss(renders[t], renders[t + 1], ds.flows[t], ds.masks[t], w.huber_eps)
    if pairs:
        l_flow = l_flow * (1.0 / len(pairs))
    total = w.mask * l_mask + w.rigidity * l_rig + w.flow * l_flow
    return total, {"mask": l_mask.item(), "rigidity": l_rig.item(), "flow": l_flow.item()}


def stage1_optimize(ds: SequenceDataset, cfg: Stage1Config, model: CoarseModel | None = None,
                    graph: NeighborGraph | None = None) -> Stage1Result:
    """Fit the coarse model to masks (Chamfer), flow (descriptor warp) and rigidity.

    Each step draws ``batch_size`` frames; flow terms use the pairs (t, t+1)
    of the drawn frames.  The neighbour graph for the rigidity term is built
    on the reference frame once the shape has formed (``graph_iteration``);
    before that the rigidity term is inactive.
    """
    N = len(ds)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        center = axes_center(ds.cameras) if cfg.init_center is None else np.asarray(cfg.init_center)
        model = init_model(cfg.M, cfg.K, N, cfg.seed, extent=cfg.init_extent, center=center,
                           hidden=cfg.hidden)
    usable = []
    fg = {}
    for t in range(N):
        rows, cols = np.nonzero(ds.masks[t])
        if rows.size == 0:
            warnings.warn(f"frame {t} has an empty mask and is skipped", RuntimeWarning, stacklevel=2)
            continue
        usable.append(t)
        fg[t] = np.stack([cols, rows], axis=1).astype(np.float64)
    if not usable:
        raise ValueError("every mask is empty")
    usable = np.asarray(usable)
    graph_it = cfg.graph_iteration if cfg.graph_iteration is not None else cfg.iterations // 10
    params = model.parameters()
    state = AdamState.for_params(params)
    history = []
    for it in range(cfg.iterations):
        if graph is None and cfg.weights.rigidity > 0 and it >= graph_it:
            ref = model.points([cfg.reference_frame]).data[0]
            graph = build_neighbor_graph(ref, cfg.graph_radius_frac, reference_frame=cfg.reference_frame)
        batch = np.sort(rng.choice(usable, size=min(cfg.batch_size, len(usable)), replace=False))
        samples = {}
        for t in batch:
            pick = rng.integers(0, len(fg[t]), size=cfg.n_mask_samples)
            samples[t] = fg[t][pick] + rng.uniform(-0.5, 0.5, size=(cfg.n_mask_samples, 2))
        total, parts = _stage1_loss(model, ds, batch, cfg, graph, samples, rng)
        parts["total"] = total.item()
        _check_finite(it, parts)
        grads = ad.backward(total, params, accumulate=False)
        lr = lr_schedule("cosine", it, cfg.iterations, cfg.lr, warmup_frac=cfg.warmup_frac)
        adam_step(params, [grads[p] for p in params], state, lr)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({"iteration": it, "lr": lr, **{k: parts[k] for k in
                                                          ("total", "mask", "rigidity", "flow")}})
            if it % 500 == 0:
                log.info("stage1 it %d total %.4g (mask %.3g rig %.3g flow %.3g)", it, parts["total"],
                         parts["mask"], parts["rigidity"], parts["flow"])
    model.meta.update({"reference_frame": cfg.reference_frame})
    return Stage1Result(model, history, graph)


def fit_point_colors(model: CoarseModel, ds: SequenceDataset, iterations: int = 50, lr: float = 0.05,
                     sigma: float = 1.5, frames=None) -> np.ndarray:
    """Post-hoc per-point colours from a masked photometric point-splat loss.

    The colours feed visualisation only; no stage-1 loss depends on them.
    """
    frames = range(len(ds)) if frames is None else frames
    pts = model.all_points()
    C = Tensor(np.full((model.M, 3), 0.5), requires_grad=True)
    state = AdamState.for_params([C])
    for _ in range(iterations):
        total = Tensor(np.zeros(()))
        for t in frames:
            cam = ds.cameras[t]
            uv, depth, vis = project(cam, pts[t])
            cov = np.broadcast_to(np.eye(2) * sigma ** 2, (model.M, 2, 2))
            out, _ = rasterize(uv, cov, C, np.full(model.M, 0.9), depth, cam.width, cam.height, valid=vis)
            m = ds.masks[t][..., None].astype(np.float64)
            diff = out[:, :, :3] - ds.images[t]
            total = total + (diff * diff * m).sum()
        g = ad.backward(total, [C], accumulate=False)[C]
        adam_step([C], [g], state, lr)
        C.data = np.clip(C.data, 0.0, 1.0)
    model.colors = C.data.copy()
    return model.colors


# -- stage 2 ---------------------------------------------------------------------------

@dataclass
class Stage2Config:
    iterations: int = 3000
    lam: float = 0.2
    alpha_weight: float = 0.1
    lr_weights: float = 1.6e-4
    lr_weights_final: float = 1.6e-6
    lr_scales: float = 0.05
    lr_scales_final: float = 5e-4
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    sh_interval: int = 1000
    per_volume: int = 2
    volume_size: int = 20
    finetune: bool = False
    finetune_lr: float = 1e-4
    template_reg: float = 0.1
    static: bool = False  # drive every frame with the frame-averaged coarse points
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lam must lie in [0, 1)")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class Stage2Result:
    soup: GaussianSoup
    volumes: VolumeSet
    coarse: CoarseModel
    coarse_points: np.ndarray  # (N, M, 3) driving points after training
    frames: list  # per-frame volume frames used
    history: list


def sequential_frames(points: np.ndarray, volumes: VolumeSet) -> list:
    """Volume frames for every time step, reusing the previous step's frame
    for triangles that are degenerate at a given step."""
    out = []
    for t in range(len(points)):
        out.append(volume_frames(points[t], volumes, out[-1] if out else None))
    return out


def photometric_loss(image, alpha, target: np.ndarray, mask: np.ndarray, lam: float,
                     alpha_weight: float) -> Tensor:
    """(1 - lam) L1 + lam D-SSIM against the masked target, plus an alpha-vs-mask L1 term.

    The target has its background zeroed, so the render (composited on black)
    is compared over the full image.
    """
    m = mask.astype(np.float64)
    tgt = target * m[..., None]
    loss = (1.0 - lam) * l1_loss(image, tgt)
    if lam > 0:
        loss = loss + lam * dssim_loss(image, tgt)
    if alpha_weight > 0:
        loss = loss + alpha_weight * l1_loss(alpha, m)
    return loss


def driving_points(coarse: CoarseModel, static: bool) -> np.ndarray:
    pts = coarse.all_points()
    if static:
        pts = np.repeat(pts.mean(axis=0, keepdims=True), len(pts), axis=0)
    return pts


def stage2_optimize(coarse: CoarseModel, ds: SequenceDataset, cfg: Stage2Config,
                    reference_frame: int | None = None) -> Stage2Result:
    """Optimise Gaussians anchored in local volumes of the coarse model."""
    rng = np.random.default_rng(cfg.seed)
    r = coarse.meta.get("reference_frame", 0) if reference_frame is None else reference_frame
    coarse = coarse.copy()
    frozen = driving_points(coarse, cfg.static)
    volumes = build_volumes(frozen[r], cfg.volume_size)
    soup = init_gaussians(volumes, frozen[r], cfg.per_volume, rng)
    extent = 0.5 * float(np.linalg.norm(frozen[r].max(0) - frozen[r].min(0)))
    frames = sequential_frames(frozen, volumes)
    current = frozen
    coarse_params = coarse.parameters() if cfg.finetune else []
    coarse_state = AdamState.for_params(coarse_params) if cfg.finetune else None
    state = AdamState.for_params([soup.parameters()[n] for n in PARAM_NAMES])
    history = []
    N = len(ds)
    dcfg = cfg.densify
    for it in range(cfg.iterations):
        t = int(rng.integers(0, N))
        degree = min(MAX_DEGREE, it // cfg.sh_interval) if cfg.sh_interval > 0 else MAX_DEGREE
        if cfg.finetune:
            pts = coarse.frame_points(t)
        else:
            pts = Tensor(current[t])
        prev = frames[t - 1] if t > 0 else None
        out = render(soup, pts, volumes, ds.cameras[t], degree, prev)
        loss = photometric_loss(out.image, out.alpha, ds.images[t], ds.masks[t], cfg.lam, cfg.alpha_weight)
        reg = Tensor(np.zeros(()))
        if cfg.finetune and cfg.template_reg > 0:
            d = pts - frozen[t]
            reg = (d * d).sum() * cfg.template_reg
        total = loss + reg
        parts = {"total": total.item(), "photometric": loss.item(), "template": reg.item()}
        _check_finite(it, parts)
        plist = [soup.parameters()[n] for n in PARAM_NAMES]
        grads = ad.backward(total, plist + coarse_params, accumulate=False, retain=[out.means2d])
        lrs = [lr_schedule("exponential", it, cfg.iterations, cfg.lr_weights, cfg.lr_weights_final),
               lr_schedule("exponential", it, cfg.iterations, cfg.lr_scales, cfg.lr_scales_final),
               cfg.lr_rotation, cfg.lr_sh, cfg.lr_opacity]
        adam_step(plist, [grads[p] for p in plist], state, lrs)
        if cfg.finetune:
            adam_step(coarse_params, [grads[p] for p in coarse_params], coarse_state, cfg.finetune_lr)
        g2d = grads.get(out.means2d)
        if g2d is not None and it < dcfg.stop:
            accumulate_stats(soup, g2d, out.radii, ds.width, ds.height)
        step = it + 1
        if dcfg.start <= step < dcfg.stop and step % dcfg.interval == 0 and step < cfg.iterations:
            soup, source = densify_and_prune(soup, dcfg, extent, rng)
            state = _remap_adam(state, source, [soup.parameters()[n] for n in PARAM_NAMES])
        if dcfg.opacity_reset and step % dcfg.opacity_reset == 0 and step < min(dcfg.stop, cfg.iterations):
            reset_opacity(soup)
            k = PARAM_NAMES.index("opacity_logit")
            state.m[k] = np.zeros_like(state.m[k])
            state.v[k] = np.zeros_like(state.v[k])
        if cfg.finetune and step % 50 == 0:
            current = coarse.all_points()
            frames = sequential_frames(current, volumes)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({"iteration": it, "frame": t, "n_gaussians": len(soup), **parts})
    if cfg.finetune:
        current = coarse.all_points()
        frames = sequential_frames(current, volumes)
    return Stage2Result(soup, volumes, coarse, current, frames, history)


def _remap_adam(state: AdamState, source: np.ndarray, params) -> AdamState:
    """Carry moments over to the rows that continue an old Gaussian; zero for new rows."""
    keep = source >= 0
    m, v = [], []
    for i, p in enumerate(params):
        mi = np.zeros_like(p.data)
        vi = np.zeros_like(p.data)
        mi[keep] = state.m[i][source[keep]]
        vi[keep] = state.v[i][source[keep]]
        m.append(mi)
        v.append(vi)
    return AdamState(m, v, state.step, state.beta1, state.beta2, state.eps)


def render_frame(result: Stage2Result, t: int, camera, sh_degree: int = MAX_DEGREE):
    """Detached RGB image (H, W, 3) and alpha (H, W) of frame ``t`` seen from ``camera``."""
    prev = result.frames[t - 1] if t > 0 else None
    out = render(result.soup, result.coarse_points[t], result.volumes, camera, sh_degree, prev)
    return np.clip(out.image.data, 0.0, 1.0), out.alpha.data


def save_stage2(result: Stage2Result, path) -> None:
    """Soup, volumes, driving points and the (possibly fine-tuned) coarse model in one container."""
    arrays, meta = checkpoint_arrays(result.coarse)
    arrays = {f"coarse.{k}": v for k, v in arrays.items()}
    arrays["volume_index"] = result.soup.volume_index.astype(np.int64)
    for n in PARAM_NAMES:
        arrays[f"soup.{n}"] = getattr(result.soup, n).data.astype(np.float64)
    arrays["volumes.members"] = result.volumes.members.astype(np.int64)
    arrays["volumes.triangles"] = result.volumes.triangles.astype(np.int64)
    arrays["coarse_points"] = np.asarray(result.coarse_points, dtype=np.float64)
    write_container(path, arrays, {"coarse": meta, "kind": "gaussians"})


def load_stage2(path) -> Stage2Result:
    arrays, meta = read_container(path)
    if meta.get("kind") != "gaussians":
        raise ValueError(f"{path}: not a Gaussian checkpoint")
    coarse = model_from_arrays({k[7:]: v for k, v in arrays.items() if k.startswith("coarse.")},
                               meta["coarse"])
    soup = GaussianSoup(arrays["volume_index"],
                        **{n: Tensor(arrays[f"soup.{n}"], requires_grad=True) for n in PARAM_NAMES})
    volumes = VolumeSet(arrays["volumes.members"], arrays["volumes.triangles"])
    points = arrays["coarse_points"]
    return Stage2Result(soup, volumes, coarse, points, sequential_frames(points, volumes), [])
