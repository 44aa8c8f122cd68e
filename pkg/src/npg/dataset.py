"""Sequence datasets in the NeRF / D-NeRF ``transforms_*.json`` layout.

Directory layout::

    transforms_train.json   training frames (the monocular sequence)
    transforms_test.json    optional held-out views, same format
    <file_path>.png         RGB or RGBA image per frame
    <mask_path>             optional single-channel PNG, 0 / 255
    <flow_path>             optional backward flow stored on frame t+1

Each manifest frame holds ``file_path``, ``time`` and a 4x4 camera-to-world
``transform_matrix`` in OpenGL axes.  Masks come from ``mask_path`` or, when
absent, from the image's alpha channel.  Flow files are raw little-endian:
``int32 width, int32 height`` followed by ``height * width * 2`` float32
values (row-major, u and v displacement interleaved).  The flow stored on
frame t+1's entry is defined on frame t's pixel grid and points to where each
frame-t pixel lands in frame t+1.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera

MANIFEST_TRAIN = "transforms_train.json"
MANIFEST_TEST = "transforms_test.json"


class DatasetError(ValueError):
    """Raised for any malformed file or field; the message names it."""


class MissingFileError(DatasetError, FileNotFoundError):
    """A file named by the layout or the manifest does not exist."""


@dataclass
class SequenceDataset:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    masks: np.ndarray  # (N, H, W) bool
    cameras: list
    times: np.ndarray  # (N,)
    flows: dict = field(default_factory=dict)  # t -> (H, W, 2), frame t grid -> frame t+1
    names: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)  # raw JSON, kept for round trips

    def __post_init__(self):
        N = len(self.images)
        if not (len(self.masks) == len(self.cameras) == len(self.times) == N):
            raise DatasetError("images, masks, cameras and times disagree in length")
        if N and self.images.shape[1:3] != self.masks.shape[1:3]:
            raise DatasetError("image and mask resolutions differ")
        for t, f in self.flows.items():
            if f.shape != (self.height, self.width, 2):
                raise DatasetError(f"flow for frame {t} has shape {f.shape}")
        if not self.names:
            self.names = [f"frame_{i:03d}" for i in range(N)]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def has_flow(self, t: int) -> bool:
        return t in self.flows


# -- raw flow files ------------------------------------------------------------

def write_flow(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    h, w, c = flow.shape
    if c != 2:
        raise ValueError("flow must have 2 channels")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", w, h))
        fh.write(flow.tobytes())


def read_flow(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: flow file too short")
    w, h = struct.unpack("<ii", raw[:8])
    if w <= 0 or h <= 0 or len(raw) != 8 + 8 * w * h:
        raise DatasetError(f"{path}: flow header {w}x{h} does not match {len(raw)} bytes")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w, 2).astype(np.float64)


# -- images ------------------------------------------------------------------------

def _resolve(root: Path, rel: str, suffix: str = ".png") -> Path:
    p = root / rel
    if not p.suffix:
        p = p.with_suffix(suffix)
    return p


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"missing file {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from None


def _to_unit(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """RGB image (H, W, 3) in [0, 1]; any alpha channel is dropped."""
    raw = _read_png(Path(path))
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    return _to_unit(raw[..., :3])


def write_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# -- cameras ---------------------------------------------------------------------

def _camera(frame: dict, top: dict, width: int, height: int, name: str) -> Camera:
    try:
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"{name}: bad transform_matrix ({exc})") from None
    if c2w.shape != (4, 4) or not np.all(np.isfinite(c2w)):
        raise DatasetError(f"{name}: transform_matrix must be a finite 4x4 matrix")
    R = c2w[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise DatasetError(f"{name}: transform_matrix rotation block is not a rotation "
                           f"(det {np.linalg.det(R):.4f})")
    fx = top.get("fl_x")
    if fx is None:
        if "camera_angle_x" not in top:
            raise DatasetError("manifest lacks camera_angle_x")
        fx = 0.5 * width / math.tan(0.5 * float(top["camera_angle_x"]))
    fy = top.get("fl_y", fx)
    # Pixel (row i, col j) has its centre at (u, v) = (j, i).
    cx = top.get("cx", 0.5 * width - 0.5)
    cy = top.get("cy", 0.5 * height - 0.5)
    # Re-orthonormalise within tolerance so the camera invariant holds tightly.
    U, _, Vt = np.linalg.svd(R)
    c2w = c2w.copy()
    c2w[:3, :3] = U @ Vt
    return Camera.from_c2w_opengl(c2w, float(fx), float(fy), float(cx), float(cy), width, height)


def intrinsics_fields(camera: Camera) -> dict:
    return {"camera_angle_x": 2.0 * math.atan(0.5 * camera.width / camera.fx)}


# -- load / save -------------------------------------------------------------------------

def load_dataset(path, split: str = "train", require_flow: bool = False) -> SequenceDataset:
    root = Path(path)
    manifest_path = root / (MANIFEST_TRAIN if split == "train" else MANIFEST_TEST)
    if not manifest_path.exists():
        raise MissingFileError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from None
    frames = manifest.get("frames")
    if not frames:
        raise DatasetError(f"{manifest_path}: no frames")
    order = sorted(range(len(frames)), key=lambda i: float(frames[i].get("time", i)))
    images, masks, cameras, times, names, flows = [], [], [], [], [], {}
    shape = None
    for t, i in enumerate(order):
        fr = frames[i]
        if "file_path" not in fr:
            raise DatasetError(f"{manifest_path}: frame {i} lacks file_path")
        name = fr["file_path"]
        img_path = _resolve(root, name)
        raw = _read_png(img_path)
        if raw.ndim == 2:
            raw = np.stack([raw] * 3, axis=-1)
        if shape is None:
            shape = raw.shape[:2]
        elif raw.shape[:2] != shape:
            raise DatasetError(f"{img_path}: resolution {raw.shape[:2]} differs from {shape}")
        if "mask_path" in fr:
            m = _read_png(_resolve(root, fr["mask_path"]))
            if m.ndim == 3:
                m = m[..., 0]
            if m.shape != shape:
                raise DatasetError(f"{fr['mask_path']}: mask resolution {m.shape} differs from {shape}")
            mask = m > 127
        elif raw.shape[2] == 4:
            mask = raw[..., 3] > 127
        else:
            raise DatasetError(f"{name}: no mask_path and no alpha channel")
        images.append(_to_unit(raw[..., :3]))
        masks.append(mask)
        cameras.append(_camera(fr, manifest, shape[1], shape[0], name))
        times.append(float(fr.get("time", t)))
        names.append(name)
        if "flow_path" in fr:
            if t == 0:
                raise DatasetError(f"{name}: the first frame cannot carry backward flow")
            flows[t - 1] = read_flow(_resolve(root, fr["flow_path"], ".flo"))
            if flows[t - 1].shape[:2] != shape:
                raise DatasetError(f"{fr['flow_path']}: flow resolution differs from images")
        elif require_flow and t > 0:
            raise DatasetError(f"{name}: missing flow_path")
    ds = SequenceDataset(np.stack(images), np.stack(masks), cameras, np.asarray(times), flows,
                         names, manifest)
    return ds


def save_dataset(ds: SequenceDataset, path, split: str = "train") -> Path:
    """Write images, masks, flow and the manifest.

    When ``ds.manifest`` is present it is written back unchanged (up to
    formatting), so ``save_dataset(load_dataset(p))`` reproduces ``p``'s
    manifest.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = copy.deepcopy(ds.manifest) if ds.manifest else None
    if manifest is None:
        manifest = {**intrinsics_fields(ds.cameras[0]), "frames": []}
        for t in range(len(ds)):
            stem = f"{split}/r_{t:03d}"
            fr = {"file_path": f"./{stem}", "time": float(ds.times[t]),
                  "transform_matrix": ds.cameras[t].c2w_opengl().tolist(),
                  "mask_path": f"./{split}/mask_{t:03d}.png"}
            if t - 1 in ds.flows:
                fr["flow_path"] = f"./{split}/flow_{t:03d}.flo"
            manifest["frames"].append(fr)
    frames = sorted(manifest["frames"], key=lambda f: float(f.get("time", 0.0)))
    for t, fr in enumerate(frames):
        img_path = _resolve(root, fr["file_path"])
        img_path.parent.mkdir(parents=True, exist_ok=True)
        if "mask_path" in fr:
            write_png(img_path, ds.images[t])
            write_png(_resolve(root, fr["mask_path"]), ds.masks[t].astype(np.uint8) * 255)
        else:
            rgba = np.concatenate([ds.images[t], ds.masks[t][..., None].astype(np.float64)], axis=2)
            write_png(img_path, rgba)
        if "flow_path" in fr:
            write_flow(_resolve(root, fr["flow_path"], ".flo"), ds.flows[t - 1])
    name = MANIFEST_TRAIN if split == "train" else MANIFEST_TEST
    out = root / name
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    ds.manifest = manifest
    return out
