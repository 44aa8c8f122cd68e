"""Stage-1 coarse point model: a low-rank point basis mixed by an MLP of time."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_FREQUENCIES = 6
ENCODING_DIM = 1 + 2 * N_FREQUENCIES
HIDDEN_WIDTH = 256
N_LAYERS = 6
LEAKY_SLOPE = 0.01
DESCRIPTOR_DIM = 16
DEFAULT_POINTS = 1500
DEFAULT_BASIS_SIZE = 25


def encode_time(t, n_frames: int) -> np.ndarray:
    """Fourier features of the normalised frame index.

    ``t`` is a 0-based frame index (scalar or array) in ``[0, n_frames - 1]``.
    Output: ``[s, sin(2^j pi s), cos(2^j pi s) for j in 0..5]`` with
    ``s = t / (n_frames - 1)``; shape ``(..., 13)``.
    """
    if n_frames < 2:
        raise ValueError("time encoding needs at least 2 frames")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > n_frames - 1):
        raise ValueError(f"frame index out of range [0, {n_frames - 1}]")
    s = t / (n_frames - 1)
    freqs = np.pi * 2.0 ** np.arange(N_FREQUENCIES)
    ang = s[..., None] * freqs
    out = np.empty(s.shape + (ENCODING_DIM,))
    out[..., 0] = s
    out[..., 1::2] = np.sin(ang)
    out[..., 2::2] = np.cos(ang)
    return out


@dataclass
class CoefficientNetwork:
    """Six fully connected layers, leaky-ReLU between them, linear output."""

    weights: list  # Tensors (fan_in, fan_out)
    biases: list  # Tensors (fan_out,)
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        for (w0, b0), w1 in zip(zip(self.weights, self.biases), self.weights[1:]):
            if w0.shape[1] != w1.shape[0] or b0.shape != (w0.shape[1],):
                raise ValueError("coefficient network layer shapes do not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, encoding) -> Tensor:
        h = ad.as_tensor(encoding)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = ad.leaky_relu(h, self.slope)
        return h


def init_network(in_dim: int, out_dim: int, rng: np.random.Generator,
                 hidden: int = HIDDEN_WIDTH, n_layers: int = N_LAYERS,
                 slope: float = LEAKY_SLOPE, out_scale: float = 0.01) -> CoefficientNetwork:
    """Kaiming-normal hidden layers; the output layer is shrunk by ``out_scale``
    and biased to ``1/sqrt(K)`` so every frame starts from the same shape."""
    dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, gain / np.sqrt(a), size=(a, b))
        bias = np.zeros(b)
        if i == n_layers - 1:
            w *= out_scale
            bias[:] = 1.0 / np.sqrt(out_dim)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(bias, requires_grad=True))
    return CoefficientNetwork(weights, biases, slope)


def assemble_points(basis, alpha) -> Tensor:
    """P = sum_k alpha_k B_k.

    ``basis`` (K, M, 3); ``alpha`` (K,) or (T, K) -> (M, 3) or (T, M, 3).
    """
    basis = ad.as_tensor(basis)
    alpha = ad.as_tensor(alpha)
    K, M, _ = basis.shape
    if alpha.shape[-1] != K:
        raise ad.ShapeError(f"assemble_points: {alpha.shape[-1]} coefficients for basis of size {K}")
    flat = basis.reshape(K, M * 3)
    if alpha.ndim == 1:
        return (alpha.reshape(1, K) @ flat).reshape(M, 3)
    return (alpha @ flat).reshape(alpha.shape[0], M, 3)


@dataclass
class CoarseModel:
    basis: Tensor  # (K, M, 3)
    network: CoefficientNetwork
    colors: np.ndarray  # (M, 3)
    descriptors: np.ndarray  # (M, d_e), never optimised
    n_frames: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.basis.shape[0]

    @property
    def M(self) -> int:
        return self.basis.shape[1]

    def parameters(self) -> list:
        return [self.basis] + self.network.parameters()

    def coefficients(self, frames) -> Tensor:
        """alpha^t for an array of 0-based frame indices -> (T, K)."""
        return self.network(encode_time(np.atleast_1d(frames), self.n_frames))

    def points(self, frames) -> Tensor:
        """P^t for an array of frame indices -> (T, M, 3)."""
        return assemble_points(self.basis, self.coefficients(frames))

    def frame_points(self, t: int) -> Tensor:
        return self.points([t])[0]

    def all_points(self) -> np.ndarray:
        """Detached (N, M, 3) array of every frame's points."""
        return self.points(np.arange(self.n_frames)).data.copy()

    def copy(self) -> "CoarseModel":
        net = CoefficientNetwork([Tensor(w.data.copy(), requires_grad=True) for w in self.network.weights],
                                 [Tensor(b.data.copy(), requires_grad=True) for b in self.network.biases],
                                 self.network.slope)
        return CoarseModel(Tensor(self.basis.data.copy(), requires_grad=True), net,
                           self.colors.copy(), self.descriptors.copy(), self.n_frames, self.seed,
                           dict(self.meta))


def init_model(M: int = DEFAULT_POINTS, K: int = DEFAULT_BASIS_SIZE, N: int = 2, seed: int = 0,
               extent: float = 1.0, center=(0.0, 0.0, 0.0), hidden: int = HIDDEN_WIDTH,
               descriptor_dim: int = DESCRIPTOR_DIM) -> CoarseModel:
    """Random basis whose frame-0 points fill a cube of side ``extent``."""
    if M <= 0 or K <= 0 or N <= 0:
        raise ValueError("M, K and N must be positive")
    rng = np.random.default_rng(seed)
    net = init_network(ENCODING_DIM, K, rng, hidden=hidden)
    basis = rng.normal(size=(K, M, 3))
    alpha0 = net(encode_time(0, max(N, 2))[None]).data[0]
    p0 = np.einsum("k,kmi->mi", alpha0, basis)
    basis *= 0.5 * extent / np.abs(p0).max()
    # The offset goes into every element along the frame-0 coefficients.
    basis += np.asarray(center)[None, None, :] * (alpha0 / (alpha0 @ alpha0))[:, None, None]
    colors = np.full((M, 3), 0.5)
    descriptors = rng.uniform(size=(M, descriptor_dim))
    return CoarseModel(Tensor(basis, requires_grad=True), net, colors, descriptors, N, seed,
                       {"extent": extent})


def point_trajectories(model: CoarseModel, frames=None) -> np.ndarray:
    """Per-point polylines, shape (M, T, 3), ordered by frame."""
    frames = np.arange(model.n_frames) if frames is None else np.asarray(frames)
    return np.transpose(model.points(frames).data, (1, 0, 2)).copy()


def trajectory_rank(trajectories: np.ndarray, rel_tol: float = 1e-8) -> int:
    """Numerical rank of the stacked (3M x T) trajectory matrix."""
    mat = np.transpose(trajectories, (0, 2, 1)).reshape(-1, trajectories.shape[1])
    s = np.linalg.svd(mat, compute_uv=False)
    return int(np.sum(s > rel_tol * s[0])) if s.size and s[0] > 0 else 0


# -- checkpoint container ----------------------------------------------------
# Layout: b"NPGCKPT1" | uint64 LE header length | UTF-8 JSON header | raw arrays.
# The header lists each array's name, dtype, shape and byte offset.

_MAGIC = b"NPGCKPT1"


def write_container(path, arrays: dict, meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_container(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<" + e["dtype"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, header["meta"]


def checkpoint_arrays(model: CoarseModel) -> tuple[dict, dict]:
    arrays = {"basis": model.basis.data.astype(np.float64)}
    for i, (w, b) in enumerate(zip(model.network.weights, model.network.biases)):
        arrays[f"theta.{i}.weight"] = w.data.astype(np.float64)
        arrays[f"theta.{i}.bias"] = b.data.astype(np.float64)
    arrays["colors"] = model.colors.astype(np.float64)
    arrays["descriptors"] = model.descriptors.astype(np.float64)
    meta = {"K": model.K, "M": model.M, "N": model.n_frames, "seed": model.seed,
            "n_layers": len(model.network.weights), "slope": model.network.slope, **model.meta}
    return arrays, meta


def model_from_arrays(arrays: dict, meta: dict) -> CoarseModel:
    n = meta["n_layers"]
    net = CoefficientNetwork([Tensor(arrays[f"theta.{i}.weight"], requires_grad=True) for i in range(n)],
                             [Tensor(arrays[f"theta.{i}.bias"], requires_grad=True) for i in range(n)],
                             meta["slope"])
    extra = {k: v for k, v in meta.items() if k not in {"K", "M", "N", "seed", "n_layers", "slope"}}
    return CoarseModel(Tensor(arrays["basis"], requires_grad=True), net, arrays["colors"],
                       arrays["descriptors"], meta["N"], meta["seed"], extra)


def save_checkpoint(model: CoarseModel, path) -> None:
    write_container(path, *checkpoint_arrays(model))


def load_checkpoint(path) -> CoarseModel:
    arrays, meta = read_container(path)
    if "basis" not in arrays:
        raise ValueError(f"{path}: not a coarse-model checkpoint")
    return model_from_arrays(arrays, meta)
