"""Binary PLY export of a Gaussian soup at one frame.

The vertex layout is the one read by common Gaussian-splatting viewers,
all ``float`` (little-endian float32)::

    x y z                 world position at the exported frame
    nx ny nz              zeros
    f_dc_0 .. f_dc_2      degree-0 SH coefficient per colour channel
    f_rest_0 .. f_rest_44 higher-order SH, channel-major (15 per channel)
    opacity               opacity logit
    scale_0 .. scale_2    log-scales
    rot_0 .. rot_3        world rotation quaternion (w, x, y, z)

Rotations and SH coefficients live in each Gaussian's volume frame during
training; the export composes the rotation with the frame and refits the SH
coefficients in world axes, so a viewer sees the same colours.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import matrix_to_quat, quat_to_matrix
from .sh import MAX_DEGREE, n_coeffs, sh_basis
from .volumes import VolumeSet, gaussian_world_position

N_SH = n_coeffs(MAX_DEGREE)


def ply_fields() -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (N_SH - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def _sample_dirs(n: int = 64) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def rotate_sh(coeffs: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Express SH coefficients given in local frames ``frames`` (G, 3, 3) in world axes.

    ``coeffs`` (G, 16, 3) satisfy colour(d_world) = Y(T^T d_world) . coeffs.
    Each degree is closed under rotation, so a least-squares fit on enough
    directions is exact.
    """
    d_local = _sample_dirs()
    Y_local = sh_basis(d_local)  # (S, 16)
    d_world = np.einsum("gij,sj->gsi", frames, d_local)
    Y_world = sh_basis(d_world)  # (G, S, 16)
    target = np.einsum("sk,gkc->gsc", Y_local, coeffs)
    return np.linalg.pinv(Y_world) @ target


def export_arrays(soup, coarse_points: np.ndarray, volumes: VolumeSet, frames: np.ndarray) -> dict:
    """Per-Gaussian world-space attributes at the frame given by ``coarse_points``/``frames``."""
    vidx = soup.volume_index
    T = frames[vidx]
    pos = gaussian_world_position(np.asarray(coarse_points)[volumes.members[vidx]], soup.weights.data)
    R = T @ quat_to_matrix(soup.quats.data)
    return {
        "position": pos,
        "sh": rotate_sh(soup.sh.data, T),
        "opacity_logit": soup.opacity_logit.data.copy(),
        "log_scales": soup.log_scales.data.copy(),
        "quats": matrix_to_quat(R),
    }


def write_ply(path, soup, coarse_points: np.ndarray, volumes: VolumeSet, frames: np.ndarray) -> Path:
    a = export_arrays(soup, coarse_points, volumes, frames)
    G = len(soup)
    cols = [a["position"], np.zeros((G, 3)), a["sh"][:, 0, :],
            np.transpose(a["sh"][:, 1:, :], (0, 2, 1)).reshape(G, -1),
            a["opacity_logit"][:, None], a["log_scales"], a["quats"]]
    data = np.concatenate(cols, axis=1).astype("<f4")
    names = ply_fields()
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {G}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_ply(path) -> dict:
    """Read a file written by :func:`write_ply` into ``{field: array}``."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError(f"{path}: not a little-endian binary PLY")
    count = int(next(line for line in lines if line.startswith("element vertex")).split()[-1])
    names = [line.split()[-1] for line in lines if line.startswith("property")]
    data = np.frombuffer(raw[end:], dtype="<f4").reshape(count, len(names))
    return {n: data[:, i].astype(np.float64) for i, n in enumerate(names)}
