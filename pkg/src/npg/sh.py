"""Real spherical harmonics up to degree 3 (3D Gaussian splatting ordering and signs)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
MAX_DEGREE = 3


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs, degree: int = MAX_DEGREE):
    """Basis values (..., (degree+1)^2) at unit directions (..., 3)."""
    is_t = isinstance(dirs, ad.Tensor)
    d = ad.as_tensor(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    one = x * 0.0 + 1.0
    out = [one * C0]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [C2[0] * xy, C2[1] * yz, C2[2] * (2.0 * zz - xx - yy), C2[3] * xz,
                C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3.0 * xx - yy), C3[1] * xy * z, C3[2] * y * (4.0 * zz - xx - yy),
                C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy), C3[4] * x * (4.0 * zz - xx - yy),
                C3[5] * z * (xx - yy), C3[6] * x * (xx - 3.0 * yy)]
    basis = ad.stack(out, axis=-1)
    return basis if is_t else basis.data


def sh_eval(coeffs, dirs, degree: int = MAX_DEGREE):
    """RGB from SH coefficients (..., n, 3) at unit directions (..., 3).

    Only the first ``(degree+1)^2`` coefficients are used.  Result is
    ``basis . coeffs + 0.5`` clamped below at zero.
    """
    is_t = isinstance(coeffs, ad.Tensor) or isinstance(dirs, ad.Tensor)
    h = ad.as_tensor(coeffs)
    n = n_coeffs(degree)
    if h.shape[-2] < n:
        raise ad.ShapeError(f"sh_eval: {h.shape[-2]} coefficients cannot express degree {degree}")
    basis = sh_basis(ad.as_tensor(dirs, dtype=h.dtype), degree)
    if h.shape[-2] > n:
        h = h[..., :n, :]
    rgb = (ad.expand_dims(basis, -1) * h).sum(axis=-2) + 0.5
    rgb = ad.maximum_scalar(rgb, 0.0)
    return rgb if is_t else rgb.data


def rgb_to_sh0(rgb):
    return (np.asarray(rgb) - 0.5) / C0
