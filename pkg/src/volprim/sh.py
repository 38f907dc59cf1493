"""Real spherical harmonics up to degree 3.

Standard orthonormal real basis in the graphics ordering (m = -l..l per
band); with x, y, z the components of a unit direction, each band is a
polynomial in them.  Degree L uses (L+1)^2 coefficients per color channel.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError

Y00 = 0.28209479177387814  # 1 / (2 sqrt(pi))

_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
       0.3731763325901154, 0.4570457994644658, 1.445305721320277,
       0.5900435899266435)

MAX_DEGREE = 3


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_count(n: int) -> int:
    l = int(round(np.sqrt(n))) - 1
    if n_coeffs(l) != n or not 0 <= l <= MAX_DEGREE:
        raise InvalidParameterError(f"{n} is not (L+1)^2 for L in 0..{MAX_DEGREE}")
    return l


def eval_sh_basis(direction) -> np.ndarray:
    """All 16 basis values at a unit direction; callers slice to their degree."""
    x, y, z = np.asarray(direction, dtype=np.float64)
    out = np.empty(16)
    out[0] = Y00
    out[1] = _C1 * y
    out[2] = _C1 * z
    out[3] = _C1 * x
    xx, yy, zz = x * x, y * y, z * z
    out[4] = _C2[0] * x * y
    out[5] = _C2[1] * y * z
    out[6] = _C2[2] * (3.0 * zz - 1.0)
    out[7] = _C2[3] * x * z
    out[8] = _C2[4] * (xx - yy)
    out[9] = _C3[0] * y * (3.0 * xx - yy)
    out[10] = _C3[1] * x * y * z
    out[11] = _C3[2] * y * (5.0 * zz - 1.0)
    out[12] = _C3[3] * z * (5.0 * zz - 3.0)
    out[13] = _C3[4] * x * (5.0 * zz - 1.0)
    out[14] = _C3[5] * z * (xx - yy)
    out[15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh_basis_many(dirs) -> np.ndarray:
    """(R, 16) basis values for an (R, 3) block of unit directions."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((dirs.shape[0], 16))
    out[:, 0] = Y00
    out[:, 1] = _C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = _C1 * x
    out[:, 4] = _C2[0] * x * y
    out[:, 5] = _C2[1] * y * z
    out[:, 6] = _C2[2] * (3.0 * zz - 1.0)
    out[:, 7] = _C2[3] * x * z
    out[:, 8] = _C2[4] * (xx - yy)
    out[:, 9] = _C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = _C3[1] * x * y * z
    out[:, 11] = _C3[2] * y * (5.0 * zz - 1.0)
    out[:, 12] = _C3[3] * z * (5.0 * zz - 3.0)
    out[:, 13] = _C3[4] * x * (5.0 * zz - 1.0)
    out[:, 14] = _C3[5] * z * (xx - yy)
    out[:, 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh(coeffs: np.ndarray, direction) -> np.ndarray:
    """RGB emission for (3, n) coefficients; raw value, not clamped."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != 3:
        raise InvalidParameterError(f"sh coeffs must have shape (3, n), got {c.shape}")
    n = c.shape[1]
    degree_from_count(n)
    basis = eval_sh_basis(direction)[:n]
    return c @ basis
