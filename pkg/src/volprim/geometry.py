"""Rays, primitive frames, and whitening transforms.

A primitive frame is (mean c, rotation R from Euler angles, per-axis scale s),
giving the covariance Sigma = R diag(s^2) R^T.  "Whitened space" is the frame
in which the primitive's ellipsoid is the unit sphere: y = S^-1 R^T (x - c).
The whitening map is affine in the ray parameter t, so t found in whitened
space is directly valid in world space; the whitened direction is deliberately
left unnormalized for that reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameterError

UNIT_TOL = 1e-6


def _as_vec3(v):
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise InvalidParameterError(f"expected 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Ray:
    """Ray r(t) = origin + t * direction for t in [t_min, t_max].

    ``direction`` is unit length for world-space rays; whitened rays keep the
    unnormalized image of the unit direction under the frame's linear map.
    """

    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        object.__setattr__(self, "direction", _as_vec3(self.direction))
        if not np.all(np.isfinite(self.origin)) or not np.all(np.isfinite(self.direction)):
            raise InvalidParameterError("ray origin/direction must be finite")
        if self.t_min > self.t_max:
            raise InvalidParameterError(f"t_min {self.t_min} > t_max {self.t_max}")

    def at(self, t):
        return self.origin + t * self.direction

    @property
    def is_unit(self):
        return abs(np.linalg.norm(self.direction) - 1.0) <= UNIT_TOL


def make_ray(origin, direction, t_min=0.0, t_max=np.inf):
    """Ray with the direction normalized."""
    d = _as_vec3(direction)
    n = np.linalg.norm(d)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidParameterError("ray direction must be a nonzero finite vector")
    return Ray(origin, d / n, t_min, t_max)


@dataclass(frozen=True)
class PrimitiveFrame:
    """Mean, rotation (Euler angles, radians), and per-axis scale of one primitive.

    Scales are per-axis standard deviations / bandwidths; all must be > 0.
    The Euler convention is ZYX: R = Rz(ez) @ Ry(ey) @ Rx(ex) with
    euler = (ex, ey, ez).  ``rotation_from_euler`` is the single source of
    truth for the conversion.
    """

    mean: np.ndarray
    euler: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_vec3(self.mean))
        object.__setattr__(self, "euler", _as_vec3(self.euler))
        object.__setattr__(self, "scale", _as_vec3(self.scale))
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.euler))
                and np.all(np.isfinite(self.scale))):
            raise InvalidParameterError("frame fields must be finite")
        if np.any(self.scale <= 0.0):
            raise InvalidParameterError(f"scale components must be > 0, got {self.scale}")

    @property
    def rotation(self):
        return rotation_from_euler(self.euler)

    def with_mean(self, mean):
        return replace(self, mean=_as_vec3(mean))


def rotation_from_euler(euler):
    """3x3 rotation matrix R = Rz(ez) @ Ry(ey) @ Rx(ex), euler = (ex, ey, ez)."""
    ex, ey, ez = np.asarray(euler, dtype=np.float64)
    cx, sx = np.cos(ex), np.sin(ex)
    cy, sy = np.cos(ey), np.sin(ey)
    cz, sz = np.cos(ez), np.sin(ez)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotation_derivatives(euler):
    """dR/dex, dR/dey, dR/dez for the ZYX convention above."""
    ex, ey, ez = np.asarray(euler, dtype=np.float64)
    cx, sx = np.cos(ex), np.sin(ex)
    cy, sy = np.cos(ey), np.sin(ey)
    cz, sz = np.cos(ez), np.sin(ez)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def covariance_from_frame(frame: PrimitiveFrame) -> np.ndarray:
    """Covariance Sigma = R diag(s^2) R^T; symmetric positive definite."""
    r = frame.rotation
    sigma = (r * frame.scale**2) @ r.T
    return 0.5 * (sigma + sigma.T)


def whiten(ray: Ray, frame: PrimitiveFrame) -> Ray:
    """Transform a world ray into the frame's whitened space.

    The returned ray satisfies r~(t) = S^-1 R^T (r(t) - c) with the *same*
    parameter t; its direction is not renormalized.
    """
    r = frame.rotation
    inv_s = 1.0 / frame.scale
    origin = inv_s * (r.T @ (ray.origin - frame.mean))
    direction = inv_s * (r.T @ ray.direction)
    return Ray(origin, direction, ray.t_min, ray.t_max)


def unwhiten_point(y, frame: PrimitiveFrame):
    """Inverse of the whitening map for a single point."""
    r = frame.rotation
    return r @ (frame.scale * np.asarray(y, dtype=np.float64)) + frame.mean


def ray_ellipsoid_intersect(ray: Ray, frame: PrimitiveFrame, k_support: float):
    """Entry/exit parameters of the shell {x : d(x) <= k_support^2}.

    d is the Mahalanobis quadratic of the frame.  Returns (t0, t1) with
    t0 < t1, or None when the infinite line misses the shell or the interval
    lies entirely outside [t_min, t_max].  The interval itself is not clipped.
    """
    if k_support <= 0.0:
        raise InvalidParameterError(f"k_support must be > 0, got {k_support}")
    w = whiten(ray, frame)
    y0, u = w.origin, w.direction
    m2 = float(u @ u)
    if m2 == 0.0:
        return None
    b = float(y0 @ u)
    c = float(y0 @ y0) - k_support * k_support
    disc = b * b - m2 * c
    if disc <= 0.0:
        return None
    root = np.sqrt(disc)
    t0 = (-b - root) / m2
    t1 = (-b + root) / m2
    if t1 < ray.t_min or t0 > ray.t_max:
        return None
    return t0, t1


def ellipsoid_aabb(frame: PrimitiveFrame, k_support: float):
    """Axis-aligned bounds of the shell ellipsoid: c +- k * row-norms of R S."""
    rs = frame.rotation * frame.scale
    half = k_support * np.sqrt((rs * rs).sum(axis=1))
    return frame.mean - half, frame.mean + half
