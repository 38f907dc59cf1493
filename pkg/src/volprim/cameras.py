"""Camera models generating world-space primary rays.

All cameras share a position/look-at/up pose and a (width, height)
resolution.  Ray generation is vectorized: pixel index arrays plus jitter
arrays in, origin/direction arrays out.  Pixel (0, 0) is the top-left
corner of the image; jitter (0.5, 0.5) is the pixel center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


def _pose_basis(position, target, up):
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    n = np.linalg.norm(forward)
    if n == 0.0:
        raise InvalidParameterError("camera target coincides with position")
    forward = forward / n
    right = np.cross(forward, up)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise InvalidParameterError("camera up vector is parallel to view direction")
    right = right / n
    true_up = np.cross(right, forward)
    return position, forward, right, true_up


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    target: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        pos, fwd, right, true_up = _pose_basis(self.position, self.target, self.up)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64))
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "true_up", true_up)


def _check_resolution(width, height):
    if width < 1 or height < 1:
        raise InvalidParameterError(f"resolution must be positive, got {width}x{height}")


@dataclass(frozen=True)
class Perspective:
    pose: Pose
    vfov_deg: float
    width: int
    height: int

    def __post_init__(self):
        _check_resolution(self.width, self.height)
        if not 0.0 < self.vfov_deg < 180.0:
            raise InvalidParameterError(f"vfov must be in (0, 180), got {self.vfov_deg}")

    def rays(self, px, py, jx, jy):
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        tan_half = np.tan(np.radians(self.vfov_deg) * 0.5)
        aspect = self.width / self.height
        sx = ((px + jx) / self.width * 2.0 - 1.0) * tan_half * aspect
        sy = (1.0 - (py + jy) / self.height * 2.0) * tan_half
        p = self.pose
        d = (p.forward[None, :] + sx[..., None] * p.right[None, :]
             + sy[..., None] * p.true_up[None, :])
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(p.position, d.shape).copy()
        return o, d


@dataclass(frozen=True)
class Telecentric:
    """Orthographic thin-lens camera: parallel chief rays, defocus away
    from the focus plane controlled by the aperture radius."""

    pose: Pose
    ortho_scale: float  # world-space height of the image plane
    width: int
    height: int
    aperture_radius: float = 0.0
    focus_distance: float = 1.0

    def __post_init__(self):
        _check_resolution(self.width, self.height)
        if self.ortho_scale <= 0.0:
            raise InvalidParameterError("ortho_scale must be positive")
        if self.aperture_radius < 0.0:
            raise InvalidParameterError("aperture radius must be >= 0")
        if self.focus_distance <= 0.0:
            raise InvalidParameterError("focus distance must be positive")

    def rays(self, px, py, jx, jy, lens_u=None, lens_v=None):
        """lens_u/lens_v in [0,1) sample the aperture disk; omitted or with
        zero aperture the camera is purely orthographic."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        aspect = self.width / self.height
        sx = ((px + jx) / self.width * 2.0 - 1.0) * 0.5 * self.ortho_scale * aspect
        sy = (1.0 - (py + jy) / self.height * 2.0) * 0.5 * self.ortho_scale
        p = self.pose
        o = (p.position[None, :] + sx[..., None] * p.right[None, :]
             + sy[..., None] * p.true_up[None, :])
        d = np.broadcast_to(p.forward, o.shape).copy()
        if self.aperture_radius > 0.0 and lens_u is not None:
            # Concentric-free polar mapping is fine here: smooth defocus is
            # all the fit needs, exact disk uniformity is not load bearing.
            r = self.aperture_radius * np.sqrt(np.asarray(lens_u, dtype=np.float64))
            phi = 2.0 * np.pi * np.asarray(lens_v, dtype=np.float64)
            focus = o + self.focus_distance * d
            o = o + (r * np.cos(phi))[..., None] * p.right[None, :] \
                  + (r * np.sin(phi))[..., None] * p.true_up[None, :]
            d = focus - o
            d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return o, d


@dataclass(frozen=True)
class Equirect360:
    pose: Pose
    width: int
    height: int

    def __post_init__(self):
        _check_resolution(self.width, self.height)

    def rays(self, px, py, jx, jy):
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        az = ((px + jx) / self.width) * 2.0 * np.pi - np.pi
        polar = ((py + jy) / self.height) * np.pi
        sp = np.sin(polar)
        local = np.stack([sp * np.sin(az), np.cos(polar), sp * np.cos(az)], axis=-1)
        p = self.pose
        d = (local[..., 0:1] * p.right[None, :] + local[..., 1:2] * p.true_up[None, :]
             + local[..., 2:3] * p.forward[None, :])
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(p.position, d.shape).copy()
        return o, d


Camera = Perspective | Telecentric | Equirect360


def pixel_grid(camera):
    """Flat arrays of pixel x/y indices in row-major image order."""
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    return xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)
