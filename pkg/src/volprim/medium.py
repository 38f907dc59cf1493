"""The volumetric medium as a mixture of kernel primitives.

Extinction at a point is the sum sigma_i * K_i(x) over primitives covering
x.  Albedo and phase are density-weighted mixtures of the per-primitive
values; the phase mixture is renormalized so it integrates to one over the
sphere.  Scattering weights use sigma_i * K_i * mean(albedo_i); when every
albedo is zero the weights fall back to plain densities so the phase
function stays well defined at any point with matter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import sh
from .errors import InvalidParameterError, UndefinedPointError
from .geometry import PrimitiveFrame, ellipsoid_aabb
from .kernels import KernelKind, eval_kernel, kernel_peak, support_radius

EPS_WEIGHT = 1e-300


def _as_rgb(v):
    a = np.asarray(v, dtype=np.float64)
    if a.shape == ():
        a = np.full(3, float(a))
    if a.shape != (3,):
        raise InvalidParameterError(f"expected RGB triple, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Primitive:
    """One kernel blob: geometry frame plus optical properties.

    sigma scales kernel density into extinction; albedo is the scattered
    fraction per channel; phase_g the Henyey-Greenstein asymmetry
    (0 = isotropic); sh_coeffs shape (3, (L+1)^2) drives view-dependent
    emission for the radiance-field integrator only.
    """

    frame: PrimitiveFrame
    kind: KernelKind
    sigma: float
    albedo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phase_g: float = 0.0
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((3, 1)))

    def __post_init__(self):
        object.__setattr__(self, "albedo", _as_rgb(self.albedo))
        c = np.asarray(self.sh_coeffs, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != 3:
            raise InvalidParameterError(f"sh_coeffs must be (3, n), got {c.shape}")
        sh.degree_from_count(c.shape[1])
        object.__setattr__(self, "sh_coeffs", c)
        if not np.isfinite(self.sigma) or self.sigma < 0.0:
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            raise InvalidParameterError(f"albedo must lie in [0,1], got {self.albedo}")
        if not abs(self.phase_g) < 1.0:
            raise InvalidParameterError(f"|phase_g| must be < 1, got {self.phase_g}")

    @property
    def support(self) -> float:
        return support_radius(self.kind)

    def density(self, x) -> float:
        """sigma * K(x), zero outside the truncation shell.

        The rendered medium is the shell-truncated mixture: a Gaussian
        contributes only inside its 3-sigma ellipsoid, exactly the region
        the closed-form segment integrals cover.  The discarded tail is
        bounded pointwise by exp(-4.5) of the peak.
        """
        delta = np.asarray(x, dtype=np.float64) - self.frame.mean
        y = (self.frame.rotation.T @ delta) / self.frame.scale
        d = float(y @ y)
        if d > self.support * self.support:
            return 0.0
        return self.sigma * eval_kernel(self.kind, self.frame, x)

    def peak_density(self) -> float:
        return self.sigma * kernel_peak(self.kind, self.frame)

    def with_frame(self, frame: PrimitiveFrame) -> "Primitive":
        return replace(self, frame=frame)


class Mixture:
    """Ordered, immutable-by-convention collection of same-kind primitives."""

    def __init__(self, primitives):
        prims = list(primitives)
        kinds = {p.kind for p in prims}
        if len(kinds) > 1:
            raise InvalidParameterError("mixture primitives must share one kernel kind")
        self.primitives = prims

    def __len__(self):
        return len(self.primitives)

    def __iter__(self):
        return iter(self.primitives)

    def __getitem__(self, i):
        return self.primitives[i]

    @property
    def kind(self) -> KernelKind:
        if not self.primitives:
            raise InvalidParameterError("empty mixture has no kernel kind")
        return self.primitives[0].kind

    def bounds(self):
        """AABB union of all shell ellipsoids; None when empty."""
        if not self.primitives:
            return None
        los, his = [], []
        for p in self.primitives:
            lo, hi = ellipsoid_aabb(p.frame, p.support)
            los.append(lo)
            his.append(hi)
        return np.min(los, axis=0), np.max(his, axis=0)

    def bounding_sphere(self):
        """(center, radius) enclosing every shell, from the AABB."""
        lo, hi = self.bounds()
        center = 0.5 * (lo + hi)
        radius = 0.0
        for p in self.primitives:
            blo, bhi = ellipsoid_aabb(p.frame, p.support)
            corner = np.maximum(np.abs(blo - center), np.abs(bhi - center))
            radius = max(radius, float(np.linalg.norm(corner)))
        return center, radius


def extinction_at(mixture: Mixture, x) -> float:
    """sigma_t(x) = sum of sigma_i K_i(x) over primitives whose shell holds x."""
    return float(sum(p.density(x) for p in mixture))


def _scatter_weights(mixture: Mixture, x):
    dens = np.array([p.density(x) for p in mixture])
    alb_mean = np.array([float(np.mean(p.albedo)) for p in mixture])
    w = dens * alb_mean
    if w.sum() <= EPS_WEIGHT:
        w = dens
    return dens, w


def albedo_at(mixture: Mixture, x) -> np.ndarray:
    """Density-weighted mean albedo; undefined in vacuum."""
    dens = np.array([p.density(x) for p in mixture])
    total = dens.sum()
    if total <= 0.0:
        raise UndefinedPointError(f"sigma_t is zero at {np.asarray(x)}")
    acc = np.zeros(3)
    for p, w in zip(mixture, dens):
        acc += w * p.albedo
    return acc / total


def hg_phase(g: float, cos_theta: float) -> float:
    """Henyey-Greenstein lobe, normalized over the sphere."""
    denom = 1.0 + g * g - 2.0 * g * cos_theta
    return (1.0 - g * g) / (4.0 * np.pi * denom * np.sqrt(denom))


def hg_sample_cos(g: float, xi: float) -> float:
    if abs(g) < 1e-6:
        return 1.0 - 2.0 * xi
    s = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi)
    return (1.0 + g * g - s * s) / (2.0 * g)


def _onb(w):
    """Orthonormal basis (b1, b2) completing unit vector w."""
    s = np.copysign(1.0, w[2])
    a = -1.0 / (s + w[2])
    b = w[0] * w[1] * a
    b1 = np.array([1.0 + s * w[0] * w[0] * a, s * b, -s * w[0]])
    b2 = np.array([b, s + w[1] * w[1] * a, -w[1]])
    return b1, b2


def phase_eval(mixture: Mixture, x, omega_in, omega_out) -> float:
    """Mixture phase value for travel directions omega_in -> omega_out."""
    _, w = _scatter_weights(mixture, x)
    total = w.sum()
    if total <= 0.0:
        raise UndefinedPointError(f"sigma_t is zero at {np.asarray(x)}")
    cos_theta = float(np.dot(omega_in, omega_out))
    acc = 0.0
    for p, wi in zip(mixture, w):
        if wi > 0.0:
            acc += wi * hg_phase(p.phase_g, cos_theta)
    return acc / total


def phase_sample(mixture: Mixture, x, omega_in, xi2):
    """Draw omega_out from the mixture phase; returns (direction, pdf).

    Two uniforms suffice: the first selects the component and is rescaled
    to sample its polar angle, the second gives the azimuth.
    """
    _, w = _scatter_weights(mixture, x)
    total = w.sum()
    if total <= 0.0:
        raise UndefinedPointError(f"sigma_t is zero at {np.asarray(x)}")
    xi0, xi1 = float(xi2[0]), float(xi2[1])
    # Component selection with reuse of the leftover uniform mass.
    cdf = np.cumsum(w / total)
    idx = int(np.searchsorted(cdf, xi0, side="right"))
    idx = min(idx, len(w) - 1)
    lo = cdf[idx - 1] if idx > 0 else 0.0
    span = max(cdf[idx] - lo, 1e-300)
    xi_reuse = min(max((xi0 - lo) / span, 1e-12), 1.0 - 1e-12)
    g = mixture[idx].phase_g
    cos_theta = min(max(hg_sample_cos(g, xi_reuse), -1.0), 1.0)
    sin_theta = np.sqrt(max(0.0, 1.0 - cos_theta * cos_theta))
    phi = 2.0 * np.pi * xi1
    win = np.asarray(omega_in, dtype=np.float64)
    b1, b2 = _onb(win)
    omega_out = sin_theta * (np.cos(phi) * b1 + np.sin(phi) * b2) + cos_theta * win
    omega_out /= np.linalg.norm(omega_out)
    return omega_out, phase_eval(mixture, x, win, omega_out)
