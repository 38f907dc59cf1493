"""Kernel densities and closed-form line integrals.

Extinction inside one primitive is sigma * K(x) with K a normalized
anisotropic kernel.  In whitened coordinates the ray is y(t) = y0 + t*u with
u left unnormalized, so the Mahalanobis quadratic along the ray is
d(t) = a + 2*b*t + m2*t^2, a = y0.y0, b = y0.u, m2 = u.u, and t keeps its
world-space meaning.  Optical depth over [t0, t1] is then closed form:

  Gaussian      tau = sigma * G * (erf(q1) - erf(q0)),
                q(t) = m*(t - t_c)/sqrt(2), t_c = -b/m2 (symmetric shift),
                G = exp(-(a - b^2/m2)/2) / (4*pi*m*sqrt(det Sigma))
  Epanechnikov  tau = sigma * K_norm * [K1*t + K2*t^2 + K3*t^3]_{t0}^{t1}
                restricted to the support interval where d(t) <= 7

The Gaussian free-flight inversion solves tau(t0, t) = target through
erfinv; arguments within 1e-7 of +-1 are numerically unstable and trigger a
bisection fallback.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ContractViolationError, InvalidParameterError, TargetDepthError
from .geometry import PrimitiveFrame, Ray, whiten

INV_TWO_PI_CUBED_SQRT = (2.0 * np.pi) ** -1.5  # peak of the unit Gaussian, ~0.0634936
EPAN_SUPPORT_D = 7.0  # kernel 1 - d/7 reaches zero at d = 7
EPAN_NORM = 15.0 / (8.0 * np.pi * EPAN_SUPPORT_D**1.5)  # unit-mass constant, det-free part
ERFINV_STABLE = 1.0 - 1e-7

_SQRT2 = np.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


class KernelKind(enum.Enum):
    GAUSSIAN = "gaussian"
    EPANECHNIKOV = "epanechnikov"


def support_radius(kind: KernelKind) -> float:
    """Whitened-space truncation radius of the kernel's shell.

    The Gaussian has infinite support and is truncated at three standard
    deviations (99.73% of its mass); the Epanechnikov kernel ends exactly at
    sqrt(7), where 1 - d/7 hits zero.
    """
    if kind is KernelKind.GAUSSIAN:
        return 3.0
    return float(np.sqrt(EPAN_SUPPORT_D))


def erf(x):
    return special.erf(x)


def erf_diff(q0, q1):
    """erf(q1) - erf(q0) computed without cancellation in the tails."""
    if q0 >= 0.0 and q1 >= 0.0:
        return float(special.erfc(q0) - special.erfc(q1))
    if q0 <= 0.0 and q1 <= 0.0:
        return float(special.erfc(-q1) - special.erfc(-q0))
    return float(special.erf(q1) - special.erf(q0))


def erfinv_stable(y):
    """(erfinv(y), stable) with a Newton polish on the erf residual.

    stable is False when |y| > 1 - 1e-7, where double-precision erfinv loses
    accuracy; callers should then solve by bisection instead.
    """
    if abs(y) > ERFINV_STABLE:
        return float(special.erfinv(y)), False
    x = float(special.erfinv(y))
    # One guarded Newton step: erf'(x) = 2/sqrt(pi) * exp(-x^2).
    if abs(x) < 6.0:
        r = float(special.erf(x)) - y
        x -= r / (_TWO_OVER_SQRT_PI * np.exp(-x * x))
    return x, True


def eval_kernel(kind: KernelKind, frame: PrimitiveFrame, x) -> float:
    """Normalized kernel density K(x); integrates to 1 over R^3."""
    r = frame.rotation
    y = (r.T @ (np.asarray(x, dtype=np.float64) - frame.mean)) / frame.scale
    d = float(y @ y)
    det_sqrt = float(np.prod(frame.scale))
    if kind is KernelKind.GAUSSIAN:
        return INV_TWO_PI_CUBED_SQRT / det_sqrt * np.exp(-0.5 * d)
    if d >= EPAN_SUPPORT_D:
        return 0.0
    return EPAN_NORM / det_sqrt * (1.0 - d / EPAN_SUPPORT_D)


def kernel_peak(kind: KernelKind, frame: PrimitiveFrame) -> float:
    """K at the mean, the kernel's maximum value."""
    det_sqrt = float(np.prod(frame.scale))
    if kind is KernelKind.GAUSSIAN:
        return INV_TWO_PI_CUBED_SQRT / det_sqrt
    return EPAN_NORM / det_sqrt


@dataclass(frozen=True)
class LineIntegralCoeffs:
    """Per-(ray, primitive) constants of the closed-form optical depth.

    a, b, m2 are the whitened-ray dot products defined in the module
    docstring (b is pre-shift; the symmetric shift moves the origin to t_c
    where the residual linear term vanishes).  g is the Gaussian amplitude,
    zero for Epanechnikov.  k1, k2, k3 are the Epanechnikov antiderivative
    coefficients and k_norm the kernel's peak normalizer (> 0 for both
    kinds).  sup0 >= sup1 encodes an empty support interval.
    """

    kind: KernelKind
    a: float
    b: float
    m2: float
    g: float
    t_c: float
    k1: float
    k2: float
    k3: float
    k_norm: float
    sup0: float
    sup1: float

    @property
    def m(self) -> float:
        return np.sqrt(self.m2)

    def density(self, t: float) -> float:
        """Kernel value K(r(t)), without the cross-section factor."""
        d = self.a + 2.0 * self.b * t + self.m2 * t * t
        if self.kind is KernelKind.GAUSSIAN:
            return self.k_norm * np.exp(-0.5 * d)
        if d >= EPAN_SUPPORT_D:
            return 0.0
        return self.k_norm * (1.0 - d / EPAN_SUPPORT_D)

    def depth_unit(self, t0: float, t1: float) -> float:
        """Line integral of K over [t0, t1]; multiply by sigma for tau."""
        if t0 >= t1:
            return 0.0
        if self.kind is KernelKind.GAUSSIAN:
            m = self.m
            q0 = m * (t0 - self.t_c) / _SQRT2
            q1 = m * (t1 - self.t_c) / _SQRT2
            return self.g * erf_diff(q0, q1)
        lo = max(t0, self.sup0)
        hi = min(t1, self.sup1)
        if lo >= hi:
            return 0.0
        p1 = self.k1 * lo + self.k2 * lo * lo + self.k3 * lo**3
        p2 = self.k1 * hi + self.k2 * hi * hi + self.k3 * hi**3
        return self.k_norm * (p2 - p1)


def line_integral_coeffs(kind: KernelKind, frame: PrimitiveFrame, ray: Ray) -> LineIntegralCoeffs:
    """Precompute the ray-dependent constants used by depth and inversion."""
    w = whiten(ray, frame)
    y0, u = w.origin, w.direction
    a = float(y0 @ y0)
    b = float(y0 @ u)
    m2 = float(u @ u)
    if m2 <= 0.0 or not np.isfinite(m2):
        raise InvalidParameterError("degenerate whitened direction")
    det_sqrt = float(np.prod(frame.scale))
    t_c = -b / m2
    if kind is KernelKind.GAUSSIAN:
        # h >= 0 by Cauchy-Schwarz; clamp rounding noise for rays through the mean.
        h = max(a - b * b / m2, 0.0)
        m = np.sqrt(m2)
        g = np.exp(-0.5 * h) / (4.0 * np.pi * m * det_sqrt)
        return LineIntegralCoeffs(
            kind=kind, a=a, b=b, m2=m2, g=float(g), t_c=t_c,
            k1=0.0, k2=0.0, k3=0.0,
            k_norm=INV_TWO_PI_CUBED_SQRT / det_sqrt,
            sup0=-np.inf, sup1=np.inf,
        )
    # Epanechnikov: support where d(t) <= 7, a downward interval of a parabola.
    disc = b * b - m2 * (a - EPAN_SUPPORT_D)
    if disc <= 0.0:
        sup0, sup1 = 0.0, 0.0
    else:
        root = np.sqrt(disc)
        sup0 = (-b - root) / m2
        sup1 = (-b + root) / m2
    return LineIntegralCoeffs(
        kind=kind, a=a, b=b, m2=m2, g=0.0, t_c=t_c,
        k1=1.0 - a / EPAN_SUPPORT_D,
        k2=-b / EPAN_SUPPORT_D,
        k3=-m2 / (3.0 * EPAN_SUPPORT_D),
        k_norm=EPAN_NORM / det_sqrt,
        sup0=float(sup0), sup1=float(sup1),
    )


def optical_depth(kind: KernelKind, frame: PrimitiveFrame, sigma: float,
                  ray: Ray, t0: float, t1: float) -> float:
    """tau of one primitive over the ray interval [t0, t1]."""
    if t0 > t1:
        raise ContractViolationError(f"t0 {t0} > t1 {t1}")
    if sigma < 0.0:
        raise InvalidParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return 0.0
    coeffs = line_integral_coeffs(kind, frame, ray)
    return sigma * coeffs.depth_unit(t0, t1)


def invert_optical_depth_gaussian(coeffs: LineIntegralCoeffs, sigma: float, t0: float,
                                  beta: float, xi: float, t1: float | None = None,
                                  want_info: bool = False):
    """Solve tau(t0, t) = log(beta / (1 - xi)) for t on a single-Gaussian segment.

    beta is the transmittance accumulated before t0, so 1 - xi = beta *
    exp(-tau) defines the target depth.  t1, when given, bounds the segment
    and is used both for the capacity check and as the bisection bracket.
    Raises TargetDepthError when the target exceeds what the segment holds.
    """
    if coeffs.kind is not KernelKind.GAUSSIAN:
        raise InvalidParameterError("inversion coefficients must be Gaussian")
    if not (0.0 < xi < 1.0):
        raise InvalidParameterError(f"xi must lie in (0,1), got {xi}")
    target = np.log(beta) - np.log1p(-xi)
    if target <= 0.0:
        return (t0, False) if want_info else t0
    amp = sigma * coeffs.g
    if amp <= 0.0:
        raise TargetDepthError("segment holds zero optical depth")
    m = coeffs.m
    q0 = m * (t0 - coeffs.t_c) / _SQRT2
    # Right end of the searchable range: segment end, or where erf saturates.
    t_hi = t1 if t1 is not None else coeffs.t_c + 9.0 / m
    cap = sigma * coeffs.depth_unit(t0, t_hi)
    if target > cap:
        if t1 is not None and target - cap < 1e-9 * max(cap, 1.0):
            return (t1, False) if want_info else t1
        raise TargetDepthError(f"target depth {target} exceeds segment capacity {cap}")

    y_target = float(special.erf(q0)) + target / amp
    used_bisection = False
    if abs(y_target) > ERFINV_STABLE:
        t = _bisect_depth(coeffs, sigma, t0, t_hi, target)
        used_bisection = True
    else:
        q, _ = erfinv_stable(y_target)
        t = coeffs.t_c + _SQRT2 * q / m
        t = min(max(t, t0), t_hi)
        # Newton polish on f(t) = sigma*depth(t0,t) - target; f' = sigma*K(t).
        for _ in range(2):
            f = sigma * coeffs.depth_unit(t0, t) - target
            if abs(f) < 1e-9:
                break
            deriv = sigma * coeffs.density(t)
            if deriv <= 0.0:
                break
            t = min(max(t - f / deriv, t0), t_hi)
        if abs(sigma * coeffs.depth_unit(t0, t) - target) > 1e-7:
            t = _bisect_depth(coeffs, sigma, t0, t_hi, target)
            used_bisection = True
    return (t, used_bisection) if want_info else t


def _bisect_depth(coeffs: LineIntegralCoeffs, sigma: float, lo: float, hi: float,
                  target: float) -> float:
    """Bisection on the monotone map t -> sigma*depth(lo, t)."""
    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        if sigma * coeffs.depth_unit(lo, mid) < target:
            a = mid
        else:
            b = mid
        if b - a < 1e-14 * max(1.0, abs(b)):
            break
    return 0.5 * (a + b)
