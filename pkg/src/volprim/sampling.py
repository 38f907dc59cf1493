"""Free-flight distance sampling with pdf proportional to sigma_t * T.

The target optical depth is -log(1 - xi).  Segments are walked front to
back until the accumulated depth brackets the target, then the exact
position is recovered inside that segment: analytically for a single
Gaussian, by Newton-Raphson for Epanechnikov (its depth is a cubic), by
bisection otherwise.  BiasedUniform skips the in-segment inversion and
places t uniformly inside the chosen segment; its returned weight is the
as-if pdf sigma_t * T, which lets path throughput cancel transmittance at
the price of a small, acceptance-tested bias.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidParameterError
from .kernels import KernelKind, invert_optical_depth_gaussian
from .tracing import Segment, trace_segments

SOLVE_TOL = 1e-7
NEWTON_MAX_ITERS = 8


class SamplingMode(enum.Enum):
    ANALYTIC_INVERT = "invert"
    NEWTON = "newton"
    BISECTION = "bisection"
    BIASED_UNIFORM = "uniform"


@dataclass(frozen=True)
class MediumEvent:
    """Scatter at t with its pdf (or as-if weight), or escape carrying T."""

    is_scatter: bool
    t: float = 0.0
    position: np.ndarray | None = None
    pdf_or_weight: float = 0.0
    transmittance: float = 1.0
    mode: SamplingMode | None = None

    @staticmethod
    def escape(transmittance: float) -> "MediumEvent":
        return MediumEvent(is_scatter=False, transmittance=float(transmittance))

    @staticmethod
    def scatter(t, position, pdf_or_weight, mode, transmittance=1.0) -> "MediumEvent":
        return MediumEvent(True, float(t), np.asarray(position, dtype=np.float64),
                           float(pdf_or_weight), float(transmittance), mode)


def _bisect(f, lo, hi, f_lo_sign=-1.0):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    return 0.5 * (lo + hi)


def solve_segment(segment: Segment, target_depth: float, solver: SamplingMode) -> float:
    """t inside the segment with depth_to(t) = target_depth, residual < 1e-7.

    Newton starts from the midpoint with the closed-form density as the
    derivative, keeps a bracket, and falls back to bisection steps whenever
    an iterate would leave it or the derivative vanishes.
    """
    total = segment.depth
    if not (-1e-12 <= target_depth <= total * (1.0 + 1e-9) + 1e-12):
        raise ContractViolationError(
            f"target depth {target_depth} outside segment capacity {total}")
    if target_depth <= 0.0:
        return segment.t0
    target_depth = min(target_depth, total)
    t0, t1 = segment.t0, segment.t1

    def f(t):
        return segment.depth_to(t) - target_depth

    if solver is SamplingMode.BISECTION:
        return _bisect(f, t0, t1)
    if solver is not SamplingMode.NEWTON:
        raise InvalidParameterError(f"solver must be Newton or Bisection, got {solver}")

    lo, hi = t0, t1
    t = 0.5 * (t0 + t1)
    for _ in range(NEWTON_MAX_ITERS):
        val = f(t)
        if abs(val) < SOLVE_TOL:
            return t
        if val < 0.0:
            lo = t
        else:
            hi = t
        deriv = segment.density(t)
        if deriv > 0.0:
            t_next = t - val / deriv
        else:
            t_next = 0.5 * (lo + hi)
        if not lo < t_next < hi:
            t_next = 0.5 * (lo + hi)
        t = t_next
    if abs(f(t)) >= SOLVE_TOL:
        t = _bisect(f, lo, hi)
    return t


def _solve_in_segment(seg: Segment, target_local: float, depth_before: float,
                      xi: float, mode: SamplingMode, kind: KernelKind):
    """Dispatch to the right solver for one bracketing segment."""
    if mode is SamplingMode.BIASED_UNIFORM:
        u = target_local / seg.depth
        return seg.t0 + u * seg.length
    if mode is SamplingMode.NEWTON:
        return solve_segment(seg, target_local, SamplingMode.NEWTON)
    if mode is SamplingMode.BISECTION:
        return solve_segment(seg, target_local, SamplingMode.BISECTION)
    # AnalyticInvert: per-kernel preferred solver.  A lone Gaussian inverts
    # through erfinv with beta the transmittance accumulated before the
    # segment; multi-Gaussian overlaps bisect, Epanechnikov always Newtons.
    if kind is KernelKind.EPANECHNIKOV:
        return solve_segment(seg, target_local, SamplingMode.NEWTON)
    if len(seg.active) == 1:
        pid = seg.active[0]
        return invert_optical_depth_gaussian(
            seg.coeffs[pid], seg.sigmas[pid], seg.t0,
            beta=float(np.exp(-depth_before)), xi=xi, t1=seg.t1)
    return solve_segment(seg, target_local, SamplingMode.BISECTION)


def sample_distance(bvh, mixture, ray, xi: float, mode: SamplingMode) -> MediumEvent:
    """Draw a free-flight distance along the ray; escape is a normal outcome."""
    if not (0.0 < xi < 1.0):
        raise InvalidParameterError(f"xi must lie in (0,1), got {xi}")
    target = -float(np.log1p(-xi))
    found = {}

    def visitor(seg: Segment, state):
        depth_before = -state.log_t
        if seg.depth <= 0.0 or depth_before + seg.depth < target:
            return True
        target_local = min(target - depth_before, seg.depth)
        t = _solve_in_segment(seg, target_local, depth_before, xi, mode, mixture.kind)
        found["t"] = t
        found["seg"] = seg
        found["depth_before"] = depth_before
        return False

    final = trace_segments(bvh, mixture, ray, visitor)
    if "t" not in found:
        return MediumEvent.escape(np.exp(final.log_t))
    t = found["t"]
    seg = found["seg"]
    sigma_t = seg.density(t)
    if mode is SamplingMode.BIASED_UNIFORM:
        trans = np.exp(-(found["depth_before"] + seg.depth_to(t)))
    else:
        trans = 1.0 - xi  # depth at t equals the target by construction
    return MediumEvent.scatter(t, ray.at(t), sigma_t * trans, mode, trans)
