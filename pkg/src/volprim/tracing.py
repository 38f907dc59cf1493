"""Segment decomposition of a ray through the mixture, and closed-form T.

A ray is split at shell entry/exit events into disjoint, sorted segments;
inside one segment the set of overlapping primitives is constant, so the
segment's optical depth is the sum of per-primitive closed forms.
Transmittance accumulates recursively, T_k = T_{k-1} * exp(-depth_k), and
the total does not depend on how overlaps split the ray.  Gaps with no
active primitive are skipped with T unchanged.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .accel import Bvh, next_shell_event
from .errors import InvalidParameterError, TruncatedTraceError
from .geometry import Ray, make_ray
from .kernels import LineIntegralCoeffs, line_integral_coeffs
from .medium import Mixture

TIE_EPS = 1e-9  # exit/entry events closer than this are treated as coincident
DEFAULT_MAX_EVENTS = 512
DEFAULT_MAX_ACTIVE = 32


@dataclass
class Segment:
    """One constant-active-set interval; coeffs are cached per primitive."""

    t0: float
    t1: float
    active: tuple
    coeffs: dict    # pid -> LineIntegralCoeffs, valid for the whole ray
    depth: float    # sigma-weighted optical depth of this segment
    sigmas: list    # per-pid cross-sections, shared across segments

    @property
    def length(self):
        return self.t1 - self.t0

    def depth_to(self, t: float) -> float:
        """Optical depth accumulated from t0 to t inside this segment."""
        return sum(self.sigmas[pid] * self.coeffs[pid].depth_unit(self.t0, t)
                   for pid in self.active)

    def density(self, t: float) -> float:
        """sigma_t at parameter t restricted to this segment's active set."""
        return sum(self.sigmas[pid] * self.coeffs[pid].density(t)
                   for pid in self.active)


@dataclass
class TransmittanceState:
    log_t: float = 0.0
    segment_index: int = 0

    @property
    def transmittance(self):
        return float(np.exp(self.log_t))


def trace_segments(bvh: Bvh, mixture: Mixture, ray: Ray, visitor=None,
                   max_events: int = DEFAULT_MAX_EVENTS,
                   max_active: int = DEFAULT_MAX_ACTIVE) -> TransmittanceState:
    """Walk the ray's segments in increasing t, invoking visitor on each.

    The visitor receives (segment, state) with state holding the
    transmittance accumulated BEFORE the segment (T_{k-1}) and the segment's
    index k; returning False stops the trace early.  The returned state
    holds the final log transmittance over [t_min, t_max].

    Events are shell entries; exits are derived from the cached analytic
    intervals.  When an exit and an entry coincide within 1e-9 the exit is
    processed first and the degenerate segment between them is skipped.
    Exhausting max_events or max_active raises a truncated-trace error
    carrying the partial state.
    """
    if max_events < 1:
        raise InvalidParameterError(f"max_events must be >= 1, got {max_events}")
    state = TransmittanceState(0.0, 0)
    if len(mixture) == 0:
        return state
    sigmas = [p.sigma for p in mixture]
    kind = mixture.kind

    cursor = ray.t_min
    seen = set()
    active = {}  # pid -> t_exit
    coeffs_cache = {}  # pid -> LineIntegralCoeffs
    exit_heap = []
    events_used = 0
    pending = None  # next unprocessed entry event (pid, t0, t1)

    def consume_feed():
        # Globally smallest unseen entry; exclusion makes progress explicit
        # and keeps coincident entry parameters well ordered.
        return next_shell_event(bvh, ray, -np.inf, frozenset(seen))

    def enter(pid, t1):
        nonlocal events_used
        seen.add(pid)
        events_used += 1
        if events_used > max_events:
            raise TruncatedTraceError(
                f"event budget {max_events} exhausted", state=state)
        if t1 <= cursor:
            return
        coeffs_cache[pid] = line_integral_coeffs(kind, mixture[pid].frame, ray)
        active[pid] = t1
        heapq.heappush(exit_heap, (t1, pid))
        if len(active) > max_active:
            raise TruncatedTraceError(
                f"active-set capacity {max_active} exceeded", state=state)

    # Initialization: shells whose interval straddles t_min become active
    # immediately; the first strictly later entry stays pending.
    while True:
        ev = consume_feed()
        if ev is None:
            break
        pid, t0, t1 = ev
        if t0 > ray.t_min:
            pending = ev
            break
        enter(pid, t1)

    def emit(t_end):
        nonlocal cursor
        if not active or t_end <= cursor:
            cursor = max(cursor, t_end)
            return True
        ids = tuple(sorted(active))
        depth = 0.0
        for pid in ids:
            depth += sigmas[pid] * coeffs_cache[pid].depth_unit(cursor, t_end)
        seg = Segment(cursor, t_end, ids, coeffs_cache, depth, sigmas)
        keep_going = True
        if visitor is not None:
            keep_going = visitor(seg, state) is not False
        state.log_t -= depth
        state.segment_index += 1
        cursor = t_end
        return keep_going

    while active or pending is not None:
        exit_t = exit_heap[0][0] if exit_heap else np.inf
        entry_t = pending[1] if pending is not None else np.inf
        next_t = min(exit_t, entry_t)
        if next_t >= ray.t_max:
            emit(ray.t_max)
            break
        if exit_t <= entry_t + TIE_EPS:
            if not emit(exit_t):
                return state
            t_exit, pid = heapq.heappop(exit_heap)
            active.pop(pid, None)
        else:
            if not emit(entry_t):
                return state
            pid, t0, t1 = pending
            enter(pid, t1)
            pending = consume_feed()
    return state


def transmittance(bvh, mixture: Mixture, x_a, x_b) -> float:
    """Deterministic closed-form T between two points.

    Equals exp(-sum over segments of active optical depths); the per-segment
    sums collapse to one whole-interval integral per overlapped primitive,
    which is what is evaluated here.
    """
    if mixture is None or len(mixture) == 0:
        return 1.0
    a = np.asarray(x_a, dtype=np.float64)
    b = np.asarray(x_b, dtype=np.float64)
    dist = float(np.linalg.norm(b - a))
    if dist == 0.0:
        return 1.0
    ray = make_ray(a, b - a, 0.0, dist)
    total = 0.0
    for pid, t0, t1 in bvh.all_intervals(ray):
        lo = max(t0, 0.0)
        hi = min(t1, dist)
        if hi <= lo:
            continue
        c = line_integral_coeffs(mixture.kind, mixture[pid].frame, ray)
        total += mixture[pid].sigma * c.depth_unit(lo, hi)
    return float(np.exp(-total))


def ray_transmittance(bvh, mixture: Mixture, ray: Ray) -> float:
    """Closed-form T over the ray's own [t_min, t_max] range."""
    if mixture is None or len(mixture) == 0:
        return 1.0
    total = 0.0
    for pid, t0, t1 in bvh.all_intervals(ray):
        lo = max(t0, ray.t_min)
        hi = min(t1, ray.t_max)
        if hi <= lo:
            continue
        c = line_integral_coeffs(mixture.kind, mixture[pid].frame, ray)
        total += mixture[pid].sigma * c.depth_unit(lo, hi)
    return float(np.exp(-total))
