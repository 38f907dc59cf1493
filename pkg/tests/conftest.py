"""Shared helpers: random scene generation and brute-force oracles."""

import numpy as np
import pytest

from volprim.geometry import PrimitiveFrame, Ray, make_ray, ray_ellipsoid_intersect
from volprim.kernels import KernelKind
from volprim.medium import Mixture, Primitive


def random_frame(rng, center_scale=1.0, scale_range=(0.2, 1.5)):
    mean = rng.uniform(-center_scale, center_scale, 3)
    euler = rng.uniform(-np.pi, np.pi, 3)
    scale = rng.uniform(*scale_range, 3)
    return PrimitiveFrame(mean, euler, scale)


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_ray(rng, center_scale=1.0, spread=3.0):
    origin = rng.uniform(-spread, spread, 3)
    target = rng.uniform(-center_scale, center_scale, 3)
    d = target - origin
    n = np.linalg.norm(d)
    if n < 1e-9:
        d = np.array([1.0, 0.0, 0.0])
        n = 1.0
    return make_ray(origin, d / n)


def random_primitive(rng, kind, center_scale=1.0, scale_range=(0.2, 1.2),
                     sigma_range=(0.1, 3.0), albedo=None):
    alb = rng.uniform(0.0, 1.0, 3) if albedo is None else np.asarray(albedo, float)
    return Primitive(
        frame=random_frame(rng, center_scale, scale_range),
        kind=kind,
        sigma=float(rng.uniform(*sigma_range)),
        albedo=alb,
        phase_g=float(rng.uniform(-0.8, 0.8)),
    )


def random_mixture(rng, n, kind, **kw):
    return Mixture([random_primitive(rng, kind, **kw) for _ in range(n)])


def brute_force_intervals(mixture, ray):
    """Entry-sorted (pid, t0, t1) by direct per-primitive intersection."""
    out = []
    for pid, p in enumerate(mixture):
        hit = ray_ellipsoid_intersect(ray, p.frame, p.support)
        if hit is not None:
            out.append((pid, hit[0], hit[1]))
    out.sort(key=lambda e: (e[1], e[0]))
    return out


def brute_force_segments(mixture, ray):
    """Sorted-event sweep decomposition, independent of the tracer.

    Events are the clipped shell endpoints; between consecutive distinct
    event positions the active set is constant.  Exits sort before entries
    at equal t.  Returns [(t0, t1, frozenset(active))] with positive length
    and non-empty active sets only.
    """
    events = []
    for pid, t0, t1 in brute_force_intervals(mixture, ray):
        lo = max(t0, ray.t_min)
        hi = min(t1, ray.t_max)
        if hi <= lo:
            continue
        events.append((lo, 1, pid))   # entry
        events.append((hi, 0, pid))   # exit; 0 < 1 sorts exits first on ties
    events.sort()
    segs = []
    active = set()
    cursor = None
    for t, typ, pid in events:
        if active and cursor is not None and t > cursor:
            segs.append((cursor, t, frozenset(active)))
        if typ == 1:
            active.add(pid)
        else:
            active.discard(pid)
        cursor = t
    return segs


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
