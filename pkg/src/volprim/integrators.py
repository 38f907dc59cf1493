"""Forward renderers: analytic transmittance, path tracing, radiance field.

Three integrators share the closed-form chord machinery in batch:

* render_transmittance: purely absorbing medium, pixel = env * T along the
  primary ray.  No randomness at all, so any two runs are bit-identical.
* render_vppt: volumetric path tracing.  The default estimator splits every
  vertex into an analytic escape term (env * throughput * T_to_infinity,
  the next-event contribution for a constant environment along the current
  direction) plus a conditional scatter branch: throughput picks up the
  scatter probability (1 - T) and the local albedo, and the free-flight
  distance is drawn from the conditional pdf sigma_t T / (1 - T).  Setting
  nee off gives the plain analog walk (stochastic escape).  With albedo 0
  the default estimator is fully deterministic and reduces to the
  transmittance renderer on the same rays.
* render_vprf: front-to-back compositing of emitted radiance per overlap
  segment: each segment adds (1 - T_seg) times the depth-weighted average
  of the member primitives' SH radiance, attenuated by the transmittance
  accumulated so far.

All pixel randomness comes from the counter RNG keyed by (seed, dimension,
flat pixel id, sample id), so results do not depend on how the image is
tiled across workers.  Waves are aligned to whole pixels (or fixed-size
sample chunks of a single pixel), which keeps per-pixel float accumulation
order fixed as well.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .batch import (MixtureArrays, albedo_many, clipped_depths, eval_sh_many,
                    line_coeffs, phase_sample_many, sample_distance_table,
                    segment_table, transmittance_many)
from .cameras import Camera, Telecentric
from .errors import InvalidParameterError
from .medium import Mixture
from .rng import uniform_field
from .sampling import SamplingMode
from .sh import eval_sh

_LUMA = np.array([0.2126, 0.7152, 0.0722])
_RR_START = 3

# Counter-RNG dimension map per (pixel, sample) stream.  Bounce b owns a
# block of 8 dims so replay never collides across bounces.
_DIM_JX, _DIM_JY, _DIM_LU, _DIM_LV = 0, 1, 4, 5


def _bounce_dim(b, k):
    return 8 + 8 * b + k


@dataclass(frozen=True)
class Scene:
    """A primitive mixture lit by a constant environment emitter."""

    mixture: Mixture
    env_radiance: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        env = np.asarray(self.env_radiance, dtype=np.float64).reshape(-1)
        if env.shape == (1,):
            env = np.repeat(env, 3)
        if env.shape != (3,):
            raise InvalidParameterError("env_radiance must be scalar or 3-vector")
        if not np.all(np.isfinite(env)) or np.any(env < 0.0):
            raise InvalidParameterError("env_radiance must be finite and >= 0")
        object.__setattr__(self, "env_radiance", env)


@dataclass(frozen=True)
class RenderSettings:
    """Knobs shared by the integrators.

    max_events caps free-flight events per path (VPPT) and processed
    overlap segments per ray (VPRF); max_bounces caps scattering depth.
    rr_threshold is the throughput luminance below which Russian roulette
    engages (after bounce 3); termination is the VPRF early-out
    transmittance.  rr_nee stochastically skips escape contributions with
    the shadow transmittance as survival probability.
    """

    spp: int = 16
    max_bounces: int = 32
    max_events: int = 256
    mode: SamplingMode = SamplingMode.ANALYTIC_INVERT
    nee: bool = True
    rr_threshold: float = 1.0
    rr_nee: bool = False
    termination: float = 1e-5
    fast_vprf: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.spp < 1:
            raise InvalidParameterError("spp must be >= 1")
        if self.max_bounces < 0:
            raise InvalidParameterError("max_bounces must be >= 0")
        if self.max_events < 1:
            raise InvalidParameterError("max_events must be >= 1")
        if not 0.0 <= self.termination < 1.0:
            raise InvalidParameterError("termination must be in [0, 1)")
        if self.rr_threshold < 0.0:
            raise InvalidParameterError("rr_threshold must be >= 0")


def thread_count():
    """Worker count: VOLPRIM_THREADS if set, else capped cpu count."""
    raw = os.environ.get("VOLPRIM_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise InvalidParameterError(f"VOLPRIM_THREADS is not an integer: {raw!r}")
        return max(1, n)
    return min(os.cpu_count() or 1, 8)


def _run_tiled(height, fn):
    # Row bands; each worker writes a disjoint slice of the output.
    nt = min(thread_count(), height)
    if nt <= 1:
        fn(0, height)
        return
    edges = np.linspace(0, height, nt + 1).astype(int)
    with ThreadPoolExecutor(max_workers=nt) as ex:
        futs = [ex.submit(fn, int(a), int(b))
                for a, b in zip(edges[:-1], edges[1:]) if b > a]
        for f in futs:
            f.result()


def _wave_iter(p_start, p_end, spp, n_prims):
    """Yield (p0, p1, s0, s1) waves aligned to whole pixels.

    The pair-matrix budget scales with n^2 because the segment table is
    (R, 2N, N).  When one pixel's spp exceeds the budget its samples are
    chunked at a fixed size, so the grouping (hence float summation order)
    never depends on the tiling.
    """
    budget = max(1, int(2e6 // max(1, n_prims * n_prims)))
    if spp <= budget:
        pb = max(1, budget // spp)
        for p0 in range(p_start, p_end, pb):
            yield p0, min(p0 + pb, p_end), 0, spp
    else:
        for p in range(p_start, p_end):
            for s0 in range(0, spp, budget):
                yield p, p + 1, s0, min(s0 + budget, spp)


def _camera_rays(camera, px, py, jx, jy, lens_u=None, lens_v=None):
    if isinstance(camera, Telecentric):
        return camera.rays(px, py, jx, jy, lens_u, lens_v)
    return camera.rays(px, py, jx, jy)


# ---------------------------------------------------------------------------
# Transmittance renderer


def render_transmittance(scene: Scene, camera: Camera, settings=None):
    """Pure-absorption image: pixel = env * T(primary ray).

    Deterministic by construction; spp is ignored (rays go through pixel
    centers, thin-lens cameras average a fixed 4x4 lens grid).
    """
    arr = MixtureArrays(scene.mixture)
    h, w = camera.height, camera.width
    out = np.empty((h, w, 3))
    env = scene.env_radiance

    lens = isinstance(camera, Telecentric) and camera.aperture_radius > 0.0
    chunk = max(256, int(5e5 // max(1, arr.n)))

    def band(r0, r1):
        ys, xs = np.mgrid[r0:r1, 0:w]
        px = xs.ravel().astype(np.float64)
        py = ys.ravel().astype(np.float64)
        trans = np.zeros(px.shape[0])
        for c0 in range(0, px.shape[0], chunk):
            c1 = min(c0 + chunk, px.shape[0])
            sl = slice(c0, c1)
            if lens:
                acc = np.zeros(c1 - c0)
                for i in range(4):
                    for j in range(4):
                        lu = np.full(c1 - c0, (i + 0.5) / 4.0)
                        lv = np.full(c1 - c0, (j + 0.5) / 4.0)
                        o, d = camera.rays(px[sl], py[sl], 0.5, 0.5, lu, lv)
                        acc += transmittance_many(arr, o, d)
                trans[sl] = acc / 16.0
            else:
                o, d = _camera_rays(camera, px[sl], py[sl], 0.5, 0.5)
                trans[sl] = transmittance_many(arr, o, d)
        out[r0:r1] = (trans[:, None] * env[None, :]).reshape(r1 - r0, w, 3)

    _run_tiled(h, band)
    return out


# ---------------------------------------------------------------------------
# Volumetric path tracer


def vppt_radiance(scene: Scene, origins, dirs, pixel_ids, sample_ids, settings):
    """Per-ray VPPT estimates; RNG is keyed by (pixel_ids, sample_ids).

    This is the wavefront core of render_vppt, exposed so tests and the
    adjoint replay can drive explicit rays.
    """
    arr = MixtureArrays(scene.mixture)
    env = scene.env_radiance
    o = np.array(np.atleast_2d(origins), dtype=np.float64)
    d = np.array(np.atleast_2d(dirs), dtype=np.float64)
    r = o.shape[0]
    pid = np.broadcast_to(np.asarray(pixel_ids, dtype=np.uint64), (r,))
    smp = np.broadcast_to(np.asarray(sample_ids, dtype=np.uint64), (r,))
    st = settings
    biased = st.mode is SamplingMode.BIASED_UNIFORM

    L = np.zeros((r, 3))
    beta = np.ones((r, 3))
    alive = np.ones(r, dtype=bool)
    n_steps = min(st.max_bounces + 1, st.max_events)

    if arr.n == 0:
        # Vacuum: every path escapes immediately.
        return np.tile(env, (r, 1))

    for b in range(n_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        cf = line_coeffs(arr, o[idx], d[idx])
        xi = uniform_field(st.seed, _bounce_dim(b, 0), pid[idx], smp[idx])
        last = b == n_steps - 1
        if st.nee:
            res = sample_distance_table(arr, cf, xi, conditional=True, uniform=biased)
            t_tot = np.exp(-res["total"])
            if st.rr_nee:
                u = uniform_field(st.seed, _bounce_dim(b, 4), pid[idx], smp[idx])
                contrib = np.where((u < t_tot)[:, None], beta[idx] * env[None, :], 0.0)
            else:
                contrib = beta[idx] * env[None, :] * t_tot[:, None]
            L[idx] += contrib
            if last:
                break
            p_scatter = -np.expm1(-res["total"])
            x = o[idx] + res["t"][:, None] * d[idx]
            nb = beta[idx] * p_scatter[:, None] * albedo_many(arr, x)
            cont = ~res["escape"] & (nb @ _LUMA > 0.0)
        else:
            res = sample_distance_table(arr, cf, xi, uniform=biased)
            esc = res["escape"]
            L[idx[esc]] += beta[idx[esc]] * env[None, :]
            alive[idx[esc]] = False
            if last:
                alive[idx] = False
                break
            x = o[idx] + res["t"][:, None] * d[idx]
            # Biased-uniform convention: the sample weight stands in for
            # the exact pdf, so the transmittance factors cancel here too.
            nb = beta[idx] * albedo_many(arr, x)
            cont = ~esc & (nb @ _LUMA > 0.0)

        alive[idx[~cont]] = False
        sub = idx[cont]
        if sub.size == 0:
            continue
        u1 = uniform_field(st.seed, _bounce_dim(b, 1), pid[sub], smp[sub])
        u2 = uniform_field(st.seed, _bounce_dim(b, 2), pid[sub], smp[sub])
        d[sub] = phase_sample_many(arr, x[cont], d[sub], u1, u2)
        o[sub] = x[cont]
        beta[sub] = nb[cont]

        if b >= _RR_START:
            lum = beta[sub] @ _LUMA
            gamble = lum < st.rr_threshold
            survival = np.minimum(1.0, lum)
            u = uniform_field(st.seed, _bounce_dim(b, 3), pid[sub], smp[sub])
            kill = gamble & (u >= survival)
            boost = gamble & ~kill
            alive[sub[kill]] = False
            beta[sub[boost]] /= survival[boost][:, None]
    return L


def _accumulate_mc(scene, camera, settings, kernel, want_sq):
    """Tile/wave driver shared by the MC integrators.

    kernel(o, d, pid, smp) -> (W, 3) per-sample radiance.
    """
    h, w = camera.height, camera.width
    spp = settings.spp
    arr_n = len(scene.mixture)
    acc = np.zeros((h * w, 3))
    acc_sq = np.zeros((h * w, 3)) if want_sq else None
    lens = isinstance(camera, Telecentric) and camera.aperture_radius > 0.0

    def band(r0, r1):
        for p0, p1, s0, s1 in _wave_iter(r0 * w, r1 * w, spp, arr_n):
            pid = np.repeat(np.arange(p0, p1, dtype=np.uint64), s1 - s0)
            smp = np.tile(np.arange(s0, s1, dtype=np.uint64), p1 - p0)
            px = (pid % w).astype(np.float64)
            py = (pid // w).astype(np.float64)
            jx = uniform_field(settings.seed, _DIM_JX, pid, smp)
            jy = uniform_field(settings.seed, _DIM_JY, pid, smp)
            if lens:
                lu = uniform_field(settings.seed, _DIM_LU, pid, smp)
                lv = uniform_field(settings.seed, _DIM_LV, pid, smp)
                o, d = camera.rays(px, py, jx, jy, lu, lv)
            else:
                o, d = _camera_rays(camera, px, py, jx, jy)
            vals = kernel(o, d, pid, smp)
            loc = (pid - p0).astype(np.intp)
            nloc = p1 - p0
            for c in range(3):
                acc[p0:p1, c] += np.bincount(loc, weights=vals[:, c], minlength=nloc)
                if want_sq:
                    acc_sq[p0:p1, c] += np.bincount(
                        loc, weights=vals[:, c] ** 2, minlength=nloc)

    _run_tiled(h, band)
    mean = (acc / spp).reshape(h, w, 3)
    if not want_sq:
        return mean, None
    if spp > 1:
        var = (acc_sq / spp).reshape(h, w, 3) - mean ** 2
        var = np.maximum(var, 0.0) * spp / (spp - 1) / spp
    else:
        var = np.zeros_like(mean)
    return mean, var


def render_vppt(scene: Scene, camera: Camera, settings: RenderSettings):
    """Monte Carlo path-traced image, mean over spp jittered samples."""

    def kernel(o, d, pid, smp):
        return vppt_radiance(scene, o, d, pid, smp, settings)

    img, _ = _accumulate_mc(scene, camera, settings, kernel, want_sq=False)
    return img


def render_vppt_moments(scene: Scene, camera: Camera, settings: RenderSettings):
    """(mean, variance-of-mean) per pixel and channel, for CI comparisons."""

    def kernel(o, d, pid, smp):
        return vppt_radiance(scene, o, d, pid, smp, settings)

    return _accumulate_mc(scene, camera, settings, kernel, want_sq=True)


# ---------------------------------------------------------------------------
# Radiance-field integrator


def trace_segments(mixture: Mixture, origin, direction):
    """Ordered overlap segments of one ray: list of (t0, t1, member ids).

    Segments start at t=0 (chords behind the origin are clipped) and are
    returned in strictly increasing order; gaps with no members are
    omitted.
    """
    arr = MixtureArrays(mixture)
    if arr.n == 0:
        return []
    origin = np.asarray(origin, dtype=np.float64)[None, :]
    direction = np.asarray(direction, dtype=np.float64)[None, :]
    cf = line_coeffs(arr, origin, direction)
    lo = np.maximum(cf["t0"][0], 0.0)
    hi = cf["t1"][0]
    valid = cf["hit"][0] & (hi > lo)
    if not valid.any():
        return []
    events = np.unique(np.concatenate([lo[valid], hi[valid]]))
    out = []
    for e0, e1 in zip(events[:-1], events[1:]):
        members = np.flatnonzero(valid & (lo <= e0 + 1e-14) & (hi >= e1 - 1e-14))
        if members.size:
            out.append((float(e0), float(e1), tuple(int(i) for i in members)))
    return out


def vprf_radiance(scene: Scene, origins, dirs, settings: RenderSettings):
    """Per-ray radiance-field accumulation (the core of render_vprf)."""
    arr = MixtureArrays(scene.mixture)
    env = scene.env_radiance
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    r = o.shape[0]
    if arr.n == 0:
        return np.tile(env, (r, 1))
    cf = line_coeffs(arr, o, d)
    # Negative SH lobes are clamped before compositing; images stay >= 0.
    emit = np.maximum(eval_sh_many(arr, d), 0.0)
    L = np.zeros((r, 3))
    t_run = np.ones(r)
    active = np.ones(r, dtype=bool)
    seg_count = np.zeros(r, dtype=np.intp)

    if settings.fast_vprf:
        # One pseudo-segment per primitive, processed in entry order with
        # its full clipped-chord depth; co-residency is ignored.
        tau_full = clipped_depths(arr, cf, 0.0, np.inf)
        entry = np.where((tau_full > 0.0), np.maximum(cf["t0"], 0.0), np.inf)
        order = np.argsort(entry, axis=1)
        ar = np.arange(r)
        for j in range(arr.n):
            pi = order[:, j]
            tau = tau_full[ar, pi]
            ok = active & np.isfinite(entry[ar, pi]) & (tau > 0.0)
            if not ok.any():
                continue
            t_seg = np.exp(-tau)
            add = (1.0 - t_seg)[:, None] * emit[ar, pi]
            L[ok] += t_run[ok, None] * add[ok]
            t_run = np.where(ok, t_run * t_seg, t_run)
            seg_count += ok
            active &= (t_run >= settings.termination) & (seg_count < settings.max_events)
    else:
        bounds, _, _ = segment_table(arr, cf)
        for k in range(bounds.shape[1] - 1):
            lo = bounds[:, k]
            hi = bounds[:, k + 1]
            fin = np.isfinite(hi)
            if not (active & fin).any():
                break
            tau = clipped_depths(arr, cf, lo[:, None], hi[:, None])
            s_tau = tau.sum(axis=1)
            ok = active & fin & (hi > lo) & (s_tau > 0.0)
            if not ok.any():
                continue
            t_seg = np.exp(-s_tau)
            wts = tau / np.maximum(s_tau, 1e-300)[:, None]
            add = (1.0 - t_seg)[:, None] * np.einsum("rn,rnc->rc", wts, emit)
            L[ok] += t_run[ok, None] * add[ok]
            t_run = np.where(ok, t_run * t_seg, t_run)
            seg_count += ok
            active &= (t_run >= settings.termination) & (seg_count < settings.max_events)
    return L + t_run[:, None] * env[None, :]


def render_vprf(scene: Scene, camera: Camera, settings: RenderSettings):
    """Radiance-field image.  spp == 1 shoots deterministic center rays;
    larger spp jitters subpixels and averages."""
    if settings.spp == 1:
        h, w = camera.height, camera.width
        out = np.empty((h, w, 3))

        def band(r0, r1):
            ys, xs = np.mgrid[r0:r1, 0:w]
            px = xs.ravel().astype(np.float64)
            py = ys.ravel().astype(np.float64)
            chunk = max(64, int(2e6 // max(1, len(scene.mixture) ** 2)))
            for c0 in range(0, px.shape[0], chunk):
                sl = slice(c0, min(c0 + chunk, px.shape[0]))
                o, d = _camera_rays(camera, px[sl], py[sl], 0.5, 0.5)
                vals = vprf_radiance(scene, o, d, settings)
                rows = out[r0:r1].reshape(-1, 3)
                rows[sl] = vals

        _run_tiled(h, band)
        return out

    def kernel(o, d, pid, smp):
        return vprf_radiance(scene, o, d, settings)

    img, _ = _accumulate_mc(scene, camera, settings, kernel, want_sq=False)
    return img


__all__ = [
    "Scene", "RenderSettings", "render_transmittance", "render_vppt",
    "render_vppt_moments", "render_vprf", "vppt_radiance", "vprf_radiance",
    "trace_segments", "eval_sh", "thread_count",
]
