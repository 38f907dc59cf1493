"""Voxel-grid medium with stochastic estimators: the correctness baseline.

The grid stores extinction at voxel centers (float32) with trilinear
interpolation between them; coordinates clamp to the boundary ring inside
the box and the density is 0 outside.  Estimators use a single global
majorant = max voxel * 1.0001, which bounds every interpolated value since
trilinear blending is convex.

The vectorized trackers consume counter-RNG dimensions in fixed strides
(ratio tracking one draw per flight, delta tracking two), and the scalar
versions walk a PathRNG in the same order, so a scalar call with
PathRNG(seed, pid, smp) reproduces row (pid, smp) of the batched call
bit for bit.
"""

from __future__ import annotations

import numpy as np

from .batch import MixtureArrays, _onb, extinction_many, hg_sample_cos_many
from .errors import InvalidParameterError
from .geometry import Ray, ellipsoid_aabb
from .rng import uniform_field
from .sampling import MediumEvent

_TWO_PI = 2.0 * np.pi
_MAX_TRACK_ITERS = 100000


class DensityGrid:
    def __init__(self, data, bbox_min, bbox_max):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 2:
            raise InvalidParameterError("grid needs 3 axes with >= 2 voxels each")
        if not np.all(np.isfinite(data)) or data.min() < 0.0:
            raise InvalidParameterError("grid densities must be finite and >= 0")
        lo = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        hi = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise InvalidParameterError("bbox must have positive extent")
        self.data = data
        self.res = np.array(data.shape, dtype=np.int64)
        self.bbox_min = lo
        self.bbox_max = hi
        self.extent = hi - lo
        self.majorant = float(data.max()) * 1.0001

    def sample_many(self, pts):
        """Trilinear density at world points; 0 outside the box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        inside = np.all((pts >= self.bbox_min) & (pts <= self.bbox_max), axis=1)
        u = (pts - self.bbox_min) / self.extent * self.res - 0.5
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        lo = np.clip(i0, 0, self.res - 1)
        hi = np.clip(i0 + 1, 0, self.res - 1)
        d = self.data
        c = np.zeros(pts.shape[0])
        for dx, wx in ((0, 1.0 - f[:, 0]), (1, f[:, 0])):
            ix = lo[:, 0] if dx == 0 else hi[:, 0]
            for dy, wy in ((0, 1.0 - f[:, 1]), (1, f[:, 1])):
                iy = lo[:, 1] if dy == 0 else hi[:, 1]
                for dz, wz in ((0, 1.0 - f[:, 2]), (1, f[:, 2])):
                    iz = lo[:, 2] if dz == 0 else hi[:, 2]
                    c += wx * wy * wz * d[ix, iy, iz]
        return np.where(inside, c, 0.0)

    def sample(self, pt):
        return float(self.sample_many(np.asarray(pt)[None, :])[0])

    def enter_exit(self, origins, dirs):
        """Slab intersection: (t_enter clamped >= 0, t_exit) per ray."""
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.bbox_min - o) * inv
            tb = (self.bbox_max - o) * inv
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        par = d == 0.0
        if par.any():
            in_ax = (o >= self.bbox_min) & (o <= self.bbox_max)
            lo = np.where(par, np.where(in_ax, -np.inf, np.inf), lo)
            hi = np.where(par, np.where(in_ax, np.inf, -np.inf), hi)
        t0 = np.maximum(lo.max(axis=1), 0.0)
        t1 = hi.min(axis=1)
        return t0, t1


def voxelize(mixture, resolution, bbox=None) -> DensityGrid:
    """Sample mixture extinction at voxel centers of a regular grid."""
    if np.isscalar(resolution):
        res = (int(resolution),) * 3
    else:
        res = tuple(int(v) for v in resolution)
    if len(res) != 3 or min(res) < 2:
        raise InvalidParameterError("resolution must be >= 2 per axis")
    if bbox is None:
        if len(mixture) == 0:
            lo, hi = np.zeros(3), np.ones(3)
        else:
            los, his = [], []
            for p in mixture:
                a, b = ellipsoid_aabb(p.frame, p.support)
                los.append(a)
                his.append(b)
            lo = np.min(los, axis=0)
            hi = np.max(his, axis=0)
    else:
        lo = np.asarray(bbox[0], dtype=np.float64)
        hi = np.asarray(bbox[1], dtype=np.float64)
    arr = MixtureArrays(mixture)
    nx, ny, nz = res
    cell = (hi - lo) / np.array(res)
    xs = lo[0] + (np.arange(nx) + 0.5) * cell[0]
    ys = lo[1] + (np.arange(ny) + 0.5) * cell[1]
    zs = lo[2] + (np.arange(nz) + 0.5) * cell[2]
    data = np.empty(res, dtype=np.float32)
    # Slab along x keeps the point batch bounded regardless of resolution.
    chunk = max(1, int(2e6 // max(1, ny * nz * max(arr.n, 1))))
    for x0 in range(0, nx, chunk):
        x1 = min(x0 + chunk, nx)
        gx, gy, gz = np.meshgrid(xs[x0:x1], ys, zs, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        data[x0:x1] = extinction_many(arr, pts).reshape(x1 - x0, ny, nz)
    return DensityGrid(data, lo, hi)


# ---------------------------------------------------------------------------
# Stochastic estimators, batched


def ratio_track_many(grid, origins, dirs, seed, pixel_ids, sample_ids, dim_base=0):
    """One ratio-tracking transmittance estimate per ray, in [0, 1]."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    r = o.shape[0]
    pid = np.broadcast_to(np.asarray(pixel_ids, dtype=np.uint64), (r,))
    smp = np.broadcast_to(np.asarray(sample_ids, dtype=np.uint64), (r,))
    t0, t1 = grid.enter_exit(o, d)
    w = np.ones(r)
    if grid.majorant <= 0.0:
        return w
    inv_m = 1.0 / grid.majorant
    t = t0.copy()
    alive = t0 < t1
    it = 0
    while alive.any() and it < _MAX_TRACK_ITERS:
        idx = np.flatnonzero(alive)
        xi = uniform_field(seed, dim_base + it, pid[idx], smp[idx])
        t[idx] -= np.log1p(-xi) * inv_m
        out = t[idx] >= t1[idx]
        alive[idx[out]] = False
        stay = idx[~out]
        if stay.size:
            x = o[stay] + t[stay, None] * d[stay]
            dens = grid.sample_many(x)
            w[stay] *= np.maximum(1.0 - dens * inv_m, 0.0)
        it += 1
    return w


def delta_track_many(grid, origins, dirs, seed, pixel_ids, sample_ids, dim_base=0):
    """Delta-tracking free flights: (hit mask, t).  Escapes keep hit False."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    r = o.shape[0]
    pid = np.broadcast_to(np.asarray(pixel_ids, dtype=np.uint64), (r,))
    smp = np.broadcast_to(np.asarray(sample_ids, dtype=np.uint64), (r,))
    t0, t1 = grid.enter_exit(o, d)
    hit = np.zeros(r, dtype=bool)
    t = t0.copy()
    if grid.majorant <= 0.0:
        return hit, t
    inv_m = 1.0 / grid.majorant
    alive = t0 < t1
    it = 0
    while alive.any() and it < _MAX_TRACK_ITERS:
        idx = np.flatnonzero(alive)
        xi = uniform_field(seed, dim_base + 2 * it, pid[idx], smp[idx])
        t[idx] -= np.log1p(-xi) * inv_m
        out = t[idx] >= t1[idx]
        alive[idx[out]] = False
        stay = idx[~out]
        if stay.size:
            x = o[stay] + t[stay, None] * d[stay]
            dens = grid.sample_many(x)
            u = uniform_field(seed, dim_base + 2 * it + 1, pid[stay], smp[stay])
            accept = u < dens * inv_m
            hit[stay[accept]] = True
            alive[stay[accept]] = False
        it += 1
    return hit, t


def raymarch_transmittance_many(grid, origins, dirs, step):
    """Midpoint-rule transmittance along each ray's box chord."""
    if step <= 0.0:
        raise InvalidParameterError("step must be positive")
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t0, t1 = grid.enter_exit(o, d)
    length = np.maximum(t1 - t0, 0.0)
    n = np.maximum(np.ceil(length / step).astype(np.int64), 1)
    h = length / n
    depth = np.zeros(o.shape[0])
    n_max = int(n.max())
    block = max(1, int(4e6 // max(1, o.shape[0])))
    for k0 in range(0, n_max, block):
        k1 = min(k0 + block, n_max)
        ks = np.arange(k0, k1)
        mids = t0[:, None] + (ks[None, :] + 0.5) * h[:, None]
        mask = ks[None, :] < n[:, None]
        pts = o[:, None, :] + mids[..., None] * d[:, None, :]
        vals = grid.sample_many(pts.reshape(-1, 3)).reshape(mids.shape)
        depth += (vals * mask).sum(axis=1) * h
    return np.exp(-depth)


# ---------------------------------------------------------------------------
# Scalar twins


def delta_track_distance(grid, ray: Ray, rng) -> MediumEvent:
    t0, t1 = grid.enter_exit(ray.origin[None, :], ray.direction[None, :])
    t0, t1 = float(t0[0]), float(t1[0])
    if t0 >= t1 or grid.majorant <= 0.0:
        return MediumEvent.escape(1.0)
    # Multiply by the reciprocal exactly as the batched tracker does, so
    # the two stay bit-identical on a shared RNG stream.
    inv_m = 1.0 / grid.majorant
    t = t0
    for _ in range(_MAX_TRACK_ITERS):
        t -= np.log1p(-rng.next_1d()) * inv_m
        if t >= t1:
            return MediumEvent.escape(1.0)
        x = ray.at(t)
        dens = grid.sample(x)
        if rng.next_1d() < dens * inv_m:
            # Pointwise pdf sigma_t * T is not tracked; carry sigma_t.
            return MediumEvent.scatter(t, x, dens, None)
    return MediumEvent.escape(1.0)


def ratio_track_transmittance(grid, ray: Ray, rng) -> float:
    t0, t1 = grid.enter_exit(ray.origin[None, :], ray.direction[None, :])
    t0, t1 = float(t0[0]), float(t1[0])
    if t0 >= t1 or grid.majorant <= 0.0:
        return 1.0
    inv_m = 1.0 / grid.majorant
    w = 1.0
    t = t0
    for _ in range(_MAX_TRACK_ITERS):
        t -= np.log1p(-rng.next_1d()) * inv_m
        if t >= t1:
            return w
        w *= max(1.0 - grid.sample(ray.at(t)) * inv_m, 0.0)
    return w


def raymarch_transmittance(grid, ray: Ray, step) -> float:
    return float(raymarch_transmittance_many(
        grid, ray.origin[None, :], ray.direction[None, :], step)[0])


# ---------------------------------------------------------------------------
# Analog path tracer over the grid (uniform scattering parameters)


def grid_path_radiance(grid, albedo, phase_g, env, origins, dirs,
                       pixel_ids, sample_ids, seed, max_bounces):
    """Delta-tracking analog walk with uniform albedo and HG anisotropy.

    The baseline medium carries extinction only, so albedo and phase are
    global constants here; escape adds env * throughput, matching the
    primitive tracer's analog convention.  Bounce b draws from its own
    counter-RNG block: phase angles at the block base, flights above it.
    """
    env = np.asarray(env, dtype=np.float64).reshape(3)
    albedo = np.asarray(albedo, dtype=np.float64).reshape(-1)
    if albedo.shape == (1,):
        albedo = np.repeat(albedo, 3)
    o = np.array(np.atleast_2d(origins), dtype=np.float64)
    d = np.array(np.atleast_2d(dirs), dtype=np.float64)
    r = o.shape[0]
    pid = np.broadcast_to(np.asarray(pixel_ids, dtype=np.uint64), (r,)).copy()
    smp = np.broadcast_to(np.asarray(sample_ids, dtype=np.uint64), (r,)).copy()
    L = np.zeros((r, 3))
    beta = np.ones((r, 3))
    alive = np.ones(r, dtype=bool)
    for b in range(max_bounces + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        base = 16 + 4096 * b
        hit, t = delta_track_many(grid, o[idx], d[idx], seed, pid[idx], smp[idx],
                                  dim_base=base + 16)
        esc = ~hit
        L[idx[esc]] += beta[idx[esc]] * env[None, :]
        alive[idx[esc]] = False
        if b == max_bounces:
            alive[idx] = False
            break
        stay = idx[hit]
        if stay.size == 0:
            continue
        x = o[stay] + t[hit][:, None] * d[stay]
        beta[stay] *= albedo[None, :]
        u1 = uniform_field(seed, base + 0, pid[stay], smp[stay])
        u2 = uniform_field(seed, base + 1, pid[stay], smp[stay])
        ct = np.clip(hg_sample_cos_many(np.full(stay.shape[0], phase_g), u1), -1.0, 1.0)
        st = np.sqrt(np.maximum(1.0 - ct * ct, 0.0))
        phi = _TWO_PI * u2
        b1, b2 = _onb(d[stay])
        nd = (st * np.cos(phi))[:, None] * b1 + (st * np.sin(phi))[:, None] * b2 \
            + ct[:, None] * d[stay]
        d[stay] = nd / np.linalg.norm(nd, axis=1, keepdims=True)
        o[stay] = x
    return L
