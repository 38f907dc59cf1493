"""Vectorized mixture math over ray and point batches.

The scalar modules define the contracts; this one re-implements the hot
paths as struct-of-arrays numpy so renders and million-sample statistics
stay affordable. Rays are processed as (R,) batches against all N
primitives at once, so memory is O(R*N); callers chunk R.  Every routine
here is cross-checked against its scalar twin in the tests.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, erfc

from .errors import InvalidParameterError
from .kernels import EPAN_NORM, EPAN_SUPPORT_D, KernelKind, support_radius
from .medium import hg_sample_cos
from .sh import eval_sh_basis_many

_TWO_PI = 2.0 * np.pi
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


class MixtureArrays:
    """Per-primitive parameters flattened into arrays, plus the whitening
    matrices M = S^-1 R^T used by every ray/point query."""

    def __init__(self, mixture):
        n = len(mixture)
        self.n = n
        self.kind = mixture.kind if n else KernelKind.GAUSSIAN
        self.support = support_radius(self.kind) if n else 3.0
        self.k2 = self.support * self.support
        self.means = np.zeros((n, 3))
        self.scales = np.zeros((n, 3))
        self.rots = np.zeros((n, 3, 3))
        self.sigmas = np.zeros(n)
        self.albedos = np.zeros((n, 3))
        self.phase_gs = np.zeros(n)
        sh_len = max((p.sh_coeffs.shape[1] for p in mixture), default=1)
        self.sh = np.zeros((n, 3, sh_len))
        for i, p in enumerate(mixture):
            self.means[i] = p.frame.mean
            self.scales[i] = p.frame.scale
            self.rots[i] = p.frame.rotation
            self.sigmas[i] = p.sigma
            self.albedos[i] = p.albedo
            self.phase_gs[i] = p.phase_g
            self.sh[i, :, : p.sh_coeffs.shape[1]] = p.sh_coeffs
        # M = S^-1 R^T whitens; det_sqrt = prod(scale) = sqrt(det Sigma).
        self.M = self.rots.transpose(0, 2, 1) / self.scales[:, :, None]
        self.det_sqrt = np.prod(self.scales, axis=1) if n else np.zeros(0)
        self.Mc = np.einsum("nij,nj->ni", self.M, self.means) if n else np.zeros((0, 3))
        self.mean_albedo = self.albedos.mean(axis=1)


def line_coeffs(arr: MixtureArrays, origins, dirs):
    """Quadratic coefficients of every (ray, primitive) pair.

    Returns a dict with (R, N) arrays: a, b, m2 describe the whitened
    squared distance d(t) = a + 2 b t + m2 t^2; t0/t1/hit the shell chord.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    y0 = np.einsum("rj,nij->rni", origins, arr.M) - arr.Mc[None, :, :]
    u = np.einsum("rj,nij->rni", dirs, arr.M)
    a = np.einsum("rni,rni->rn", y0, y0)
    b = np.einsum("rni,rni->rn", y0, u)
    m2 = np.einsum("rni,rni->rn", u, u)
    m2 = np.maximum(m2, 1e-300)
    disc = b * b - m2 * (a - arr.k2)
    hit = disc > 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / m2
    t1 = (-b + sq) / m2
    cf = {"a": a, "b": b, "m2": m2, "t0": t0, "t1": t1, "hit": hit}
    if arr.kind is KernelKind.GAUSSIAN:
        h = np.maximum(a - b * b / m2, 0.0)
        m = np.sqrt(m2)
        cf["amp"] = np.exp(-0.5 * h) / (4.0 * np.pi * m * arr.det_sqrt[None, :])
        cf["t_c"] = -b / m2
        cf["m"] = m
    else:
        cf["k1"] = 1.0 - a / EPAN_SUPPORT_D
        cf["kq"] = -b / EPAN_SUPPORT_D
        cf["kc"] = -m2 / (3.0 * EPAN_SUPPORT_D)
        cf["k_norm"] = np.broadcast_to(EPAN_NORM / arr.det_sqrt[None, :], a.shape)
    return cf


def _erf_diff_vec(q0, q1):
    # erfc in same-sign tails avoids 1-1 cancellation, as in the scalar path.
    both_pos = (q0 > 0.0) & (q1 > 0.0)
    both_neg = (q0 < 0.0) & (q1 < 0.0)
    out = erf(q1) - erf(q0)
    if np.any(both_pos):
        out = np.where(both_pos, erfc(q0) - erfc(q1), out)
    if np.any(both_neg):
        out = np.where(both_neg, erfc(-q1) - erfc(-q0), out)
    return out


def unit_depth(arr: MixtureArrays, cf, lo, hi):
    """Per-pair optical depth over [lo, hi] for sigma = 1, no clipping."""
    if arr.kind is KernelKind.GAUSSIAN:
        q0 = cf["m"] * (lo - cf["t_c"]) * _INV_SQRT2
        q1 = cf["m"] * (hi - cf["t_c"]) * _INV_SQRT2
        return cf["amp"] * _erf_diff_vec(q0, q1)
    d1 = hi - lo
    d2 = hi * hi - lo * lo
    d3 = hi * hi * hi - lo * lo * lo
    return cf["k_norm"] * (cf["k1"] * d1 + cf["kq"] * d2 + cf["kc"] * d3)


def clipped_depths(arr, cf, t_min, t_max):
    """(R, N) per-primitive depth with the chord clipped to [t_min, t_max]."""
    lo = np.maximum(cf["t0"], t_min)
    hi = np.minimum(cf["t1"], t_max)
    valid = cf["hit"] & (hi > lo)
    lo = np.where(valid, lo, 0.0)
    hi = np.where(valid, hi, 0.0)
    tau = unit_depth(arr, cf, lo, hi) * arr.sigmas[None, :]
    return np.where(valid, np.maximum(tau, 0.0), 0.0)


def optical_depth_many(arr: MixtureArrays, origins, dirs, t_min=0.0, t_max=np.inf):
    if arr.n == 0:
        r = np.atleast_2d(origins).shape[0]
        return np.zeros(r)
    cf = line_coeffs(arr, origins, dirs)
    return clipped_depths(arr, cf, t_min, t_max).sum(axis=1)


def transmittance_many(arr, origins, dirs, t_min=0.0, t_max=np.inf):
    return np.exp(-optical_depth_many(arr, origins, dirs, t_min, t_max))


def eval_kernel_many(arr: MixtureArrays, pts):
    """(P, N) untruncated kernel values (no sigma)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    y = np.einsum("pj,nij->pni", pts, arr.M) - arr.Mc[None, :, :]
    d = np.einsum("pni,pni->pn", y, y)
    if arr.kind is KernelKind.GAUSSIAN:
        return np.exp(-0.5 * d) / ((_TWO_PI ** 1.5) * arr.det_sqrt[None, :])
    val = (EPAN_NORM / arr.det_sqrt[None, :]) * (1.0 - d / EPAN_SUPPORT_D)
    return np.where(d <= EPAN_SUPPORT_D, np.maximum(val, 0.0), 0.0)


def density_many(arr: MixtureArrays, pts):
    """(P, N) shell-truncated sigma_i K_i contributions."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    y = np.einsum("pj,nij->pni", pts, arr.M) - arr.Mc[None, :, :]
    d = np.einsum("pni,pni->pn", y, y)
    inside = d <= arr.k2
    if arr.kind is KernelKind.GAUSSIAN:
        k = np.exp(-0.5 * d) / ((_TWO_PI ** 1.5) * arr.det_sqrt[None, :])
    else:
        k = (EPAN_NORM / arr.det_sqrt[None, :]) * np.maximum(1.0 - d / EPAN_SUPPORT_D, 0.0)
    return np.where(inside, k * arr.sigmas[None, :], 0.0)


def extinction_many(arr, pts):
    if arr.n == 0:
        return np.zeros(np.atleast_2d(pts).shape[0])
    return density_many(arr, pts).sum(axis=1)


def density_on_ray(arr, cf, t):
    """sigma_t at parameter t of each ray, from the cached pair coefficients."""
    d = cf["a"] + 2.0 * cf["b"] * t[:, None] + cf["m2"] * t[:, None] ** 2
    inside = d <= arr.k2
    if arr.kind is KernelKind.GAUSSIAN:
        k = np.exp(-0.5 * d) / ((_TWO_PI ** 1.5) * arr.det_sqrt[None, :])
    else:
        k = (EPAN_NORM / arr.det_sqrt[None, :]) * np.maximum(1.0 - d / EPAN_SUPPORT_D, 0.0)
    return np.where(inside, k * arr.sigmas[None, :], 0.0).sum(axis=1)


def segment_table(arr: MixtureArrays, cf, t_min=0.0):
    """Sorted shell-event boundaries and cumulative depth at each.

    boundaries: (R, 2N) ascending event times (non-events pushed to +inf);
    cumdepth:   (R, 2N) optical depth accumulated from t_min to each event.
    """
    lo = np.maximum(cf["t0"], t_min)
    hi = cf["t1"]
    valid = cf["hit"] & (hi > lo)
    big = np.inf
    ev = np.concatenate([np.where(valid, lo, big), np.where(valid, hi, big)], axis=1)
    boundaries = np.sort(ev, axis=1)
    finite = np.isfinite(boundaries)
    capped = np.where(finite, boundaries, 0.0)
    # depth to event e: per primitive, chord clipped at [lo_i, min(e, hi_i)].
    c_lo = np.where(valid, lo, 0.0)[:, None, :]
    c_hi = np.clip(capped[:, :, None], np.where(valid, lo, 0.0)[:, None, :],
                   np.where(valid, hi, 0.0)[:, None, :])
    cf3 = {k: (v[:, None, :] if isinstance(v, np.ndarray) else v) for k, v in cf.items()}
    tau = unit_depth(arr, cf3, c_lo, c_hi) * arr.sigmas[None, None, :]
    tau = np.where(valid[:, None, :], np.maximum(tau, 0.0), 0.0)
    cum = tau.sum(axis=2)
    total = cum.max(axis=1)
    cum = np.where(finite, cum, total[:, None])
    return boundaries, cum, total


def sample_distance_table(arr, cf, xi, t_min=0.0, conditional=False, uniform=False):
    """Vectorized free-flight sampling against the segment table.

    Returns dict with: escape (R,) bool, t, sigma_t, depth_at (optical depth
    from t_min to t), total (R,) total depth.  With conditional=True the
    draw is restricted to the scatter branch (xi is rescaled by 1 - T_total)
    and escape is always False where total > 0.
    """
    xi = np.asarray(xi, dtype=np.float64)
    boundaries, cum, total = segment_table(arr, cf, t_min)
    r = xi.shape[0]
    one_m_t = -np.expm1(-total)
    if conditional:
        target = -np.log1p(-xi * one_m_t)
        escape = total <= 0.0
    else:
        target = -np.log1p(-xi)
        escape = target >= total
    act = ~escape
    t = np.zeros(r)
    depth_at = np.where(escape, total, 0.0)
    if np.any(act):
        tb = target[act]
        bounds_a = boundaries[act]
        cum_a = cum[act]
        # Bracketing segment: last boundary with cumdepth < target.
        idx = np.maximum((cum_a < tb[:, None]).sum(axis=1) - 1, 0)
        ar = np.arange(idx.shape[0])
        e0 = bounds_a[ar, idx]
        e1 = bounds_a[ar, np.minimum(idx + 1, bounds_a.shape[1] - 1)]
        d0 = cum_a[ar, idx]
        d1 = cum_a[ar, np.minimum(idx + 1, bounds_a.shape[1] - 1)]
        frac = np.where(d1 > d0, (tb - d0) / np.maximum(d1 - d0, 1e-300), 0.5)
        if uniform:
            ts = e0 + frac * (e1 - e0)
        else:
            ts = _invert_depth(arr, cf, act, tb, e0, e1, t_min)
        t[act] = ts
        if uniform:
            sub = {k: v[act] for k, v in cf.items()}
            depth_at[act] = clipped_depths(arr, sub, t_min, ts[:, None]).sum(axis=1)
        else:
            depth_at[act] = tb
    sigma_t = np.zeros(r)
    if np.any(act):
        sub = {k: v[act] for k, v in cf.items()}
        sigma_t[act] = density_on_ray(arr, sub, t[act])
    return {"escape": escape, "t": t, "sigma_t": sigma_t,
            "depth_at": depth_at, "total": total}


def _invert_depth(arr, cf, act, target, lo, hi, t_min):
    """Guarded Newton on cumulative depth, restricted to one segment."""
    sub = {k: v[act] for k, v in cf.items()}
    t = 0.5 * (lo + hi)
    blo, bhi = lo.copy(), hi.copy()
    for _ in range(64):
        dep = clipped_depths(arr, sub, t_min, t[:, None]).sum(axis=1)
        f = dep - target
        done = np.abs(f) < 1e-11 * np.maximum(1.0, target)
        if done.all():
            break
        blo = np.where(f < 0.0, t, blo)
        bhi = np.where(f >= 0.0, t, bhi)
        dens = density_on_ray(arr, sub, t)
        step_ok = dens > 1e-300
        tn = np.where(step_ok, t - f / np.maximum(dens, 1e-300), 0.5 * (blo + bhi))
        inside = (tn > blo) & (tn < bhi)
        t_next = np.where(inside, tn, 0.5 * (blo + bhi))
        t = np.where(done, t, t_next)
    return t


def albedo_many(arr: MixtureArrays, pts):
    """(P, 3) mixture albedo; zero-density points come back all-zero."""
    dens = density_many(arr, pts)
    tot = dens.sum(axis=1)
    rgb = dens @ arr.albedos
    safe = np.maximum(tot, 1e-300)
    return np.where(tot[:, None] > 0.0, rgb / safe[:, None], 0.0)


def _onb(w):
    # Branchless orthonormal basis (Duff et al. style), vectorized.
    s = np.where(w[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + w[:, 2])
    b = w[:, 0] * w[:, 1] * a
    u = np.stack([1.0 + s * w[:, 0] ** 2 * a, s * b, -s * w[:, 0]], axis=1)
    v = np.stack([b, s + w[:, 1] ** 2 * a, -w[:, 1]], axis=1)
    return u, v


def hg_sample_cos_many(g, u):
    iso = np.abs(g) < 1e-6
    safe_g = np.where(iso, 0.5, g)
    frac = (1.0 - safe_g * safe_g) / (1.0 - safe_g + 2.0 * safe_g * u)
    ct = (1.0 + safe_g * safe_g - frac * frac) / (2.0 * safe_g)
    return np.where(iso, 1.0 - 2.0 * u, np.clip(ct, -1.0, 1.0))


def phase_sample_many(arr: MixtureArrays, pts, w_in, u1, u2):
    """Sample outgoing directions from the local mixture phase function.

    Component selection consumes u1 and rescales the remainder within the
    chosen slot for the scattering angle; u2 drives the azimuth.  Mirrors
    the scalar routine draw for draw.
    """
    dens = density_many(arr, pts)
    w = dens * arr.mean_albedo[None, :]
    tot = w.sum(axis=1)
    # Fall back to plain density weights in zero-albedo regions.
    use_fallback = tot <= 1e-300
    if np.any(use_fallback):
        w = np.where(use_fallback[:, None], dens, w)
        tot = w.sum(axis=1)
    cs = np.cumsum(w, axis=1)
    pick = u1 * tot
    idx = np.minimum((cs <= pick[:, None]).sum(axis=1), arr.n - 1)
    ar = np.arange(pts.shape[0])
    prev = np.where(idx > 0, cs[ar, np.maximum(idx - 1, 0)], 0.0)
    width = np.maximum(cs[ar, idx] - prev, 1e-300)
    u1r = np.clip((pick - prev) / width, 1e-12, 1.0 - 1e-12)
    g = arr.phase_gs[idx]
    ct = np.clip(hg_sample_cos_many(g, u1r), -1.0, 1.0)
    st = np.sqrt(np.maximum(1.0 - ct * ct, 0.0))
    phi = _TWO_PI * u2
    t1, t2 = _onb(w_in)
    d = (st * np.cos(phi))[:, None] * t1 + (st * np.sin(phi))[:, None] * t2 \
        + ct[:, None] * w_in
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def hg_phase_many(g, cos_theta):
    denom = 1.0 + g * g - 2.0 * g * cos_theta
    return (1.0 - g * g) / (4.0 * np.pi * np.maximum(denom, 1e-300) ** 1.5)


def phase_eval_many(arr: MixtureArrays, pts, w_in, w_out):
    dens = density_many(arr, pts)
    w = dens * arr.mean_albedo[None, :]
    tot = w.sum(axis=1)
    fallback = tot <= 1e-300
    if np.any(fallback):
        w = np.where(fallback[:, None], dens, w)
        tot = w.sum(axis=1)
    ct = np.einsum("pi,pi->p", w_in, w_out)
    vals = hg_phase_many(arr.phase_gs[None, :], ct[:, None])
    num = (w * vals).sum(axis=1)
    return np.where(tot > 0.0, num / np.maximum(tot, 1e-300), 0.0)


def eval_sh_many(arr: MixtureArrays, dirs):
    """(R, N, 3) emitted radiance of each primitive toward each direction."""
    b = eval_sh_basis_many(dirs)[:, : arr.sh.shape[2]]
    return np.einsum("nck,rk->rnc", arr.sh, b)
