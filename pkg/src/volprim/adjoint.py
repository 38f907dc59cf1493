"""Reverse-mode parameter gradients for the closed-form renderers.

Once the seed is fixed every integrator is a deterministic function of the
primitive parameters, so each backward pass replays the primal computation
and chains an image-space adjoint through the closed-form chord depths.
Sampled quantities (free-flight distances, scattered directions, roulette
decisions) are kept fixed during differentiation: gradients flow through
the physical factors of each recorded path contribution, never through
the sample positions themselves.  Under that convention the path-traced
gradient is the usual score-style estimator

    grad = sum over contributions  V * d/dtheta log f(path)

where V is the recorded contribution and f collects the extinction,
transmittance, albedo and phase factors along its prefix.

Chord depths are differentiated exactly, including the motion of the
truncation-shell entry/exit points (for Gaussians the kernel does not
vanish at the shell, so freezing the bounds would leave a percent-level
error in every geometric partial; for Epanechnikov kernels the boundary
value is zero and those terms drop out on their own).

Gradient accumulation runs over a fixed global chunk grid with an ordered
reduction, so results are bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .batch import (MixtureArrays, albedo_many, clipped_depths, density_many,
                    eval_sh_basis_many, eval_sh_many, hg_phase_many,
                    line_coeffs, phase_eval_many, phase_sample_many,
                    sample_distance_table)
from .cameras import Telecentric
from .errors import (ContractViolationError, InvalidParameterError,
                     UnsupportedModeError)
from .geometry import PrimitiveFrame, rotation_derivatives
from .integrators import (Scene, RenderSettings, _DIM_JX, _DIM_JY, _DIM_LU,
                          _DIM_LV, _LUMA, _RR_START, _bounce_dim, _camera_rays,
                          render_transmittance, render_vppt, render_vprf,
                          thread_count)
from .kernels import EPAN_NORM, EPAN_SUPPORT_D, KernelKind
from .medium import Mixture, Primitive
from .rng import uniform_field
from .sampling import SamplingMode

_TWO_PI = 2.0 * np.pi
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


# ---------------------------------------------------------------------------
# Gradient containers


@dataclass
class GradientSet:
    """Per-primitive parameter gradients, ordered exactly like the Mixture.

    sh is padded to the widest coefficient count in the mixture; entries
    beyond a primitive's own band count are kept at zero.
    """

    means: np.ndarray
    eulers: np.ndarray
    scales: np.ndarray
    sigmas: np.ndarray
    albedos: np.ndarray
    phase_gs: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros(cls, mixture: Mixture) -> "GradientSet":
        n = len(mixture)
        sh_len = max([p.sh_coeffs.shape[1] for p in mixture.primitives], default=1)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3, sh_len)))

    @property
    def n(self):
        return self.sigmas.shape[0]

    def add_(self, other: "GradientSet") -> "GradientSet":
        self.means += other.means
        self.eulers += other.eulers
        self.scales += other.scales
        self.sigmas += other.sigmas
        self.albedos += other.albedos
        self.phase_gs += other.phase_gs
        self.sh += other.sh
        return self

    def scaled(self, s: float) -> "GradientSet":
        return GradientSet(self.means * s, self.eulers * s, self.scales * s,
                           self.sigmas * s, self.albedos * s,
                           self.phase_gs * s, self.sh * s)

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in
                   (self.means, self.eulers, self.scales, self.sigmas,
                    self.albedos, self.phase_gs, self.sh))


@dataclass
class ReplayContext:
    """Recorded primal pass of the path tracer for one batch of rays.

    radiance holds the per-path primal estimate; records keeps the
    per-bounce state the backward pass consumes (internal layout).
    Rebuilding the context with the same seed and ids regenerates the
    identical event sequence as the primal render.
    """

    seed: int
    pixel_ids: np.ndarray
    sample_ids: np.ndarray
    radiance: np.ndarray
    records: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# Closed-form chord partials.  tau over [lo, hi] depends on the pair
# invariants a = |y0|^2, b = y0.u, m2 = |u|^2 and on ld = log sqrt(det S).


def _interior_partials(arr, cf, lo, hi, tau):
    """d tau / d (a, b, m2, ld) at fixed integration bounds."""
    if arr.kind is KernelKind.GAUSSIAN:
        m = cf["m"]
        m2 = cf["m2"]
        b = cf["b"]
        t_c = cf["t_c"]
        q0 = m * (lo - t_c) * _INV_SQRT2
        q1 = m * (hi - t_c) * _INV_SQRT2
        e0 = np.exp(-q0 * q0)
        e1 = np.exp(-q1 * q1)
        g = arr.sigmas[None, :] * cf["amp"] * _TWO_OVER_SQRT_PI
        da = -0.5 * tau
        db = tau * b / m2 + g * (e1 - e0) * _INV_SQRT2 / m
        shift = b * _INV_SQRT2 / (m * m2)
        dm2 = (tau * (-b * b / (2.0 * m2 * m2) - 0.5 / m2)
               + g * (e1 * (q1 / (2.0 * m2) - shift) - e0 * (q0 / (2.0 * m2) - shift)))
        return da, db, dm2, -tau
    kn = arr.sigmas[None, :] * cf["k_norm"]
    d1 = hi - lo
    d2 = hi * hi - lo * lo
    d3 = hi ** 3 - lo ** 3
    return (-kn * d1 / EPAN_SUPPORT_D, -kn * d2 / EPAN_SUPPORT_D,
            -kn * d3 / (3.0 * EPAN_SUPPORT_D), -tau)


def _root_derivs(arr, cf):
    """Shell-root sensitivities (d t0, d t1) / d (a, b, m2) per pair.

    Tangent chords (disc -> 0) are genuinely non-smooth; the clamp only
    bounds the blowup there.
    """
    b = cf["b"]
    m2 = cf["m2"]
    amk = cf["a"] - arr.k2
    disc = b * b - m2 * amk
    s = np.sqrt(np.maximum(disc, 1e-24))
    dt0 = (0.5 / s, (-1.0 - b / s) / m2, (amk * m2 / (2.0 * s) + b + s) / (m2 * m2))
    dt1 = (-0.5 / s, (-1.0 + b / s) / m2, (-amk * m2 / (2.0 * s) + b - s) / (m2 * m2))
    return dt0, dt1


def _chord_partials(arr, cf, t_min, t_max):
    """tau clipped to [t_min, t_max] and its full (a, b, m2, ld) partials.

    t_min/t_max are external clip values (scalars or per-ray columns);
    where the active endpoint is the shell root itself, the root-motion
    term sigma*K(shell) * d t_root is folded in.  That boundary value is
    zero for Epanechnikov kernels, so only Gaussians carry it.
    """
    lo = np.maximum(cf["t0"], t_min)
    hi = np.minimum(cf["t1"], t_max)
    valid = cf["hit"] & (hi > lo)
    lo = np.where(valid, lo, 0.0)
    hi = np.where(valid, hi, 0.0)
    tau = clipped_depths(arr, cf, t_min, t_max)
    da, db, dm2, dld = _interior_partials(arr, cf, lo, hi, tau)
    if arr.kind is KernelKind.GAUSSIAN:
        k_end = arr.sigmas[None, :] * np.exp(-0.5 * arr.k2) / (
            (_TWO_PI ** 1.5) * arr.det_sqrt[None, :])
        act_lo = valid & (cf["t0"] > t_min)
        act_hi = valid & (cf["t1"] < t_max)
        dt0, dt1 = _root_derivs(arr, cf)
        parts = [da, db, dm2]
        for i in range(3):
            parts[i] = (parts[i]
                        + np.where(act_hi, k_end * dt1[i], 0.0)
                        - np.where(act_lo, k_end * dt0[i], 0.0))
        da, db, dm2 = parts
    z = lambda x: np.where(valid, x, 0.0)
    return tau, z(da), z(db), z(dm2), z(dld)


def _kernel_at(arr, cf, t):
    """Untruncated sigma*K of each pair at ray parameter t (one per ray)."""
    tt = t[:, None]
    d2 = cf["a"] + 2.0 * cf["b"] * tt + cf["m2"] * tt * tt
    if arr.kind is KernelKind.GAUSSIAN:
        k = np.exp(-0.5 * d2) / ((_TWO_PI ** 1.5) * arr.det_sqrt[None, :])
    else:
        k = (EPAN_NORM / arr.det_sqrt[None, :]) * np.maximum(
            1.0 - d2 / EPAN_SUPPORT_D, 0.0)
    return arr.sigmas[None, :] * k


# ---------------------------------------------------------------------------
# Parameter chain accumulator


class _ChainAccum:
    """Folds per-pair adjoints of (a, b, m2, ld, sigma) into parameter space.

    With y0 = M (o - c) and u = M w the chains are linear in y0/u, so the
    euler reduction only needs the (3x3) moment sums A accumulated here.
    """

    def __init__(self, mixture: Mixture, arr: MixtureArrays):
        self.arr = arr
        n = arr.n
        self.g_mean = np.zeros((n, 3))
        self.g_scale = np.zeros((n, 3))
        self.g_sigma = np.zeros(n)
        self.g_albedo = np.zeros((n, 3))
        self.g_g = np.zeros(n)
        self.g_sh = np.zeros_like(arr.sh)
        self.A = np.zeros((n, 3, 3))
        self._dM = np.zeros((n, 3, 3, 3))
        for i, p in enumerate(mixture.primitives):
            drs = rotation_derivatives(p.frame.euler)
            for j in range(3):
                self._dM[i, j] = drs[j].T / p.frame.scale[:, None]

    def add_pairs(self, o, d, wa, wb, wm, wl, wsig):
        arr = self.arr
        y0 = np.einsum("rj,nij->rni", o, arr.M) - arr.Mc[None, :, :]
        u = np.einsum("rj,nij->rni", d, arr.M)
        gy = 2.0 * wa[:, :, None] * y0 + wb[:, :, None] * u
        gu = wb[:, :, None] * y0 + 2.0 * wm[:, :, None] * u
        self.g_mean -= np.einsum("rni,nij->nj", gy, arr.M)
        self.g_scale += (-(gy * y0).sum(axis=0) / arr.scales
                         - (gu * u).sum(axis=0) / arr.scales
                         + wl.sum(axis=0)[:, None] / arr.scales)
        self.g_sigma += wsig.sum(axis=0)
        self.A += (np.einsum("rni,rk->nik", gy, o)
                   - np.einsum("rni,nk->nik", gy, arr.means)
                   + np.einsum("rni,rk->nik", gu, d))

    def add_points(self, pts, wa, wl, wsig):
        arr = self.arr
        y0 = np.einsum("rj,nij->rni", pts, arr.M) - arr.Mc[None, :, :]
        gy = 2.0 * wa[:, :, None] * y0
        self.g_mean -= np.einsum("rni,nij->nj", gy, arr.M)
        self.g_scale += (-(gy * y0).sum(axis=0) / arr.scales
                         + wl.sum(axis=0)[:, None] / arr.scales)
        self.g_sigma += wsig.sum(axis=0)
        self.A += (np.einsum("rni,rk->nik", gy, pts)
                   - np.einsum("rni,nk->nik", gy, arr.means))

    def finalize(self) -> GradientSet:
        g_euler = np.einsum("njik,nik->nj", self._dM, self.A)
        return GradientSet(self.g_mean, g_euler, self.g_scale, self.g_sigma,
                           self.g_albedo, self.g_g, self.g_sh)


def _point_terms(acc, arr, pts, w_sigt, w_alpha, w_mu, d_in, d_out):
    """Score terms d log sigma_t, d log alpha_c, d log mu at fixed points.

    w_alpha is per channel; zero weights must stay exactly zero, so every
    quotient is guarded by its own weight mask.
    """
    dens = density_many(arr, pts)               # truncated sigma K
    st = dens.sum(axis=1)
    pos = st > 0.0
    inv_st = np.where(pos, 1.0 / np.maximum(st, 1e-300), 0.0)
    wk = w_sigt[:, None] * inv_st[:, None] * np.ones_like(dens)

    al = albedo_many(arr, pts)
    safe_al = np.maximum(al, 1e-300)
    wa_eff = np.where(al > 0.0, w_alpha, 0.0)
    wk += np.einsum("pc,pnc->pn", wa_eff / safe_al * inv_st[:, None],
                    arr.albedos[None, :, :] - al[:, None, :])
    acc.g_albedo += np.einsum("pc,pn->nc", wa_eff / safe_al * inv_st[:, None], dens)

    abar = arr.mean_albedo
    wgt = dens * abar[None, :]
    W = wgt.sum(axis=1)
    mu = phase_eval_many(arr, pts, d_in, d_out)
    ct = np.einsum("pi,pi->p", d_in, d_out)
    f = hg_phase_many(arr.phase_gs[None, :], ct[:, None])
    ok_mu = (W > 0.0) & (mu > 0.0)
    wm_eff = np.where(ok_mu, w_mu, 0.0)
    inv_wmu = np.where(ok_mu, 1.0 / np.maximum(W * mu, 1e-300), 0.0)
    wk += wm_eff[:, None] * (f - mu[:, None]) * inv_wmu[:, None] * abar[None, :]
    acc.g_albedo += (wm_eff[:, None] * (f - mu[:, None]) * dens
                     * inv_wmu[:, None]).sum(axis=0)[:, None] / 3.0
    den = 1.0 + arr.phase_gs[None, :] ** 2 - 2.0 * arr.phase_gs[None, :] * ct[:, None]
    dfdg = (-2.0 * arr.phase_gs[None, :] * den
            - 3.0 * (arr.phase_gs[None, :] - ct[:, None])
            * (1.0 - arr.phase_gs[None, :] ** 2)) / (4.0 * np.pi * den ** 2.5)
    acc.g_g += (wm_eff[:, None] * wgt * dfdg * inv_wmu[:, None]).sum(axis=0)

    # chain wk through the truncated kernel at fixed points
    y = np.einsum("pj,nij->pni", pts, arr.M) - arr.Mc[None, :, :]
    d2 = np.einsum("pni,pni->pn", y, y)
    inside = d2 <= arr.k2
    if arr.kind is KernelKind.GAUSSIAN:
        k = np.exp(-0.5 * d2) / ((_TWO_PI ** 1.5) * arr.det_sqrt[None, :])
        dk_dd2 = -0.5 * k
    else:
        k = (EPAN_NORM / arr.det_sqrt[None, :]) * np.maximum(
            1.0 - d2 / EPAN_SUPPORT_D, 0.0)
        dk_dd2 = -(EPAN_NORM / arr.det_sqrt[None, :]) / EPAN_SUPPORT_D \
            * np.ones_like(d2)
    wk = np.where(inside, wk, 0.0)
    sk = arr.sigmas[None, :] * k
    acc.add_points(pts,
                   wk * arr.sigmas[None, :] * dk_dd2,
                   -wk * sk,
                   wk * k)


# ---------------------------------------------------------------------------
# Transmittance backward


def _transmittance_chunk(scene, mixture, o, d, genv):
    arr = MixtureArrays(mixture)
    acc = _ChainAccum(mixture, arr)
    if arr.n and o.shape[0]:
        cf = line_coeffs(arr, o, d)
        tau, da, db, dm2, dld = _chord_partials(arr, cf, 0.0, np.inf)
        t = np.exp(-tau.sum(axis=1))
        w = np.where(tau > 0.0, (-genv * t)[:, None], 0.0)
        wsig = np.where(tau > 0.0, w * tau / np.maximum(arr.sigmas[None, :], 1e-300), 0.0)
        acc.add_pairs(o, d, w * da, w * db, w * dm2, w * dld, wsig)
    return acc.finalize()


def backward_transmittance(scene: Scene, camera, settings, grad_image) -> GradientSet:
    """Adjoint of render_transmittance: d(sum grad_image * image)/d(params)."""
    g = _check_grad_image(camera, grad_image)
    mixture = scene.mixture
    h, w = camera.height, camera.width
    genv_px = g.reshape(-1, 3) @ scene.env_radiance
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)
    lens = isinstance(camera, Telecentric) and camera.aperture_radius > 0.0
    chunk = max(256, int(4e5 // max(1, len(mixture))))

    tasks = []
    for c0 in range(0, px.shape[0], chunk):
        sl = slice(c0, min(c0 + chunk, px.shape[0]))
        if lens:
            for i in range(4):
                for j in range(4):
                    lu = np.full(px[sl].shape[0], (i + 0.5) / 4.0)
                    lv = np.full(px[sl].shape[0], (j + 0.5) / 4.0)
                    o, d = camera.rays(px[sl], py[sl], 0.5, 0.5, lu, lv)
                    tasks.append((o, d, genv_px[sl] / 16.0))
        else:
            o, d = _camera_rays(camera, px[sl], py[sl], 0.5, 0.5)
            tasks.append((o, d, genv_px[sl]))

    out = _reduce_chunks(tasks, lambda t: _transmittance_chunk(
        scene, mixture, t[0], t[1], t[2]), mixture)
    _mask_sh(out, mixture)
    return out


# ---------------------------------------------------------------------------
# VPRF backward


def _vprf_chunk(scene, mixture, o, d, g, settings):
    arr = MixtureArrays(mixture)
    acc = _ChainAccum(mixture, arr)
    r = o.shape[0]
    if arr.n == 0 or r == 0:
        return acc.finalize()
    env = scene.env_radiance
    genv = g @ env
    cf = line_coeffs(arr, o, d)
    raw_emit = eval_sh_many(arr, d)
    emit = np.maximum(raw_emit, 0.0)
    emitdot = np.einsum("rnc,rc->rn", emit, g)

    # sorted shell events with ownership for the edge-motion terms
    lo_r = np.maximum(cf["t0"], 0.0)
    hi_r = cf["t1"]
    valid = cf["hit"] & (hi_r > lo_r)
    ev = np.concatenate([np.where(valid, lo_r, np.inf),
                         np.where(valid, hi_r, np.inf)], axis=1)
    order = np.argsort(ev, axis=1, kind="stable")
    bounds = np.take_along_axis(ev, order, axis=1)
    owner = order % arr.n
    is_exit = order >= arr.n
    ncol = bounds.shape[1] - 1

    # sweep A: replay the primal column loop, keeping per-column state
    ok_cols = np.zeros((r, ncol), dtype=bool)
    trun_cols = np.ones((r, ncol))
    tseg_cols = np.ones((r, ncol))
    f_cols = np.zeros((r, ncol))
    t_run = np.ones(r)
    active = np.ones(r, dtype=bool)
    seg_count = np.zeros(r, dtype=np.intp)
    for k in range(ncol):
        lo = bounds[:, k]
        hi = bounds[:, k + 1]
        fin = np.isfinite(hi)
        if not (active & fin).any():
            break
        trun_cols[:, k] = t_run
        tau = clipped_depths(arr, cf, lo[:, None], hi[:, None])
        s_tau = tau.sum(axis=1)
        ok = active & fin & (hi > lo) & (s_tau > 0.0)
        if not ok.any():
            continue
        t_seg = np.exp(-s_tau)
        abar = np.einsum("rn,rn->r", tau, emitdot) / np.maximum(s_tau, 1e-300)
        ok_cols[:, k] = ok
        tseg_cols[:, k] = np.where(ok, t_seg, 1.0)
        f_cols[:, k] = np.where(ok, t_run * (1.0 - t_seg) * abar, 0.0)
        t_run = np.where(ok, t_run * t_seg, t_run)
        seg_count += ok
        active &= (t_run >= settings.termination) & (seg_count < settings.max_events)

    # downstream radiance after each column (env tail included)
    tails = np.empty((r, ncol))
    suffix = t_run * genv
    for k in range(ncol - 1, -1, -1):
        tails[:, k] = suffix
        suffix = suffix + f_cols[:, k]

    # sweep B: per-column tau adjoints, interior partials, edge motion
    dt0s, dt1s = _root_derivs(arr, cf)
    wa = np.zeros((r, arr.n))
    wb = np.zeros((r, arr.n))
    wm = np.zeros((r, arr.n))
    wl = np.zeros((r, arr.n))
    wsig = np.zeros((r, arr.n))
    w_sh = np.zeros((r, arr.n))
    prev_wtau = np.zeros((r, arr.n))
    inv_sig = 1.0 / np.maximum(arr.sigmas[None, :], 1e-300)
    for k in range(ncol):
        ok = ok_cols[:, k]
        if ok.any():
            lo = bounds[:, k]
            hi = bounds[:, k + 1]
            lo_c = np.where(ok, lo, 0.0)
            hi_c = np.where(ok, hi, 0.0)
            tau = clipped_depths(arr, cf, lo_c[:, None], hi_c[:, None])
            tau = np.where(ok[:, None], tau, 0.0)
            s_tau = np.maximum(tau.sum(axis=1), 1e-300)
            t_seg = tseg_cols[:, k]
            trun = trun_cols[:, k]
            abar = np.einsum("rn,rn->r", tau, emitdot) / s_tau
            wtau = (trun * t_seg * abar)[:, None] \
                + (trun * (1.0 - t_seg) / s_tau)[:, None] * (emitdot - abar[:, None]) \
                - tails[:, k][:, None]
            wtau = np.where(ok[:, None] & (tau > 0.0), wtau, 0.0)
            # interior partials at the fixed segment bounds
            e_lo = np.maximum(cf["t0"], lo_c[:, None])
            e_hi = np.minimum(cf["t1"], hi_c[:, None])
            sel = tau > 0.0
            e_lo = np.where(sel, e_lo, 0.0)
            e_hi = np.where(sel, e_hi, 0.0)
            da, db, dm2, dld = _interior_partials(arr, cf, e_lo, e_hi, tau)
            wa += wtau * da
            wb += wtau * db
            wm += wtau * dm2
            wl += wtau * dld
            wsig += np.where(sel, wtau * tau * inv_sig, 0.0)
            w_sh += np.where(ok[:, None], (trun * (1.0 - t_seg))[:, None] * tau / s_tau[:, None], 0.0)
        else:
            wtau = np.zeros((r, arr.n))
        _vprf_edge(arr, cf, bounds, owner, is_exit, k, prev_wtau, wtau,
                   dt0s, dt1s, wa, wb, wm)
        prev_wtau = wtau
    _vprf_edge(arr, cf, bounds, owner, is_exit, ncol, prev_wtau,
               np.zeros((r, arr.n)), dt0s, dt1s, wa, wb, wm)

    acc.add_pairs(o, d, wa, wb, wm, wl, wsig)
    # SH coefficients: emit was clamped at zero before compositing
    pos = raw_emit > 0.0
    basis = eval_sh_basis_many(d)[:, : arr.sh.shape[2]]
    acc.g_sh += np.einsum("rn,rc,rnc,rl->ncl", w_sh, g,
                          pos.astype(np.float64), basis, optimize=True)
    return acc.finalize()


def _vprf_edge(arr, cf, bounds, owner, is_exit, j, wtau_left, wtau_right,
               dt0s, dt1s, wa, wb, wm):
    """Chain the motion of event j into its owner's (a, b, m2) adjoints.

    An event between two columns moves every co-resident chord clip, so
    its coefficient sums sigma*K at the event over both columns' tau
    adjoints.  Entry events clamped at t = 0 do not move.
    """
    if j >= bounds.shape[1]:
        return
    e = bounds[:, j]
    fin = np.isfinite(e)
    if not fin.any():
        return
    any_w = (wtau_left != 0.0).any(axis=1) | (wtau_right != 0.0).any(axis=1)
    own = owner[:, j]
    rows = np.flatnonzero(fin & any_w)
    if rows.size == 0:
        return
    exit_j = is_exit[rows, j]
    o_r = own[rows]
    frozen = ~exit_j & (cf["t0"][rows, o_r] <= 0.0)
    rows = rows[~frozen]
    if rows.size == 0:
        return
    exit_j = exit_j[~frozen]
    o_r = o_r[~frozen]
    kk = _kernel_at(arr, cf, np.where(fin, e, 0.0))[rows]
    ec = (wtau_left[rows] * kk).sum(axis=1) - (wtau_right[rows] * kk).sum(axis=1)
    for dst, d0, d1 in ((wa, dt0s[0], dt1s[0]), (wb, dt0s[1], dt1s[1]),
                        (wm, dt0s[2], dt1s[2])):
        dt = np.where(exit_j, d1[rows, o_r], d0[rows, o_r])
        np.add.at(dst, (rows, o_r), ec * dt)


def backward_vprf(scene: Scene, camera, settings: RenderSettings,
                  grad_image) -> GradientSet:
    """Adjoint of render_vprf under the same settings and seed."""
    if settings.fast_vprf:
        raise UnsupportedModeError(
            "the radiance-field adjoint covers the exact segment integrator; "
            "fast mode reorders contributions and has no continuous derivative")
    g = _check_grad_image(camera, grad_image)
    mixture = scene.mixture
    tasks = _mc_ray_tasks(camera, settings, g,
                          chunk=max(16, int(3e5 // max(1, len(mixture) ** 2))),
                          center_when_spp1=True)
    out = _reduce_chunks(tasks, lambda t: _vprf_chunk(
        scene, mixture, t[0], t[1], t[2], settings), mixture)
    _mask_sh(out, mixture)
    return out


# ---------------------------------------------------------------------------
# VPPT backward


def replay_vppt(scene: Scene, origins, dirs, pixel_ids, sample_ids,
                settings: RenderSettings) -> ReplayContext:
    """Re-run the path tracer on explicit rays, recording per-bounce state.

    The control flow mirrors vppt_radiance exactly (same RNG dimensions,
    same masks), so the returned radiance is bit-identical to the primal.
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
    records = []
    ctx = ReplayContext(st.seed, np.array(pid), np.array(smp), L, records)

    if arr.n == 0:
        ctx.radiance = np.tile(env, (r, 1))
        return ctx

    for b in range(n_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        cf = line_coeffs(arr, o[idx], d[idx])
        xi = uniform_field(st.seed, _bounce_dim(b, 0), pid[idx], smp[idx])
        last = b == n_steps - 1
        rec = {"idx": idx, "o": o[idx].copy(), "d": d[idx].copy()}
        records.append(rec)
        if st.nee:
            res = sample_distance_table(arr, cf, xi, conditional=True, uniform=biased)
            t_tot = np.exp(-res["total"])
            if st.rr_nee:
                u = uniform_field(st.seed, _bounce_dim(b, 4), pid[idx], smp[idx])
                contrib = np.where((u < t_tot)[:, None], beta[idx] * env[None, :], 0.0)
            else:
                contrib = beta[idx] * env[None, :] * t_tot[:, None]
            L[idx] += contrib
            rec["esc"] = contrib
            if last:
                break
            p_scatter = -np.expm1(-res["total"])
            x = o[idx] + res["t"][:, None] * d[idx]
            nb = beta[idx] * p_scatter[:, None] * albedo_many(arr, x)
            cont = ~res["escape"] & (nb @ _LUMA > 0.0)
        else:
            res = sample_distance_table(arr, cf, xi, uniform=biased)
            esc = res["escape"]
            contrib = np.zeros((idx.size, 3))
            contrib[esc] = beta[idx[esc]] * env[None, :]
            L[idx[esc]] += beta[idx[esc]] * env[None, :]
            alive[idx[esc]] = False
            rec["esc"] = contrib
            if last:
                alive[idx] = False
                break
            x = o[idx] + res["t"][:, None] * d[idx]
            nb = beta[idx] * albedo_many(arr, x)
            cont = ~esc & (nb @ _LUMA > 0.0)

        alive[idx[~cont]] = False
        sub = idx[cont]
        rec["cont"] = cont
        rec["t"] = res["t"][cont].copy()
        rec["x"] = x[cont].copy()
        if sub.size == 0:
            continue
        u1 = uniform_field(st.seed, _bounce_dim(b, 1), pid[sub], smp[sub])
        u2 = uniform_field(st.seed, _bounce_dim(b, 2), pid[sub], smp[sub])
        d[sub] = phase_sample_many(arr, x[cont], d[sub], u1, u2)
        o[sub] = x[cont]
        beta[sub] = nb[cont]
        rec["d_out"] = d[sub].copy()

        if b >= _RR_START:
            lum = beta[sub] @ _LUMA
            gamble = lum < st.rr_threshold
            survival = np.minimum(1.0, lum)
            u = uniform_field(st.seed, _bounce_dim(b, 3), pid[sub], smp[sub])
            kill = gamble & (u >= survival)
            boost = gamble & ~kill
            alive[sub[kill]] = False
            beta[sub[boost]] /= survival[boost][:, None]
    ctx.radiance = L
    return ctx


def _vppt_chunk(scene, mixture, o, d, pid, smp, g, settings):
    arr = MixtureArrays(mixture)
    acc = _ChainAccum(mixture, arr)
    r = o.shape[0]
    if arr.n == 0 or r == 0:
        return acc.finalize()
    ctx = replay_vppt(scene, o, d, pid, smp, settings)
    records = ctx.records

    # suffix[b][ray] = sum of grad-weighted contributions at bounces >= b
    n_rec = len(records)
    suffix = [None] * (n_rec + 1)
    suffix[n_rec] = np.zeros((r, 3))
    for b in range(n_rec - 1, -1, -1):
        s = suffix[b + 1].copy()
        rec = records[b]
        s[rec["idx"]] += g[rec["idx"]] * rec["esc"]
        suffix[b] = s

    for b, rec in enumerate(records):
        idx = rec["idx"]
        cf = line_coeffs(arr, rec["o"], rec["d"])
        # escape/NEE transmittance of this bounce: full-chord depths
        w_tail = -(g[idx] * rec["esc"]).sum(axis=1)
        tau, da, db, dm2, dld = _chord_partials(arr, cf, 0.0, np.inf)
        wtau = np.where(tau > 0.0, w_tail[:, None], 0.0)
        wsig = np.where(tau > 0.0, wtau * tau, 0.0) / np.maximum(
            arr.sigmas[None, :], 1e-300)
        if "cont" in rec and rec["t"].size:
            cont = rec["cont"]
            # segment transmittance up to the kept scatter vertex
            w_seg = -suffix[b + 1][idx[cont]].sum(axis=1)
            cfs = {k: (v[cont] if isinstance(v, np.ndarray) else v)
                   for k, v in cf.items()}
            tau_s, da_s, db_s, dm_s, dl_s = _chord_partials(
                arr, cfs, 0.0, rec["t"][:, None])
            wts = np.where(tau_s > 0.0, w_seg[:, None], 0.0)
            wa_s = wts * da_s
            wb_s = wts * db_s
            wm_s = wts * dm_s
            wl_s = wts * dl_s
            ws_s = np.where(tau_s > 0.0, wts * tau_s, 0.0) / np.maximum(
                arr.sigmas[None, :], 1e-300)
            acc.add_pairs(rec["o"][cont], rec["d"][cont],
                          wa_s, wb_s, wm_s, wl_s, ws_s)
            # pointwise extinction / albedo / phase scores at the vertex
            sfx = suffix[b + 1][idx[cont]]
            w_scalar = sfx.sum(axis=1)
            _point_terms(acc, arr, rec["x"], w_scalar, sfx, w_scalar,
                         rec["d"][cont], rec["d_out"])
        acc.add_pairs(rec["o"], rec["d"], wtau * da, wtau * db, wtau * dm2,
                      wtau * dld, wsig)
    return acc.finalize()


def backward_vppt(scene: Scene, camera, settings: RenderSettings,
                  grad_image) -> GradientSet:
    """Adjoint of render_vppt via path replay with detached samples.

    Exact (and deterministic) when every albedo is zero; otherwise a
    stochastic estimate whose expectation follows the primal estimator.
    """
    if settings.mode is SamplingMode.BIASED_UNIFORM:
        raise UnsupportedModeError(
            "biased uniform sampling folds its bias into the sample weight; "
            "the replayed-estimator derivative is undefined for it")
    g = _check_grad_image(camera, grad_image)
    mixture = scene.mixture
    tasks = _mc_ray_tasks(camera, settings, g,
                          chunk=max(64, int(15e4 // max(1, len(mixture)))),
                          center_when_spp1=False)
    out = _reduce_chunks(tasks, lambda t: _vppt_chunk(
        scene, mixture, t[0], t[1], t[3], t[4], t[2], settings), mixture)
    _mask_sh(out, mixture)
    return out


# ---------------------------------------------------------------------------
# Shared driver plumbing


def _check_grad_image(camera, grad_image):
    g = np.asarray(grad_image, dtype=np.float64)
    if g.shape != (camera.height, camera.width, 3):
        raise ContractViolationError(
            f"grad_image shape {g.shape} does not match the camera "
            f"resolution ({camera.height}, {camera.width}, 3)")
    if not np.all(np.isfinite(g)):
        raise InvalidParameterError("grad_image must be finite")
    return g


def _mc_ray_tasks(camera, settings, g, chunk, center_when_spp1):
    """Fixed global chunk list of (o, d, per-ray grad[, pid, smp]) tuples.

    Regenerates exactly the rays the primal integrator traced: jitter and
    lens dimensions come from the counter RNG keyed by (pixel, sample).
    """
    h, w = camera.height, camera.width
    g_flat = g.reshape(-1, 3)
    lens = isinstance(camera, Telecentric) and camera.aperture_radius > 0.0
    tasks = []
    if settings.spp == 1 and center_when_spp1:
        ys, xs = np.mgrid[0:h, 0:w]
        px = xs.ravel().astype(np.float64)
        py = ys.ravel().astype(np.float64)
        for c0 in range(0, px.shape[0], chunk):
            sl = slice(c0, min(c0 + chunk, px.shape[0]))
            o, d = _camera_rays(camera, px[sl], py[sl], 0.5, 0.5)
            tasks.append((o, d, g_flat[sl],
                          np.arange(c0, min(c0 + chunk, px.shape[0]), dtype=np.uint64),
                          np.zeros(o.shape[0], dtype=np.uint64)))
        return tasks
    n_rays = h * w * settings.spp
    for c0 in range(0, n_rays, chunk):
        c1 = min(c0 + chunk, n_rays)
        flat = np.arange(c0, c1, dtype=np.uint64)
        pid = flat // settings.spp
        smp = flat % settings.spp
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
        tasks.append((o, d, g_flat[pid.astype(np.intp)] / settings.spp, pid, smp))
    return tasks


def _reduce_chunks(tasks, fn, mixture):
    """Run chunk tasks (possibly threaded) and reduce in fixed task order."""
    nt = min(thread_count(), max(1, len(tasks)))
    if nt <= 1 or len(tasks) <= 1:
        parts = [fn(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=nt) as ex:
            parts = list(ex.map(fn, tasks))
    total = GradientSet.zeros(mixture)
    for p in parts:
        total.add_(p)
    if not total.all_finite():
        raise ArithmeticError("gradient accumulation produced non-finite values")
    return total


def _mask_sh(gs: GradientSet, mixture: Mixture):
    for i, p in enumerate(mixture.primitives):
        gs.sh[i, :, p.sh_coeffs.shape[1]:] = 0.0


# ---------------------------------------------------------------------------
# Finite-difference harness (shared by tests and the gradcheck CLI verb)


_FIELDS = ("mean", "euler", "scale", "sigma", "albedo", "phase_g", "sh")


def parameter_axes(mixture: Mixture):
    """Flat list of every scalar parameter as (prim, field, index, label)."""
    axes = []
    for i, p in enumerate(mixture.primitives):
        for c in range(3):
            axes.append((i, "mean", (c,), f"p{i}.mean[{c}]"))
        for c in range(3):
            axes.append((i, "euler", (c,), f"p{i}.euler[{c}]"))
        for c in range(3):
            axes.append((i, "scale", (c,), f"p{i}.scale[{c}]"))
        axes.append((i, "sigma", (), f"p{i}.sigma"))
        for c in range(3):
            axes.append((i, "albedo", (c,), f"p{i}.albedo[{c}]"))
        axes.append((i, "phase_g", (), f"p{i}.phase_g"))
        for c in range(3):
            for l in range(p.sh_coeffs.shape[1]):
                axes.append((i, "sh", (c, l), f"p{i}.sh[{c},{l}]"))
    return axes


def perturbed_mixture(mixture: Mixture, axis, delta: float) -> Mixture:
    i, fld, comp, _ = axis
    prims = list(mixture.primitives)
    p = prims[i]
    fr = p.frame
    mean, euler, scale = fr.mean.copy(), fr.euler.copy(), fr.scale.copy()
    sigma, albedo, g = p.sigma, p.albedo.copy(), p.phase_g
    sh = p.sh_coeffs.copy()
    if fld == "mean":
        mean[comp[0]] += delta
    elif fld == "euler":
        euler[comp[0]] += delta
    elif fld == "scale":
        scale[comp[0]] += delta
    elif fld == "sigma":
        sigma += delta
    elif fld == "albedo":
        albedo[comp[0]] += delta
    elif fld == "phase_g":
        g += delta
    elif fld == "sh":
        sh[comp] += delta
    prims[i] = Primitive(PrimitiveFrame(mean, euler, scale), kind=p.kind,
                         sigma=sigma, albedo=albedo, phase_g=g, sh_coeffs=sh)
    return Mixture(prims)


def axis_value(mixture: Mixture, axis) -> float:
    i, fld, comp, _ = axis
    p = mixture.primitives[i]
    src = {"mean": p.frame.mean, "euler": p.frame.euler, "scale": p.frame.scale,
           "sigma": p.sigma, "albedo": p.albedo, "phase_g": p.phase_g,
           "sh": p.sh_coeffs}[fld]
    return float(src[comp] if comp else src)


def axis_grad(gs: GradientSet, axis) -> float:
    i, fld, comp, _ = axis
    src = {"mean": gs.means[i], "euler": gs.eulers[i], "scale": gs.scales[i],
           "sigma": gs.sigmas[i], "albedo": gs.albedos[i],
           "phase_g": gs.phase_gs[i], "sh": gs.sh[i]}[fld]
    return float(src[comp] if comp else src)


def fd_step(mixture: Mixture, axis) -> float:
    """Central-difference step: 1e-3 relative with a 1e-5 absolute floor."""
    return max(1e-3 * abs(axis_value(mixture, axis)), 1e-5)


_BACKWARDS = {"transmittance": backward_transmittance,
              "vprf": backward_vprf,
              "vppt": backward_vppt}


def _primal(integrator, scene, camera, settings):
    if integrator == "transmittance":
        return render_transmittance(scene, camera, settings)
    if integrator == "vprf":
        return render_vprf(scene, camera, settings)
    if integrator == "vppt":
        return render_vppt(scene, camera, settings)
    raise InvalidParameterError(f"unknown integrator {integrator!r}")


def default_grad_image(camera):
    """Fixed smooth non-uniform adjoint; breaks symmetries so partials
    that would cancel under a flat weighting stay observable."""
    h, w = camera.height, camera.width
    y, x, c = np.mgrid[0:h, 0:w, 0:3]
    return 1.0 + 0.5 * np.sin(0.7 * x + 0.3 * y + 1.1 * c)


def gradcheck(scene: Scene, camera, settings=None, integrator="vprf",
              grad_image=None, rel_tol=1e-3, grad_floor=1e-6):
    """Compare every parameter partial against central finite differences.

    Returns a dict with per-parameter rows and the pass fraction over the
    partials whose analytic magnitude clears grad_floor; smaller partials
    are reported as below-floor and excluded from the fraction.  A
    perturbation that leaves the valid parameter domain (an albedo sitting
    exactly on 0, say) falls back to a one-sided difference.
    """
    if settings is None:
        settings = RenderSettings(spp=1)
    if grad_image is None:
        grad_image = default_grad_image(camera)
    g = _check_grad_image(camera, grad_image)
    gs = _BACKWARDS[integrator](scene, camera, settings, g)

    def loss(mix):
        img = _primal(integrator, Scene(mix, scene.env_radiance), camera, settings)
        return float((g * img).sum())

    f0 = None
    rows = []
    n_checked = 0
    n_passed = 0
    for axis in parameter_axes(scene.mixture):
        h = fd_step(scene.mixture, axis)
        an = axis_grad(gs, axis)
        try:
            fp = loss(perturbed_mixture(scene.mixture, axis, +h))
        except InvalidParameterError:
            fp = None
        try:
            fm = loss(perturbed_mixture(scene.mixture, axis, -h))
        except InvalidParameterError:
            fm = None
        if fp is not None and fm is not None:
            fd = (fp - fm) / (2.0 * h)
        elif fp is None and fm is None:
            fd = float("nan")
        else:
            if f0 is None:
                f0 = loss(scene.mixture)
            fd = (fp - f0) / h if fp is not None else (f0 - fm) / h
        if abs(an) <= grad_floor:
            rows.append({"param": axis[3], "grad": an, "fd": fd,
                         "rel_err": 0.0, "status": "below-floor"})
            continue
        rel = abs(an - fd) / max(abs(fd), grad_floor)
        ok = bool(rel < rel_tol)
        n_checked += 1
        n_passed += ok
        rows.append({"param": axis[3], "grad": an, "fd": fd,
                     "rel_err": rel, "status": "pass" if ok else "FAIL"})
    frac = n_passed / n_checked if n_checked else 1.0
    return {"rows": rows, "n_checked": n_checked, "n_passed": n_passed,
            "fraction": frac, "integrator": integrator}


__all__ = [
    "GradientSet", "ReplayContext", "backward_transmittance", "backward_vprf",
    "backward_vppt", "replay_vppt", "gradcheck", "parameter_axes",
    "perturbed_mixture", "axis_value", "axis_grad", "fd_step",
    "default_grad_image",
]
