"""Inverse reconstruction: bounded Adam, composite image loss, spawning.

The fitting loop treats the renderer as a differentiable black box: each
iteration renders every view, pulls the image-space loss gradient back
through the matching adjoint, adds the analytic regularizer gradients,
and takes one optimizer step per parameter group.

Positivity of sigma and the scale axes is enforced by optimizing their
logarithms; everything that has a hard interval (means inside an inflated
scene box, scale magnitudes, albedo, phase anisotropy) goes through the
bounded step rule: a raw Adam update that would cross a bound instead
moves the value to the midpoint between its current position and that
bound, and the moment/step state of that entry is cleared.  Repeated
violations approach the bound geometrically without reaching it, which
plays better with the moment estimates than a hard clamp.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d

from .adjoint import (GradientSet, backward_transmittance, backward_vppt,
                      backward_vprf)
from .cameras import Camera
from .errors import ContractViolationError, InvalidParameterError
from .geometry import PrimitiveFrame
from .integrators import (RenderSettings, Scene, render_transmittance,
                          render_vppt, render_vprf)
from .kernels import KernelKind, kernel_peak
from .medium import Mixture, Primitive

__all__ = [
    "AdamState", "Bounds", "LossConfig", "LossResult", "FitConfig",
    "FitResult", "bounded_adam_step", "composite_loss", "spawn_primitives",
    "fit", "psnr",
]


# ---------------------------------------------------------------------------
# Bounded Adam


@dataclass
class AdamState:
    """Per-entry Adam moments with independent step counts.

    Step counts are per entry (not global) because the bounded update rule
    resets individual entries; bias correction then restarts for exactly
    the entries that were re-seeded at a bound midpoint.
    """

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, x, lr, **kw):
        x = np.asarray(x, dtype=np.float64)
        return cls(np.zeros_like(x), np.zeros_like(x),
                   np.zeros(x.shape, dtype=np.int64), lr, **kw)

    def check(self):
        if not (np.all(np.isfinite(self.m)) and np.all(np.isfinite(self.v))):
            raise ContractViolationError("optimizer moments must stay finite")
        if np.any(self.v < 0.0):
            raise ContractViolationError("second moment went negative")


@dataclass
class Bounds:
    """Optional [lo, hi] interval, scalar or broadcastable per entry."""

    lo: object = None
    hi: object = None

    def __post_init__(self):
        if self.lo is not None and self.hi is not None:
            if not np.all(np.asarray(self.lo) < np.asarray(self.hi)):
                raise InvalidParameterError("bounds need lo < hi")


def bounded_adam_step(params, grads, state: AdamState, bounds: Bounds = None):
    """One Adam update; bound crossings land at the current-to-bound midpoint.

    Returns the updated parameter array; `state` is advanced in place, with
    (m, v, t) zeroed at every entry whose raw step crossed a bound.
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ContractViolationError("params, grads and state shapes must align")
    lo = None if bounds is None else bounds.lo
    hi = None if bounds is None else bounds.hi
    if lo is not None and np.any(p < lo):
        raise ContractViolationError("parameter already below its lower bound")
    if hi is not None and np.any(p > hi):
        raise ContractViolationError("parameter already above its upper bound")

    state.t = state.t + 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    out = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)

    crossed = np.zeros(p.shape, dtype=bool)
    # the midpoint itself can round onto the bound once the gap shrinks to
    # one ulp, so land it on the adjacent representable value instead
    if lo is not None:
        below = out < lo
        mid = np.minimum(np.maximum(0.5 * (p + lo),
                                    np.nextafter(lo, np.inf)), p)
        out = np.where(below, mid, out)
        crossed |= below
    if hi is not None:
        above = out > hi
        mid = np.maximum(np.minimum(0.5 * (p + hi),
                                    np.nextafter(hi, -np.inf)), p)
        out = np.where(above, mid, out)
        crossed |= above
    if np.any(crossed):
        state.m = np.where(crossed, 0.0, state.m)
        state.v = np.where(crossed, 0.0, state.v)
        state.t = np.where(crossed, 0, state.t)
    state.check()
    return out


# ---------------------------------------------------------------------------
# Composite image loss


@dataclass
class LossConfig:
    """Weights and activation thresholds of the reconstruction loss.

    lam blends mean-absolute error against structural dissimilarity.  The
    anisotropy term sums min/max scale-axis ratios of primitives already
    past ani_threshold in max/min; the density term sums sigma over scale
    volume for primitives smaller than d_volume_ratio of the scene box.
    """

    lam: float = 0.8
    w_ani: float = 1e-3
    w_d: float = 1e-4
    ani_threshold: float = 10.0
    d_volume_ratio: float = 1e-6
    window: int = 11
    window_sigma: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidParameterError("lam must lie in [0, 1]")
        if self.w_ani < 0.0 or self.w_d < 0.0:
            raise InvalidParameterError("regularizer weights must be >= 0")


@dataclass
class LossResult:
    value: float
    grad_image: np.ndarray
    direct: GradientSet  # analytic regularizer gradients (scales, sigmas)
    parts: dict


def _ssim_kernel(n, sigma):
    r = np.arange(n) - (n - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _blur(img, k):
    # zero padding keeps the separable filter self-adjoint, so the same
    # operator serves forward and backward
    out = correlate1d(img, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _dssim_and_grad(x, y, k):
    """(1 - SSIM)/2 over all pixels and channels, plus d/dx."""
    n_total = x.size
    total = 0.0
    grad = np.empty_like(x)
    for c in range(x.shape[2]):
        xc = x[:, :, c]
        yc = y[:, :, c]
        mx = _blur(xc, k)
        my = _blur(yc, k)
        sxx = _blur(xc * xc, k) - mx * mx
        syy = _blur(yc * yc, k) - my * my
        sxy = _blur(xc * yc, k) - mx * my
        a1 = 2.0 * mx * my + _C1
        a2 = 2.0 * sxy + _C2
        b1 = mx * mx + my * my + _C1
        b2 = sxx + syy + _C2
        s = (a1 * a2) / (b1 * b2)
        total += s.sum()
        # pointwise partials, then one more pass through the (self-adjoint)
        # window for each filtered quantity feeding s
        g_mx = (2.0 * my * a2 - my * a1 * 2.0) / (b1 * b2) \
            - s / b1 * 2.0 * mx + s / b2 * 2.0 * mx
        g_sxx = -s / b2
        g_sxy = 2.0 * a1 / (b1 * b2)
        grad[:, :, c] = (_blur(g_mx, k)
                        + 2.0 * xc * _blur(g_sxx, k)
                        + yc * _blur(g_sxy, k))
    mean_ssim = total / n_total
    dssim = 0.5 * (1.0 - mean_ssim)
    return dssim, grad * (-0.5 / n_total)


def composite_loss(rendered, target, mixture: Mixture, cfg: LossConfig = None):
    """Scalar loss, its image-space adjoint, and direct parameter terms.

    The returned grad_image feeds a renderer backward pass; the returned
    GradientSet carries the regularizer gradients, which touch only scale
    and sigma and bypass rendering entirely.
    """
    if cfg is None:
        cfg = LossConfig()
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 3 or x.shape[2] != 3:
        raise ContractViolationError(
            f"images must share one (h, w, 3) shape, got {x.shape} vs {y.shape}")

    diff = x - y
    l1 = np.abs(diff).mean()
    grad = cfg.lam * np.sign(diff) / diff.size
    # dssim is always evaluated so metrics can report SSIM even for pure-L1
    # fits; its gradient only enters the adjoint when it carries weight
    k = _ssim_kernel(cfg.window, cfg.window_sigma)
    dssim, g_dssim = _dssim_and_grad(x, y, k)
    if cfg.lam < 1.0:
        grad = grad + (1.0 - cfg.lam) * g_dssim

    direct = GradientSet.zeros(mixture)
    ani = 0.0
    dens = 0.0
    n = len(mixture)
    if n:
        scales = np.stack([p.frame.scale for p in mixture])
        sigmas = np.array([p.sigma for p in mixture])
        lo_i = np.argmin(scales, axis=1)
        hi_i = np.argmax(scales, axis=1)
        rows = np.arange(n)
        s_lo = scales[rows, lo_i]
        s_hi = scales[rows, hi_i]
        active = s_hi / s_lo > cfg.ani_threshold
        if cfg.w_ani > 0.0 and np.any(active):
            ani = cfg.w_ani * float((s_lo[active] / s_hi[active]).sum())
            ga = np.zeros((n, 3))
            ga[rows[active], lo_i[active]] = cfg.w_ani / s_hi[active]
            ga[rows[active], hi_i[active]] = \
                -cfg.w_ani * s_lo[active] / s_hi[active] ** 2
            direct.scales += ga

        lo, hi = mixture.bounds()
        scene_vol = float(np.prod(hi - lo))
        vol = scales.prod(axis=1)
        small = vol < cfg.d_volume_ratio * scene_vol
        if cfg.w_d > 0.0 and np.any(small):
            dens = cfg.w_d * float((sigmas[small] / vol[small]).sum())
            direct.sigmas[small] += cfg.w_d / vol[small]
            direct.scales[small] -= \
                cfg.w_d * (sigmas[small] / vol[small])[:, None] / scales[small]

    value = cfg.lam * l1 + (1.0 - cfg.lam) * dssim + ani + dens
    return LossResult(float(value), grad, direct,
                      {"l1": float(l1), "dssim": float(dssim),
                       "ani": float(ani), "density": float(dens)})


# ---------------------------------------------------------------------------
# Spawning and pruning


def spawn_primitives(mixture: Mixture, count: int, rng) -> Mixture:
    """Append `count` seeds placed uniformly on the current bounding sphere.

    New primitives start small and faint so they perturb the current fit
    as little as possible; existing primitives are carried over untouched.
    """
    if len(mixture) == 0:
        raise InvalidParameterError("cannot spawn onto an empty mixture")
    if count < 0:
        raise InvalidParameterError("count must be >= 0")
    if count == 0:
        return Mixture(list(mixture))
    center, radius = mixture.bounding_sphere()
    kind = mixture.kind
    new = list(mixture)
    for _ in range(count):
        v = rng.normal(size=3)
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            v, nv = np.array([0.0, 0.0, 1.0]), 1.0
        mean = center + radius * v / nv
        new.append(Primitive(
            PrimitiveFrame(mean, np.zeros(3), np.full(3, 0.05 * radius)),
            kind=kind, sigma=0.05, albedo=np.full(3, 0.5),
            phase_g=0.0, sh_coeffs=np.zeros((3, 1))))
    return Mixture(new)


def _prune(mixture: Mixture, threshold: float) -> Mixture:
    """Drop primitives whose peak extinction fell below threshold.

    Always keeps at least one primitive so the fit cannot render vacuum.
    """
    peaks = [p.sigma * kernel_peak(p.kind, p.frame) for p in mixture]
    keep = [p for p, pk in zip(mixture, peaks) if pk >= threshold]
    if not keep:
        keep = [mixture[int(np.argmax(peaks))]]
    return Mixture(keep)


# ---------------------------------------------------------------------------
# Fitting loop


_RENDERERS = {
    "transmittance": (render_transmittance, backward_transmittance),
    "vprf": (render_vprf, backward_vprf),
    "vppt": (render_vppt, backward_vppt),
}

_ALL_FIELDS = ("mean", "euler", "scale", "sigma", "albedo", "phase_g", "sh")


@dataclass
class FitConfig:
    iters: int = 300
    integrator: str = "transmittance"
    settings: RenderSettings = None
    loss: LossConfig = field(default_factory=LossConfig)
    lr_mean: float = 1e-2
    lr_euler: float = 5e-3
    lr_scale: float = 1e-2   # applied in log-space
    lr_sigma: float = 1e-2   # applied in log-space
    lr_albedo: float = 5e-3
    lr_phase: float = 5e-3
    lr_sh: float = 2.5e-3
    optimize_fields: tuple = ("mean", "euler", "scale", "sigma")
    spawn_every: int = 100
    spawn_frac: float = 0.1
    budget: int = None       # None disables spawning
    prune_threshold: float = 1e-6
    bbox: tuple = None       # ((lo3), (hi3)); default 1.2x initial extent
    env_radiance: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    psnr_peak: float = 1.0
    target_psnr: float = None

    def __post_init__(self):
        if self.iters < 1:
            raise InvalidParameterError("iters must be >= 1")
        if self.integrator not in _RENDERERS:
            raise InvalidParameterError(
                f"integrator must be one of {sorted(_RENDERERS)}, "
                f"got {self.integrator!r}")
        unknown = set(self.optimize_fields) - set(_ALL_FIELDS)
        if unknown:
            raise InvalidParameterError(f"unknown optimize fields {sorted(unknown)}")


@dataclass
class FitResult:
    mixture: Mixture
    metrics: list
    best_loss: float
    best_iteration: int
    diverged: bool = False


def psnr(rendered, target, peak=1.0):
    mse = float(np.mean((np.asarray(rendered) - np.asarray(target)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


class _Params:
    """Mixture parameters flattened into optimizer groups.

    sigma and the scale axes live in log space here; sh is padded to the
    widest coefficient count with a mask so narrower primitives keep their
    own band limit when the mixture is rebuilt.
    """

    def __init__(self, mixture: Mixture):
        self.kind = mixture.kind
        self.n_coeffs = [p.sh_coeffs.shape[1] for p in mixture]
        width = max(self.n_coeffs)
        n = len(mixture)
        self.mean = np.stack([p.frame.mean for p in mixture])
        self.euler = np.stack([p.frame.euler for p in mixture])
        self.log_scale = np.log(np.stack([p.frame.scale for p in mixture]))
        self.log_sigma = np.log(np.maximum(
            np.array([p.sigma for p in mixture]), 1e-12))
        self.albedo = np.stack([p.albedo for p in mixture])
        self.phase_g = np.array([p.phase_g for p in mixture])
        self.sh = np.zeros((n, 3, width))
        for i, p in enumerate(mixture):
            self.sh[i, :, :self.n_coeffs[i]] = p.sh_coeffs

    def build(self) -> Mixture:
        prims = []
        for i in range(self.mean.shape[0]):
            prims.append(Primitive(
                PrimitiveFrame(self.mean[i], self.euler[i],
                               np.exp(self.log_scale[i])),
                kind=self.kind, sigma=float(np.exp(self.log_sigma[i])),
                albedo=self.albedo[i], phase_g=float(self.phase_g[i]),
                sh_coeffs=self.sh[i, :, :self.n_coeffs[i]]))
        return Mixture(prims)

    def chain(self, gs: GradientSet):
        """Rendered+direct gradients mapped into optimizer space."""
        return {
            "mean": gs.means,
            "euler": gs.eulers,
            "scale": gs.scales * np.exp(self.log_scale),
            "sigma": gs.sigmas * np.exp(self.log_sigma),
            "albedo": gs.albedos,
            "phase_g": gs.phase_gs,
            "sh": gs.sh,
        }


def _clip_into_bounds(params: _Params, bounds: dict):
    """Nudge freshly built parameters inside the hard intervals.

    The bounded step rule requires starting positions inside the bounds;
    spawned seeds sit on the current bounding sphere, which can poke past
    the fixed box once the fit has pushed primitives to its edge.
    """
    b = bounds["mean"]
    params.mean[...] = np.clip(params.mean, b.lo, b.hi)
    b = bounds["scale"]
    params.log_scale[...] = np.clip(params.log_scale, b.lo, b.hi)
    params.albedo[...] = np.clip(params.albedo, 0.0, 1.0)
    params.phase_g[...] = np.clip(params.phase_g, -0.999, 0.999)


def _make_states(params: _Params, cfg: FitConfig, bbox, diag):
    lrs = {"mean": cfg.lr_mean, "euler": cfg.lr_euler, "scale": cfg.lr_scale,
           "sigma": cfg.lr_sigma, "albedo": cfg.lr_albedo,
           "phase_g": cfg.lr_phase, "sh": cfg.lr_sh}
    arrays = {"mean": params.mean, "euler": params.euler,
              "scale": params.log_scale, "sigma": params.log_sigma,
              "albedo": params.albedo, "phase_g": params.phase_g,
              "sh": params.sh}
    lo, hi = bbox
    bounds = {
        "mean": Bounds(np.broadcast_to(lo, params.mean.shape),
                       np.broadcast_to(hi, params.mean.shape)),
        "euler": None,
        "scale": Bounds(np.log(1e-4 * diag), np.log(0.5 * diag)),
        "sigma": None,
        "albedo": Bounds(0.0, 1.0),
        "phase_g": Bounds(-0.999, 0.999),
        "sh": None,
    }
    states = {f: AdamState.zeros_like(arrays[f], lrs[f])
              for f in cfg.optimize_fields}
    return states, bounds


def _single_start(bbox, kind):
    lo, hi = np.asarray(bbox[0], float), np.asarray(bbox[1], float)
    diag = float(np.linalg.norm(hi - lo))
    return Mixture([Primitive(
        PrimitiveFrame(0.5 * (lo + hi), np.zeros(3), np.full(3, diag / 8.0)),
        kind=kind, sigma=1.0, albedo=np.zeros(3), phase_g=0.0,
        sh_coeffs=np.zeros((3, 1)))])


def fit(targets, initial, config: FitConfig = None) -> FitResult:
    """Reconstruct a mixture from rendered views by adjoint descent.

    targets: list of (image, camera) pairs rendered under the same
    environment the config specifies.  initial: a Mixture, or "single"
    (requires config.bbox) to start from one centered primitive.  Returns
    the best-loss mixture seen, with per-iteration metrics; a non-finite
    loss aborts and returns the last good state.
    """
    cfg = config if config is not None else FitConfig()
    if not targets:
        raise InvalidParameterError("need at least one target view")
    views = []
    for img, cam in targets:
        img = np.asarray(img, dtype=np.float64)
        if not isinstance(cam, Camera):
            raise InvalidParameterError("each target needs a Camera instance")
        if img.shape != (cam.height, cam.width, 3):
            raise ContractViolationError(
                f"target image {img.shape} does not match its camera "
                f"({cam.height}, {cam.width}, 3)")
        views.append((img, cam))

    if isinstance(initial, str):
        if initial != "single":
            raise InvalidParameterError(f"unknown start mode {initial!r}")
        if cfg.bbox is None:
            raise InvalidParameterError('"single" start requires config.bbox')
        mixture = _single_start(cfg.bbox, KernelKind.GAUSSIAN)
    else:
        mixture = initial
    if len(mixture) == 0:
        raise InvalidParameterError("initial mixture must be non-empty")

    if cfg.bbox is not None:
        lo = np.asarray(cfg.bbox[0], float)
        hi = np.asarray(cfg.bbox[1], float)
    else:
        lo, hi = mixture.bounds()
    center = 0.5 * (lo + hi)
    half = np.maximum(0.6 * (hi - lo), 1e-6)  # 1.2x box for the mean bounds
    bbox = (center - half, center + half)
    diag = float(np.linalg.norm(hi - lo))

    settings = cfg.settings if cfg.settings is not None else RenderSettings(spp=1)
    render, backward = _RENDERERS[cfg.integrator]
    env = np.asarray(cfg.env_radiance, dtype=np.float64)
    spawn_rng = np.random.default_rng(cfg.seed)

    params = _Params(mixture)
    states, bounds = _make_states(params, cfg, bbox, diag)
    _clip_into_bounds(params, bounds)
    mixture = params.build()
    best = (np.inf, mixture, 0)
    metrics = []
    t_start = time.perf_counter()

    for it in range(cfg.iters):
        reshaped = cfg.budget is not None and it > 0 and it % cfg.spawn_every == 0
        if reshaped:
            mixture = _prune(mixture, cfg.prune_threshold)
            room = cfg.budget - len(mixture)
            if room > 0:
                add = min(room, int(np.ceil(cfg.spawn_frac * len(mixture))))
                mixture = spawn_primitives(mixture, add, spawn_rng)
            params = _Params(mixture)
            states, bounds = _make_states(params, cfg, bbox, diag)
            _clip_into_bounds(params, bounds)
            mixture = params.build()

        scene = Scene(mixture, env)
        total_loss = 0.0
        grads = GradientSet.zeros(mixture)
        mse = 0.0
        ssim = 0.0
        for img, cam in views:
            rendered = render(scene, cam, settings)
            res = composite_loss(rendered, img, mixture, cfg.loss)
            total_loss += res.value / len(views)
            mse += float(np.mean((rendered - img) ** 2)) / len(views)
            ssim += (1.0 - 2.0 * res.parts["dssim"]) / len(views)
            if not np.isfinite(res.value):
                break  # skip the backward pass; gradients would be garbage
            gs = backward(scene, cam, settings, res.grad_image)
            gs.add_(res.direct)
            grads.add_(gs.scaled(1.0 / len(views)))

        quality = (float("inf") if mse == 0.0
                   else 10.0 * np.log10(cfg.psnr_peak ** 2 / mse))
        metrics.append({"iteration": it, "loss": total_loss, "psnr": quality,
                        "ssim": ssim, "n_primitives": len(mixture),
                        "wall_time": time.perf_counter() - t_start})

        if not np.isfinite(total_loss):
            good = best[1] if np.isfinite(best[0]) else mixture
            return FitResult(good, metrics, best[0], best[2], diverged=True)
        if total_loss < best[0]:
            best = (total_loss, mixture, it)
        if cfg.target_psnr is not None and quality >= cfg.target_psnr:
            break

        space = params.chain(grads)
        arrays = {"mean": params.mean, "euler": params.euler,
                  "scale": params.log_scale, "sigma": params.log_sigma,
                  "albedo": params.albedo, "phase_g": params.phase_g,
                  "sh": params.sh}
        for f in cfg.optimize_fields:
            arrays[f][...] = bounded_adam_step(arrays[f], space[f],
                                               states[f], bounds[f])
        mixture = params.build()

    return FitResult(best[1], metrics, best[0], best[2])
