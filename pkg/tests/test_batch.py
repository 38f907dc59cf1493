import numpy as np
import pytest

from volprim import batch
from volprim.accel import build_bvh
from volprim.geometry import make_ray
from volprim.kernels import KernelKind, eval_kernel
from volprim.medium import extinction_at, albedo_at, phase_eval, phase_sample, hg_sample_cos
from volprim.sampling import SamplingMode, sample_distance
from volprim.sh import eval_sh_basis, eval_sh_basis_many
from volprim.tracing import transmittance, ray_transmittance
from .conftest import random_mixture, random_unit

GAUSS = KernelKind.GAUSSIAN
EPAN = KernelKind.EPANECHNIKOV


def random_rays(rng, n, spread=4.0):
    o = rng.uniform(-spread, spread, (n, 3))
    tgt = rng.uniform(-1, 1, (n, 3))
    d = tgt - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return o, d


@pytest.mark.parametrize("kind", [GAUSS, EPAN])
def test_transmittance_matches_scalar(rng, kind):
    m = random_mixture(rng, 7, kind)
    arr = batch.MixtureArrays(m)
    bvh = build_bvh(m)
    o, d = random_rays(rng, 64)
    got = batch.transmittance_many(arr, o, d)
    for i in range(64):
        ray = make_ray(o[i], d[i])
        assert got[i] == pytest.approx(ray_transmittance(bvh, m, ray), rel=1e-12)


@pytest.mark.parametrize("kind", [GAUSS, EPAN])
def test_extinction_and_kernel_match_scalar(rng, kind):
    m = random_mixture(rng, 6, kind)
    arr = batch.MixtureArrays(m)
    pts = rng.uniform(-2, 2, (200, 3))
    ext = batch.extinction_many(arr, pts)
    ker = batch.eval_kernel_many(arr, pts)
    for i in range(200):
        assert ext[i] == pytest.approx(extinction_at(m, pts[i]), rel=1e-12, abs=1e-300)
        for j, p in enumerate(m):
            assert ker[i, j] == pytest.approx(
                eval_kernel(kind, p.frame, pts[i]), rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("kind", [GAUSS, EPAN])
def test_interval_transmittance_matches_scalar(rng, kind):
    m = random_mixture(rng, 5, kind)
    arr = batch.MixtureArrays(m)
    bvh = build_bvh(m)
    o, d = random_rays(rng, 32)
    lo = rng.uniform(0.5, 2.0, 32)
    hi = lo + rng.uniform(0.5, 4.0, 32)
    got = np.exp(-batch.clipped_depths(
        arr, batch.line_coeffs(arr, o, d), lo[:, None], hi[:, None]).sum(axis=1))
    for i in range(32):
        want = transmittance(bvh, m, o[i] + lo[i] * d[i], o[i] + hi[i] * d[i])
        assert got[i] == pytest.approx(want, rel=1e-11)


@pytest.mark.parametrize("kind,mode", [
    (GAUSS, SamplingMode.ANALYTIC_INVERT),
    (EPAN, SamplingMode.ANALYTIC_INVERT),
])
def test_sample_distance_matches_scalar(rng, kind, mode):
    m = random_mixture(rng, 6, kind, center_scale=0.8)
    arr = batch.MixtureArrays(m)
    bvh = build_bvh(m)
    o, d = random_rays(rng, 128)
    xi = rng.uniform(0.02, 0.98, 128)
    cf = batch.line_coeffs(arr, o, d)
    res = batch.sample_distance_table(arr, cf, xi)
    for i in range(128):
        ev = sample_distance(bvh, m, make_ray(o[i], d[i]), float(xi[i]), mode)
        assert res["escape"][i] == (not ev.is_scatter)
        if ev.is_scatter:
            # Both solve the same depth equation; residual tolerance applies.
            assert res["t"][i] == pytest.approx(ev.t, abs=5e-6)
        else:
            assert np.exp(-res["total"][i]) == pytest.approx(ev.transmittance, rel=1e-10)


def test_sample_distance_uniform_mode_matches_scalar(rng):
    m = random_mixture(rng, 5, GAUSS, center_scale=0.6)
    arr = batch.MixtureArrays(m)
    bvh = build_bvh(m)
    o, d = random_rays(rng, 64)
    xi = rng.uniform(0.05, 0.95, 64)
    cf = batch.line_coeffs(arr, o, d)
    res = batch.sample_distance_table(arr, cf, xi, uniform=True)
    for i in range(64):
        ev = sample_distance(bvh, m, make_ray(o[i], d[i]),
                             float(xi[i]), SamplingMode.BIASED_UNIFORM)
        assert res["escape"][i] == (not ev.is_scatter)
        if ev.is_scatter:
            assert res["t"][i] == pytest.approx(ev.t, rel=1e-9)
            w = res["sigma_t"][i] * np.exp(-res["depth_at"][i])
            assert w == pytest.approx(ev.pdf_or_weight, rel=1e-9)


def test_conditional_sampling_cdf_identity(rng):
    # Conditional draws must satisfy depth(t) = -log(1 - xi (1 - T_total)).
    m = random_mixture(rng, 4, GAUSS, center_scale=0.5)
    arr = batch.MixtureArrays(m)
    o, d = random_rays(rng, 64)
    xi = rng.uniform(0.001, 0.999, 64)
    cf = batch.line_coeffs(arr, o, d)
    res = batch.sample_distance_table(arr, cf, xi, conditional=True)
    hit = ~res["escape"]
    assert hit.sum() > 20
    one_m_t = -np.expm1(-res["total"][hit])
    want = -np.log1p(-xi[hit] * one_m_t)
    assert np.allclose(res["depth_at"][hit], want, atol=1e-9)
    # And the reported depth is really the depth at t.
    dep = batch.clipped_depths(arr, {k: v[hit] for k, v in cf.items()},
                               0.0, res["t"][hit][:, None]).sum(axis=1)
    assert np.allclose(dep, want, atol=1e-8)


@pytest.mark.parametrize("kind", [GAUSS, EPAN])
def test_albedo_and_phase_match_scalar(rng, kind):
    m = random_mixture(rng, 5, kind, center_scale=0.5)
    arr = batch.MixtureArrays(m)
    pts = rng.uniform(-0.6, 0.6, (64, 3))
    ext = batch.extinction_many(arr, pts)
    alb = batch.albedo_many(arr, pts)
    w_in = np.stack([random_unit(rng) for _ in range(64)])
    w_out = np.stack([random_unit(rng) for _ in range(64)])
    pv = batch.phase_eval_many(arr, pts, w_in, w_out)
    checked = 0
    for i in range(64):
        if ext[i] <= 0.0:
            continue
        checked += 1
        assert np.allclose(alb[i], albedo_at(m, pts[i]), rtol=1e-12)
        assert pv[i] == pytest.approx(phase_eval(m, pts[i], w_in[i], w_out[i]), rel=1e-12)
    assert checked > 30


def test_phase_sample_matches_scalar(rng):
    m = random_mixture(rng, 4, GAUSS, center_scale=0.4)
    arr = batch.MixtureArrays(m)
    pts = rng.uniform(-0.4, 0.4, (40, 3))
    ext = batch.extinction_many(arr, pts)
    w_in = np.stack([random_unit(rng) for _ in range(40)])
    u1 = rng.uniform(0.01, 0.99, 40)
    u2 = rng.uniform(0.01, 0.99, 40)
    dirs = batch.phase_sample_many(arr, pts, w_in, u1, u2)
    for i in range(40):
        if ext[i] <= 0.0:
            continue
        want, _ = phase_sample(m, pts[i], w_in[i], (u1[i], u2[i]))
        assert np.allclose(dirs[i], want, atol=1e-10)


def test_hg_cos_matches_scalar(rng):
    gs = rng.uniform(-0.9, 0.9, 50)
    us = rng.uniform(0, 1, 50)
    got = batch.hg_sample_cos_many(gs, us)
    for g, u, c in zip(gs, us, got):
        assert c == pytest.approx(hg_sample_cos(float(g), float(u)), abs=1e-12)


def test_sh_basis_many_matches_scalar(rng):
    dirs = np.stack([random_unit(rng) for _ in range(20)])
    many = eval_sh_basis_many(dirs)
    for i in range(20):
        assert np.allclose(many[i], eval_sh_basis(dirs[i]), atol=1e-15)


def test_segment_table_totals(rng):
    for kind in (GAUSS, EPAN):
        m = random_mixture(rng, 6, kind)
        arr = batch.MixtureArrays(m)
        bvh = build_bvh(m)
        o, d = random_rays(rng, 48)
        cf = batch.line_coeffs(arr, o, d)
        _, _, total = batch.segment_table(arr, cf)
        for i in range(48):
            want = -np.log(ray_transmittance(bvh, m, make_ray(o[i], d[i])))
            assert total[i] == pytest.approx(want, abs=1e-10)


def test_empty_mixture_batches():
    from volprim.medium import Mixture
    arr = batch.MixtureArrays(Mixture([]))
    o = np.zeros((5, 3))
    d = np.tile([1.0, 0, 0], (5, 1))
    assert np.all(batch.transmittance_many(arr, o, d) == 1.0)
    assert np.all(batch.extinction_many(arr, np.zeros((4, 3))) == 0.0)
