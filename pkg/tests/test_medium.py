import numpy as np
import pytest
from scipy import integrate, stats

from volprim.errors import InvalidParameterError, UndefinedPointError
from volprim.geometry import PrimitiveFrame
from volprim.kernels import KernelKind, eval_kernel
from volprim.medium import (
    Mixture,
    Primitive,
    albedo_at,
    extinction_at,
    hg_phase,
    phase_eval,
    phase_sample,
)
from volprim.rng import PathRNG
from .conftest import random_mixture, random_primitive, random_unit

GAUSS = KernelKind.GAUSSIAN


def unit_prim(mean=(0, 0, 0), sigma=1.0, albedo=(1, 1, 1), g=0.0):
    return Primitive(
        frame=PrimitiveFrame(np.asarray(mean, float), np.zeros(3), np.ones(3)),
        kind=GAUSS, sigma=sigma, albedo=np.asarray(albedo, float), phase_g=g)


def test_extinction_empty_is_zero():
    assert extinction_at(Mixture([]), [0.0, 0.0, 0.0]) == 0.0


def test_extinction_single_term():
    p = unit_prim(sigma=2.5)
    x = np.array([0.3, -0.2, 0.1])
    got = extinction_at(Mixture([p]), x)
    assert got == pytest.approx(2.5 * eval_kernel(GAUSS, p.frame, x), rel=1e-14)


def test_extinction_two_term_sum(rng):
    m = random_mixture(rng, 2, GAUSS)
    x = rng.uniform(-1, 1, 3)
    per = [p.density(x) for p in m]
    assert extinction_at(m, x) == pytest.approx(per[0] + per[1], abs=1e-12)


def test_mixture_rejects_mixed_kinds(rng):
    a = random_primitive(rng, KernelKind.GAUSSIAN)
    b = random_primitive(rng, KernelKind.EPANECHNIKOV)
    with pytest.raises(InvalidParameterError):
        Mixture([a, b])


def test_albedo_single_primitive(rng):
    p = unit_prim(albedo=(0.2, 0.5, 0.9))
    assert np.allclose(albedo_at(Mixture([p]), [0.1, 0.0, 0.0]), [0.2, 0.5, 0.9])


def test_albedo_shared_value_fixed_point(rng):
    a = np.array([0.3, 0.6, 0.1])
    m = Mixture([unit_prim((0, 0, 0), 1.0, a), unit_prim((0.5, 0, 0), 3.0, a)])
    assert np.allclose(albedo_at(m, [0.2, 0.1, 0.0]), a, atol=1e-12)


def test_albedo_two_term_oracle():
    p1 = unit_prim((0, 0, 0), 1.5, (1.0, 0.0, 0.5))
    p2 = unit_prim((0.4, 0, 0), 0.7, (0.0, 1.0, 0.5))
    m = Mixture([p1, p2])
    x = np.array([0.1, 0.05, -0.2])
    w1, w2 = p1.density(x), p2.density(x)
    oracle = (w1 * p1.albedo + w2 * p2.albedo) / (w1 + w2)
    assert np.allclose(albedo_at(m, x), oracle, atol=1e-14)


def test_albedo_vacuum_raises():
    m = Mixture([Primitive(
        frame=PrimitiveFrame(np.zeros(3), np.zeros(3), np.ones(3)),
        kind=KernelKind.EPANECHNIKOV, sigma=1.0)])
    with pytest.raises(UndefinedPointError):
        albedo_at(m, [100.0, 0.0, 0.0])


def test_albedo_convex_hull(rng):
    m = random_mixture(rng, 5, GAUSS, center_scale=0.5)
    x = rng.uniform(-0.5, 0.5, 3)
    a = albedo_at(m, x)
    albs = np.array([p.albedo for p in m])
    assert np.all(a >= albs.min(axis=0) - 1e-12)
    assert np.all(a <= albs.max(axis=0) + 1e-12)


def test_phase_isotropic_constant():
    m = Mixture([unit_prim(g=0.0)])
    x = np.zeros(3)
    for _ in range(5):
        w_in = random_unit(np.random.default_rng(11))
        w_out = random_unit(np.random.default_rng(17))
        assert phase_eval(m, x, w_in, w_out) == pytest.approx(1.0 / (4 * np.pi), rel=1e-12)


def test_hg_normalizes_on_sphere():
    # 2*pi * integral over cos(theta) of the HG lobe equals 1.
    for g in (-0.7, 0.0, 0.5, 0.9):
        val, _ = integrate.quad(lambda c: 2 * np.pi * hg_phase(g, c), -1, 1, epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-9)


def test_mixture_phase_integrates_to_one(rng):
    # Spherical product quadrature (Gauss-Legendre x uniform phi) of the
    # mixture phase at a point covered by two lobes of different g.
    m = Mixture([unit_prim(g=0.5, albedo=(1, 1, 1)),
                 unit_prim((0.3, 0, 0), 2.0, (0.4, 0.4, 0.4), -0.3)])
    x = np.array([0.1, 0.0, 0.0])
    w_in = np.array([0.0, 0.0, 1.0])
    nodes, weights = np.polynomial.legendre.leggauss(200)
    phis = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
    total = 0.0
    for c, w in zip(nodes, weights):
        s = np.sqrt(1 - c * c)
        for phi in phis:
            w_out = np.array([s * np.cos(phi), s * np.sin(phi), c])
            total += w * (2 * np.pi / len(phis)) * phase_eval(m, x, w_in, w_out)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_phase_sample_pdf_matches_eval(rng):
    m = Mixture([unit_prim(g=0.6), unit_prim((0.2, 0.1, 0), 1.5, (0.8, 0.8, 0.8), -0.2)])
    x = np.array([0.05, 0.02, 0.0])
    w_in = random_unit(rng)
    prng = PathRNG(123, 7)
    for _ in range(50):
        w_out, pdf = phase_sample(m, x, w_in, prng.next_2d())
        assert np.linalg.norm(w_out) == pytest.approx(1.0, abs=1e-12)
        assert pdf == pytest.approx(phase_eval(m, x, w_in, w_out), rel=1e-6)


def test_phase_sample_histogram_chi2(rng):
    # Sampled cos(theta) against the analytic marginal, single HG lobe.
    g = 0.5
    m = Mixture([unit_prim(g=g)])
    x = np.zeros(3)
    w_in = np.array([0.0, 0.0, 1.0])
    n = 200_000
    prng = PathRNG(77, 1)
    cos_samples = np.empty(n)
    for i in range(n):
        w_out, _ = phase_sample(m, x, w_in, prng.next_2d())
        cos_samples[i] = w_out @ w_in
    bins = 128
    edges = np.linspace(-1, 1, bins + 1)
    counts, _ = np.histogram(cos_samples, bins=edges)
    # Expected mass per bin: integral of 2*pi*hg over the bin.
    expected = np.array([
        integrate.quad(lambda c: 2 * np.pi * hg_phase(g, c), lo, hi, epsabs=1e-12)[0]
        for lo, hi in zip(edges[:-1], edges[1:])]) * n
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    p = 1.0 - stats.chi2.cdf(chi2, df=bins - 1)
    assert p > 0.01


def test_primitive_validation():
    f = PrimitiveFrame(np.zeros(3), np.zeros(3), np.ones(3))
    with pytest.raises(InvalidParameterError):
        Primitive(frame=f, kind=GAUSS, sigma=-1.0)
    with pytest.raises(InvalidParameterError):
        Primitive(frame=f, kind=GAUSS, sigma=1.0, albedo=(2.0, 0.0, 0.0))
    with pytest.raises(InvalidParameterError):
        Primitive(frame=f, kind=GAUSS, sigma=1.0, phase_g=1.0)


def test_bounds_and_bounding_sphere(rng):
    m = random_mixture(rng, 6, GAUSS)
    lo, hi = m.bounds()
    assert np.all(lo < hi)
    c, r = m.bounding_sphere()
    for p in m:
        # Mean plus worst-case shell extent stays inside the sphere.
        assert np.linalg.norm(p.frame.mean - c) + p.support * p.frame.scale.max() <= r + 1e-9


def test_shell_truncation_pointwise_bound(rng):
    # Outside a primitive's shell its density contribution is dropped
    # entirely.  The discarded value is at most exp(-4.5) of the kernel
    # peak (attained exactly on the shell boundary of a Gaussian), so the
    # truncated field never differs from the untruncated kernel by more
    # than that anywhere.
    for kind in (GAUSS, KernelKind.EPANECHNIKOV):
        for _ in range(50):
            p = random_primitive(rng, kind)
            u = random_unit(rng)
            r = p.support * 1.0001
            # Point just past the shell along a random whitened direction.
            x = p.frame.mean + p.frame.rotation @ (p.frame.scale * (r * u))
            assert p.density(x) == 0.0
            raw = p.sigma * eval_kernel(kind, p.frame, x)
            cap = np.exp(-4.5) if kind is GAUSS else 0.0
            assert raw <= cap * p.peak_density() + 1e-300
            # Just inside, the primitive contributes.
            xin = p.frame.mean + p.frame.rotation @ (p.frame.scale * (0.999 * p.support * u))
            assert p.density(xin) > 0.0
