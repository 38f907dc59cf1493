import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volprim.errors import InvalidParameterError
from volprim.geometry import (
    PrimitiveFrame,
    Ray,
    covariance_from_frame,
    make_ray,
    ray_ellipsoid_intersect,
    rotation_derivatives,
    rotation_from_euler,
    whiten,
)
from .conftest import random_frame, random_ray


def test_covariance_identity():
    f = PrimitiveFrame(np.zeros(3), np.zeros(3), np.ones(3))
    assert np.allclose(covariance_from_frame(f), np.eye(3))


def test_covariance_diagonal():
    f = PrimitiveFrame(np.zeros(3), np.zeros(3), np.array([2.0, 1.0, 1.0]))
    assert np.allclose(covariance_from_frame(f), np.diag([4.0, 1.0, 1.0]))


def test_covariance_matches_dense_oracle(rng):
    for _ in range(50):
        f = random_frame(rng)
        r = rotation_from_euler(f.euler)
        oracle = r @ np.diag(f.scale**2) @ r.T
        got = covariance_from_frame(f)
        assert np.abs(got - oracle).max() < 1e-12 * max(1.0, np.abs(oracle).max())


def test_covariance_eigenvalues_are_squared_scales(rng):
    f = random_frame(rng)
    eig = np.sort(np.linalg.eigvalsh(covariance_from_frame(f)))
    assert np.allclose(eig, np.sort(f.scale**2), rtol=1e-10)


def test_covariance_cholesky_spd(rng):
    for _ in range(100):
        f = random_frame(rng, scale_range=(1e-3, 10.0))
        np.linalg.cholesky(covariance_from_frame(f))  # raises if not SPD


def test_rotation_orthonormal(rng):
    for _ in range(20):
        r = rotation_from_euler(rng.uniform(-4, 4, 3))
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_rotation_derivatives_match_fd(rng):
    euler = rng.uniform(-2, 2, 3)
    analytic = rotation_derivatives(euler)
    h = 1e-6
    for j in range(3):
        e_plus, e_minus = euler.copy(), euler.copy()
        e_plus[j] += h
        e_minus[j] -= h
        fd = (rotation_from_euler(e_plus) - rotation_from_euler(e_minus)) / (2 * h)
        assert np.abs(analytic[j] - fd).max() < 1e-8


def test_whiten_identity_frame():
    f = PrimitiveFrame(np.zeros(3), np.zeros(3), np.ones(3))
    ray = make_ray([1.0, 2.0, 3.0], [0.0, 0.0, 1.0])
    w = whiten(ray, f)
    assert np.allclose(w.origin, ray.origin)
    assert np.allclose(w.direction, ray.direction)


def test_whiten_pure_translation():
    f = PrimitiveFrame([1.0, 0.0, 0.0], np.zeros(3), np.ones(3))
    ray = make_ray([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    assert np.allclose(whiten(ray, f).origin, np.zeros(3))


def test_whiten_round_trip(rng):
    for _ in range(50):
        f = random_frame(rng)
        ray = random_ray(rng)
        w = whiten(ray, f)
        r = f.rotation
        for t in (0.0, 0.7, 2.5):
            back = r @ (f.scale * w.at(t)) + f.mean
            assert np.abs(back - ray.at(t)).max() < 1e-10


def test_whiten_preserves_parameter(rng):
    f = random_frame(rng)
    ray = random_ray(rng)
    w = whiten(ray, f)
    inv_s = 1.0 / f.scale
    for t in (0.3, 1.9):
        direct = inv_s * (f.rotation.T @ (ray.at(t) - f.mean))
        assert np.allclose(w.at(t), direct, atol=1e-12)


def test_intersect_axis_aligned_sphere():
    f = PrimitiveFrame(np.zeros(3), np.zeros(3), np.ones(3))
    ray = make_ray([-2.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    t0, t1 = ray_ellipsoid_intersect(ray, f, 1.0)
    assert t0 == pytest.approx(1.0, abs=1e-12)
    assert t1 == pytest.approx(3.0, abs=1e-12)


def test_intersect_clear_miss():
    f = PrimitiveFrame(np.zeros(3), np.zeros(3), np.ones(3))
    ray = make_ray([-2.0, 2.0, 0.0], [1.0, 0.0, 0.0])
    assert ray_ellipsoid_intersect(ray, f, 1.0) is None


def test_intersect_plug_back(rng):
    found = 0
    while found < 60:
        f = random_frame(rng)
        ray = random_ray(rng)
        k = float(rng.uniform(0.5, 3.0))
        hit = ray_ellipsoid_intersect(ray, f, k)
        if hit is None:
            continue
        found += 1
        sigma_inv = np.linalg.inv(covariance_from_frame(f))
        for t in hit:
            delta = ray.at(t) - f.mean
            d = delta @ sigma_inv @ delta
            assert d == pytest.approx(k * k, abs=1e-6)


def test_intersect_rigid_invariance(rng):
    for _ in range(30):
        f = random_frame(rng)
        ray = random_ray(rng)
        k = 1.5
        base = ray_ellipsoid_intersect(ray, f, k)
        # Apply one rigid transform to both ray and frame.
        q = rotation_from_euler(rng.uniform(-3, 3, 3))
        shift = rng.uniform(-5, 5, 3)
        ray2 = Ray(q @ ray.origin + shift, q @ ray.direction, ray.t_min, ray.t_max)
        # The rotated frame: R' = Q R with the same scales; recover Euler via matrix.
        rm = q @ f.rotation
        ey = -np.arcsin(np.clip(rm[2, 0], -1, 1))
        ex = np.arctan2(rm[2, 1], rm[2, 2])
        ez = np.arctan2(rm[1, 0], rm[0, 0])
        f2 = PrimitiveFrame(q @ f.mean + shift, [ex, ey, ez], f.scale)
        other = ray_ellipsoid_intersect(ray2, f2, k)
        if base is None:
            assert other is None
        else:
            assert other is not None
            assert np.allclose(base, other, atol=1e-8)


def test_ray_validation():
    with pytest.raises(InvalidParameterError):
        Ray([0, 0, 0], [1, 0, 0], t_min=2.0, t_max=1.0)
    with pytest.raises(InvalidParameterError):
        make_ray([0, 0, 0], [0, 0, 0])
    with pytest.raises(InvalidParameterError):
        PrimitiveFrame(np.zeros(3), np.zeros(3), [1.0, 0.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_intersect_interval_ordering(seed):
    r = np.random.default_rng(seed)
    f = random_frame(r)
    ray = random_ray(r)
    hit = ray_ellipsoid_intersect(ray, f, 2.0)
    if hit is not None:
        assert hit[0] < hit[1]
