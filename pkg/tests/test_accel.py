import numpy as np
import pytest

from volprim.accel import ShellMode, build_bvh, icosphere, next_shell_event, shell_mesh
from volprim.errors import InvalidParameterError
from volprim.geometry import PrimitiveFrame, make_ray, ray_ellipsoid_intersect
from volprim.kernels import KernelKind
from volprim.medium import Mixture, Primitive
from .conftest import brute_force_intervals, random_mixture, random_ray

GAUSS = KernelKind.GAUSSIAN


def ball(mean, radius=1.0, sigma=1.0):
    # k_support 3 makes the shell radius 3*scale; scale so the shell is `radius`.
    return Primitive(frame=PrimitiveFrame(np.asarray(mean, float), np.zeros(3),
                                          np.full(3, radius / 3.0)),
                     kind=GAUSS, sigma=sigma)


def test_singleton_tree():
    bvh = build_bvh(Mixture([ball([0, 0, 0])]))
    assert len(bvh.node_left) == 1
    assert bvh.node_left[0] == -1


def test_shell_mode_validation():
    with pytest.raises(InvalidParameterError):
        ShellMode("weird")
    with pytest.raises(InvalidParameterError):
        ShellMode.icosphere(7)


def test_icosphere_counts():
    for s, faces in [(0, 20), (1, 80), (2, 320)]:
        v, f = icosphere(s)
        assert len(f) == faces
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)


def test_bvh_hit_sets_match_brute_force(rng):
    m = random_mixture(rng, 200, GAUSS, center_scale=3.0, scale_range=(0.05, 0.6))
    bvh = build_bvh(m)
    for _ in range(200):
        ray = random_ray(rng, center_scale=3.0, spread=6.0)
        got = {(pid, round(t0, 9), round(t1, 9)) for pid, t0, t1 in bvh.all_intervals(ray)}
        want = {(pid, round(t0, 9), round(t1, 9))
                for pid, t0, t1 in brute_force_intervals(m, ray)}
        assert got == want


def test_next_event_two_disjoint_shells():
    m = Mixture([ball([5, 0, 0]), ball([2, 0, 0])])
    bvh = build_bvh(m)
    ray = make_ray([0, 0, 0], [1, 0, 0])
    ev = next_shell_event(bvh, ray, 0.0)
    assert ev is not None
    pid, t0, t1 = ev
    assert pid == 1 and t0 == pytest.approx(1.0) and t1 == pytest.approx(3.0)
    ev2 = next_shell_event(bvh, ray, t0)
    assert ev2[0] == 0 and ev2[1] == pytest.approx(4.0)


def test_next_event_miss():
    bvh = build_bvh(Mixture([ball([0, 10, 0])]))
    ray = make_ray([0, 0, 0], [1, 0, 0])
    assert next_shell_event(bvh, ray, 0.0) is None


def test_next_event_ordering_matches_brute_force(rng):
    m = random_mixture(rng, 60, GAUSS, center_scale=2.0, scale_range=(0.1, 0.8))
    bvh = build_bvh(m)
    for _ in range(50):
        ray = random_ray(rng, center_scale=2.0, spread=5.0)
        want = brute_force_intervals(m, ray)
        got = []
        seen = set()
        while True:
            ev = next_shell_event(bvh, ray, -np.inf, frozenset(seen))
            if ev is None:
                break
            got.append(ev)
            seen.add(ev[0])
        assert [(p, round(a, 9), round(b, 9)) for p, a, b in got] == \
            [(p, round(a, 9), round(b, 9)) for p, a, b in want]


def test_exclude_skips_primitive():
    m = Mixture([ball([2, 0, 0]), ball([5, 0, 0])])
    bvh = build_bvh(m)
    ray = make_ray([0, 0, 0], [1, 0, 0])
    ev = next_shell_event(bvh, ray, 0.0, exclude=frozenset({0}))
    assert ev[0] == 1


def test_mesh_mode_resolves_analytic_intervals(rng):
    m = random_mixture(rng, 10, GAUSS, center_scale=1.5, scale_range=(0.2, 0.7))
    bvh_mesh = build_bvh(m, ShellMode.icosphere(3))
    hits = 0
    for _ in range(100):
        ray = random_ray(rng, center_scale=1.5, spread=4.0)
        for pid, t0, t1 in bvh_mesh.all_intervals(ray):
            p = m[pid]
            exact = ray_ellipsoid_intersect(ray, p.frame, p.support)
            assert exact is not None
            assert t0 == exact[0] and t1 == exact[1]
            hits += 1
    assert hits > 50


def test_mesh_mode_converges_to_analytic(rng):
    # Fraction of analytic hits nominated by the mesh grows with subdivision.
    m = random_mixture(rng, 8, GAUSS, center_scale=1.0, scale_range=(0.2, 0.6))
    rays = [random_ray(rng, center_scale=1.0, spread=3.0) for _ in range(300)]
    analytic = build_bvh(m)
    exact_counts = sum(len(analytic.all_intervals(r)) for r in rays)
    fractions = []
    for subdiv in (0, 2):
        bvh = build_bvh(m, ShellMode.icosphere(subdiv))
        got = sum(len(bvh.all_intervals(r)) for r in rays)
        fractions.append(got / exact_counts)
    assert fractions[0] <= fractions[1] <= 1.0
    assert fractions[1] > 0.95


def test_shell_mesh_vertices_on_ellipsoid(rng):
    f = PrimitiveFrame([0.5, -1.0, 0.2], rng.uniform(-1, 1, 3), [0.5, 1.0, 2.0])
    tris = shell_mesh(f, 3.0, 1)
    from volprim.geometry import covariance_from_frame
    inv = np.linalg.inv(covariance_from_frame(f))
    verts = tris.reshape(-1, 3)
    d = np.einsum("ij,jk,ik->i", verts - f.mean, inv, verts - f.mean)
    assert np.allclose(d, 9.0, atol=1e-9)
