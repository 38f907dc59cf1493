"""Bounding-volume hierarchy over primitive shells and ordered traversal.

Shells are the truncation ellipsoids of the primitives (k_support times the
per-axis scale).  The BVH stores one axis-aligned box per primitive; leaf
boxes always bound the analytic ellipsoid, so traversal is watertight with
respect to the analytic shells in both shell modes.  In icosphere mode a
tessellated mesh nominates candidate primitives, but the interval endpoints
handed to integration are always recomputed on the exact ellipsoid,
keeping optical depth free of tessellation bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .geometry import Ray, ellipsoid_aabb, ray_ellipsoid_intersect
from .medium import Mixture

SAH_BUCKETS = 16
LEAF_MAX = 4
MAX_DEPTH = 64


@dataclass(frozen=True)
class ShellMode:
    """Analytic ellipsoid shells, or inscribed icosphere meshes (subdiv 0..4)."""

    kind: str
    subdiv: int = 0

    def __post_init__(self):
        if self.kind not in ("analytic", "icosphere"):
            raise InvalidParameterError(f"unknown shell mode {self.kind!r}")
        if self.kind == "icosphere" and not 0 <= self.subdiv <= 4:
            raise InvalidParameterError(f"icosphere subdiv must be 0..4, got {self.subdiv}")

    @staticmethod
    def analytic() -> "ShellMode":
        return ShellMode("analytic")

    @staticmethod
    def icosphere(subdiv: int) -> "ShellMode":
        return ShellMode("icosphere", subdiv)


# ---------------------------------------------------------------------------
# icosphere meshes


def icosphere(subdiv: int):
    """Unit icosphere (vertices, faces); 20 * 4^subdiv triangles."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdiv):
        cache = {}
        new_faces = []
        verts_list = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                v = verts_list[i] + verts_list[j]
                v = v / np.linalg.norm(v)
                cache[key] = len(verts_list)
                verts_list.append(v)
            return cache[key]

        for f in faces:
            i, j, k = int(f[0]), int(f[1]), int(f[2])
            a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [[i, a, c], [j, b, a], [k, c, b], [a, b, c]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def shell_mesh(frame, k_support: float, subdiv: int):
    """Triangle array (F, 3, 3) of the shell ellipsoid's inscribed icosphere."""
    verts, faces = icosphere(subdiv)
    world = (frame.rotation @ (verts * (k_support * frame.scale)).T).T + frame.mean
    return world[faces]


def _ray_triangles(origin, direction, tris):
    """Moller-Trumbore over a triangle array; returns hit parameters (may be empty)."""
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - tris[:, 0]
    u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = np.einsum("j,ij->i", direction, qvec) * inv_det
    t = np.einsum("ij,ij->i", e2, qvec) * inv_det
    mask = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1.0 + 1e-12)
    return t[mask]


# ---------------------------------------------------------------------------
# BVH build


class Bvh:
    """Binary SAH tree over shell boxes; immutable after build."""

    def __init__(self, mixture: Mixture, mode: ShellMode):
        self.mixture = mixture
        self.mode = mode
        n = len(mixture)
        if n == 0:
            # Empty medium: a single never-hit node keeps traversal trivial.
            self.prim_lo = np.empty((0, 3))
            self.prim_hi = np.empty((0, 3))
            self._meshes = None
            self.node_lo = np.full((1, 3), np.inf)
            self.node_hi = np.full((1, 3), -np.inf)
            self.node_left = np.array([-1])
            self.node_right = np.array([-1])
            self.node_start = np.array([0])
            self.node_count = np.array([0])
            self.order = np.empty(0, dtype=np.int64)
            return
        lo = np.empty((n, 3))
        hi = np.empty((n, 3))
        for i, p in enumerate(mixture):
            lo[i], hi[i] = ellipsoid_aabb(p.frame, p.support)
        self.prim_lo, self.prim_hi = lo, hi
        self._meshes = None
        if mode.kind == "icosphere":
            self._meshes = [shell_mesh(p.frame, p.support, mode.subdiv) for p in mixture]
        self._build()

    # -- construction ------------------------------------------------------

    def _build(self):
        n = len(self.mixture)
        order = np.arange(n)
        centers = 0.5 * (self.prim_lo + self.prim_hi)
        nodes = []  # rows: [lo(3), hi(3)] parallel to meta
        meta = []   # rows: (left, right, start, count); left == -1 marks a leaf

        def node_bounds(idx):
            return self.prim_lo[idx].min(axis=0), self.prim_hi[idx].max(axis=0)

        def build(start, count, depth):
            idx = order[start:start + count]
            blo, bhi = node_bounds(idx)
            node_id = len(nodes)
            nodes.append(np.concatenate([blo, bhi]))
            meta.append([-1, -1, start, count])
            if count <= LEAF_MAX or depth >= MAX_DEPTH:
                return node_id
            axis, split = self._sah_split(idx, centers)
            if split is None:
                # Degenerate spread: median split keeps the tree balanced.
                axis = int(np.argmax(bhi - blo))
                key = centers[idx, axis]
                half = count // 2
                part = np.argpartition(key, half)
                order[start:start + count] = idx[part]
                mid = start + half
            else:
                key = centers[idx, axis] <= split
                n_left = int(key.sum())
                if n_left == 0 or n_left == count:
                    half = count // 2
                    part = np.argpartition(centers[idx, axis], half)
                    order[start:start + count] = idx[part]
                    mid = start + half
                else:
                    order[start:start + count] = np.concatenate([idx[key], idx[~key]])
                    mid = start + n_left
            left = build(start, mid - start, depth + 1)
            right = build(mid, start + count - mid, depth + 1)
            meta[node_id][0] = left
            meta[node_id][1] = right
            return node_id

        build(0, n, 0)
        arr = np.array(nodes)
        self.node_lo = arr[:, :3]
        self.node_hi = arr[:, 3:]
        m = np.array(meta, dtype=np.int64)
        self.node_left, self.node_right = m[:, 0], m[:, 1]
        self.node_start, self.node_count = m[:, 2], m[:, 3]
        self.order = order

    def _sah_split(self, idx, centers):
        """Best (axis, split position) by binned surface-area heuristic."""
        best = (None, None, np.inf)
        lo = self.prim_lo[idx]
        hi = self.prim_hi[idx]
        cen = centers[idx]
        for axis in range(3):
            cmin, cmax = cen[:, axis].min(), cen[:, axis].max()
            if cmax - cmin < 1e-12:
                continue
            edges = np.linspace(cmin, cmax, SAH_BUCKETS + 1)
            which = np.clip(np.searchsorted(edges, cen[:, axis], side="right") - 1,
                            0, SAH_BUCKETS - 1)
            counts = np.zeros(SAH_BUCKETS, dtype=np.int64)
            blo = np.full((SAH_BUCKETS, 3), np.inf)
            bhi = np.full((SAH_BUCKETS, 3), -np.inf)
            for b in range(SAH_BUCKETS):
                sel = which == b
                counts[b] = sel.sum()
                if counts[b]:
                    blo[b] = lo[sel].min(axis=0)
                    bhi[b] = hi[sel].max(axis=0)

            def area(l, h):
                d = np.maximum(h - l, 0.0)
                return 2.0 * (d[..., 0] * d[..., 1] + d[..., 1] * d[..., 2] + d[..., 0] * d[..., 2])

            # Prefix/suffix sweeps give cost of every split plane.
            left_lo = np.minimum.accumulate(blo, axis=0)
            left_hi = np.maximum.accumulate(bhi, axis=0)
            right_lo = np.minimum.accumulate(blo[::-1], axis=0)[::-1]
            right_hi = np.maximum.accumulate(bhi[::-1], axis=0)[::-1]
            nl = np.cumsum(counts)
            nr = np.cumsum(counts[::-1])[::-1]
            for cut in range(SAH_BUCKETS - 1):
                if nl[cut] == 0 or nr[cut + 1] == 0:
                    continue
                cost = nl[cut] * area(left_lo[cut], left_hi[cut]) \
                    + nr[cut + 1] * area(right_lo[cut + 1], right_hi[cut + 1])
                if cost < best[2]:
                    best = (axis, edges[cut + 1], cost)
        return best[0], best[1]

    # -- traversal ---------------------------------------------------------

    def _box_overlap(self, node, origin, inv_dir):
        lo = (self.node_lo[node] - origin) * inv_dir
        hi = (self.node_hi[node] - origin) * inv_dir
        t0 = np.minimum(lo, hi).max()
        t1 = np.maximum(lo, hi).min()
        return t0, t1

    def candidate_interval(self, pid: int, ray: Ray):
        """Shell interval of one primitive under the current mode, analytic endpoints."""
        p = self.mixture[pid]
        hit = ray_ellipsoid_intersect(ray, p.frame, p.support)
        if hit is None:
            return None
        if self._meshes is not None:
            ts = _ray_triangles(ray.origin, ray.direction, self._meshes[pid])
            if ts.size == 0:
                return None
        return hit

    def all_intervals(self, ray: Ray):
        """(pid, t0, t1) for every shell the ray's [t_min, t_max] overlaps, entry-sorted."""
        origin = ray.origin
        d = ray.direction
        with np.errstate(divide="ignore"):
            inv_dir = 1.0 / np.where(d == 0.0, 1e-300, d)
        out = []
        stack = [0]
        while stack:
            node = stack.pop()
            b0, b1 = self._box_overlap(node, origin, inv_dir)
            if b1 < b0 or b1 < ray.t_min or b0 > ray.t_max:
                continue
            left = self.node_left[node]
            if left < 0:
                s, c = self.node_start[node], self.node_count[node]
                for pid in self.order[s:s + c]:
                    hit = self.candidate_interval(int(pid), ray)
                    if hit is not None:
                        out.append((int(pid), hit[0], hit[1]))
            else:
                stack.append(int(left))
                stack.append(int(self.node_right[node]))
        out.sort(key=lambda e: (e[1], e[0]))
        return out


def build_bvh(mixture: Mixture, mode: ShellMode = ShellMode.analytic()) -> Bvh:
    return Bvh(mixture, mode)


def next_shell_event(bvh: Bvh, ray: Ray, t_start: float, exclude=frozenset()):
    """Nearest shell entry strictly after t_start, or None.

    Pruned priority search over the BVH; exclude suppresses primitives the
    caller already holds active (their entries lie at or before t_start, or
    they are being re-queried during trace initialization).
    """
    origin = ray.origin
    d = ray.direction
    with np.errstate(divide="ignore"):
        inv_dir = 1.0 / np.where(d == 0.0, 1e-300, d)
    best = None  # (t0, pid, t1)
    stack = [0]
    while stack:
        node = stack.pop()
        b0, b1 = bvh._box_overlap(node, origin, inv_dir)
        if b1 < b0 or b1 <= t_start or b1 < ray.t_min or b0 > ray.t_max:
            continue
        if best is not None and b0 >= best[0]:
            continue
        left = bvh.node_left[node]
        if left < 0:
            s, c = bvh.node_start[node], bvh.node_count[node]
            for pid in bvh.order[s:s + c]:
                pid = int(pid)
                if pid in exclude:
                    continue
                hit = bvh.candidate_interval(pid, ray)
                if hit is None:
                    continue
                t0, t1 = hit
                if t0 <= t_start:
                    continue
                if best is None or (t0, pid) < (best[0], best[1]):
                    best = (t0, pid, t1)
        else:
            right = bvh.node_right[node]
            # Near child popped first so best tightens early.
            lb, _ = bvh._box_overlap(left, origin, inv_dir)
            rb, _ = bvh._box_overlap(right, origin, inv_dir)
            if lb <= rb:
                stack.append(int(right))
                stack.append(int(left))
            else:
                stack.append(int(left))
                stack.append(int(right))
    if best is None:
        return None
    return best[1], best[0], best[2]
