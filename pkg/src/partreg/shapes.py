"""Procedural test shapes sampled uniformly on their surface.

Each shape is a union of solids. Candidate points are drawn on every solid's
surface in proportion to its area, and candidates falling inside another
solid are dropped so only the outer surface remains.
"""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud

SHAPES = ("box_composite", "capped_cylinder", "l_bracket")
CYLINDER_SLANT_DEG = 35.0


class Box:
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    def area(self):
        a, b, c = self.hi - self.lo
        return 2 * (a * b + b * c + a * c)

    def sample(self, rng, count):
        size = self.hi - self.lo
        faces = []
        for axis in range(3):
            u, v = [i for i in range(3) if i != axis]
            faces += [(axis, 0, size[u] * size[v]), (axis, 1, size[u] * size[v])]
        areas = np.array([f[2] for f in faces])
        pick = rng.choice(len(faces), size=count, p=areas / areas.sum())
        pts = self.lo + rng.random((count, 3)) * size
        for i, (axis, side, _) in enumerate(faces):
            sel = pick == i
            pts[sel, axis] = self.hi[axis] if side else self.lo[axis]
        return pts

    def inside(self, pts, margin=1e-9):
        return np.all((pts > self.lo + margin) & (pts < self.hi - margin), axis=1)


class CappedCylinder:
    """Cylinder along x ending in a hemisphere at ``x1``; the other end is a
    flat cut through ``(x0, 0, 0)`` tilted by ``slant`` radians about y.

    A right-angled cut leaves the solid symmetric under any roll about its
    axis, which makes a rotation error meaningless; the slant removes that.
    """

    def __init__(self, radius, x0, x1, slant=0.0):
        if not 0 <= slant < np.pi / 2:
            raise ValueError("slant must lie in [0, pi/2)")
        self.r, self.x0, self.x1, self.k = radius, x0, x1, np.tan(slant)
        if x1 - x0 <= self.k * radius:
            raise ValueError("cylinder too short for the requested slant")

    def _cut(self, z):
        return self.x0 + self.k * z

    def area(self):
        r, length = self.r, self.x1 - self.x0
        # the tilted cut adds as much side wall above z = 0 as it removes below
        return 2 * np.pi * r * length + 2 * np.pi * r * r + np.pi * r * r * np.sqrt(1 + self.k ** 2)

    def _side(self, rng, count):
        r = self.r
        out = np.empty((0, 3))
        while len(out) < count:
            m = 2 * (count - len(out)) + 8
            th = rng.random(m) * 2 * np.pi
            x = self.x0 - self.k * r + rng.random(m) * (self.x1 - self.x0 + self.k * r)
            y, z = r * np.cos(th), r * np.sin(th)
            ok = x >= self._cut(z)
            out = np.vstack([out, np.column_stack([x, y, z])[ok]])
        return out[:count]

    def sample(self, rng, count):
        r, length = self.r, self.x1 - self.x0
        parts = np.array([2 * np.pi * r * length, 2 * np.pi * r * r, np.pi * r * r * np.sqrt(1 + self.k ** 2)])
        pick = rng.choice(3, size=count, p=parts / parts.sum())
        out = np.empty((count, 3))
        out[pick == 0] = self._side(rng, np.count_nonzero(pick == 0))
        n = np.count_nonzero(pick == 1)
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d[:, 0] = np.abs(d[:, 0])
        out[pick == 1] = d * r + [self.x1, 0, 0]
        n = np.count_nonzero(pick == 2)
        # uniform on the disk's projection is uniform on the tilted ellipse
        rad = r * np.sqrt(rng.random(n))
        th = rng.random(n) * 2 * np.pi
        y, z = rad * np.cos(th), rad * np.sin(th)
        out[pick == 2] = np.column_stack([self._cut(z), y, z])
        return out

    def inside(self, pts, margin=1e-9):
        x, rr = pts[:, 0], np.hypot(pts[:, 1], pts[:, 2])
        body = (x > self._cut(pts[:, 2]) + margin) & (x <= self.x1) & (rr < self.r - margin)
        cap = (x > self.x1) & (np.linalg.norm(pts - [self.x1, 0, 0], axis=1) < self.r - margin)
        return body | cap


def sample_union(solids, count, rng, oversample=3):
    areas = np.array([s.area() for s in solids])
    pool = []
    for i, s in enumerate(solids):
        pts = s.sample(rng, int(np.ceil(oversample * count * areas[i] / areas.sum())))
        keep = np.ones(len(pts), dtype=bool)
        for j, other in enumerate(solids):
            if j != i:
                keep &= ~other.inside(pts)
        pool.append(pts[keep])
    pool = np.vstack(pool)
    return pool[rng.choice(len(pool), size=count, replace=False)]


def _solids(name):
    if name == "box_composite":
        # a base block with an off-centre block on top and a side tab
        return [Box([-0.12, -0.08, 0.0], [0.12, 0.08, 0.10]),
                Box([0.00, -0.08, 0.10], [0.10, 0.02, 0.18]),
                Box([-0.18, 0.00, 0.0], [-0.12, 0.08, 0.05])]
    if name == "capped_cylinder":
        return [CappedCylinder(0.05, -0.12, 0.10, slant=np.radians(CYLINDER_SLANT_DEG))]
    if name == "l_bracket":
        # unequal legs so no rotation maps the bracket onto itself
        return [Box([-0.10, -0.06, 0.0], [0.12, 0.06, 0.03]),
                Box([-0.10, -0.06, 0.03], [-0.07, 0.06, 0.16])]
    raise ValueError(f"unknown shape {name!r}; choose from {SHAPES}")


def make_shape(name: str, count: int = 2000, seed: int = 0) -> PointCloud:
    """Surface samples of a named procedural shape, centred on its centroid
    and resting with its base normal along +z."""
    rng = np.random.default_rng(seed)
    pts = sample_union(_solids(name), count, rng)
    pts -= pts.mean(axis=0)
    return PointCloud(pts, frame_label="template")


def sphere(count: int = 2000, radius: float = 1.0, seed: int = 0) -> PointCloud:
    """Fibonacci-spiral samples of a sphere (deterministic, near uniform)."""
    from .sampling import fibonacci_sphere

    del seed
    return PointCloud(radius * fibonacci_sphere(count), frame_label="template")


def box(count: int = 2000, size=(1.0, 0.6, 0.4), seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    half = np.asarray(size, dtype=np.float64) / 2
    return PointCloud(Box(-half, half).sample(rng, count), frame_label="template")
