"""Keypoint sampling, normal and ground-plane estimation, and visibility-based
partitioning of a complete template into partial views."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import (
    DegenerateInput,
    DegenerateNeighborhood,
    EmptyPartition,
    InvalidCount,
)
from .geometry import KeypointSet, PointCloud, as_points

log = logging.getLogger(__name__)

DEFAULT_PARTITIONS = 18
DEFAULT_VIEW_RADIUS_SCALE = 3.0
DEFAULT_HPR_EXPONENT = 2.5
DEFAULT_NORMAL_NEIGHBORS = 30


def farthest_point_sampling(X: PointCloud, k: int, rng: np.random.Generator | None = None) -> KeypointSet:
    """Greedy farthest point sampling.

    The first pick is the point farthest from the centroid, unless ``rng`` is
    given, in which case it is drawn uniformly at random. Every later pick
    maximises the distance to the already chosen set. ``np.argmax`` returns
    the first maximum, which gives the lowest-index tie-break.
    """
    n = len(X)
    if not 1 <= k <= n:
        raise InvalidCount(f"cannot sample {k} keypoints from {n} points")
    pts = X.points
    if rng is None:
        d0 = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        first = int(np.argmax(d0))
    else:
        first = int(rng.integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    mind = np.linalg.norm(pts - pts[first], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1), out=mind)
    return KeypointSet.from_cloud(X, chosen)


def estimate_normals(
    X: PointCloud,
    k_neighbors: int = DEFAULT_NORMAL_NEIGHBORS,
    viewpoint=None,
) -> PointCloud:
    """PCA normals over the ``k_neighbors`` nearest points (the point included).

    Normals are flipped to face ``viewpoint``. With ``viewpoint=None`` they
    are flipped to point away from the cloud centroid instead, which is the
    usual convention for a complete, closed template.
    """
    n = len(X)
    if not (k_neighbors >= 3 and n > k_neighbors):
        raise InvalidCount(f"need |X| > k_neighbors >= 3, got |X|={n}, k={k_neighbors}")
    pts = X.points
    _, nbr = cKDTree(pts).query(pts, k=k_neighbors)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    if viewpoint is None:
        toward = pts - pts.mean(axis=0)
    else:
        toward = np.asarray(viewpoint, dtype=np.float64) - pts

    # rank < 2 means the neighbourhood collapses to a point or a line
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale
    if np.any(degenerate):
        warnings.warn(
            f"{int(degenerate.sum())} neighbourhoods have rank < 2; "
            "using the viewpoint direction as their normal",
            DegenerateNeighborhood,
            stacklevel=2,
        )
        fallback = toward[degenerate]
        lengths = np.linalg.norm(fallback, axis=1, keepdims=True)
        fallback = np.where(lengths > 0, fallback / np.where(lengths > 0, lengths, 1), [0.0, 0.0, 1.0])
        normals[degenerate] = fallback

    flip = np.einsum("ij,ij->i", normals, toward) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return X.with_normals(normals)


@dataclass(frozen=True)
class GroundFrame:
    normal: np.ndarray
    plane_offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(n)
        if length == 0:
            raise ValueError("ground normal must be non-zero")
        object.__setattr__(self, "normal", n / length)
        object.__setattr__(self, "plane_offset", float(self.plane_offset))

    def transformed(self, rotation, translation=np.zeros(3)) -> "GroundFrame":
        n = np.asarray(rotation) @ self.normal
        # a point x0 on the plane moves to R x0 + t
        return GroundFrame(n, self.plane_offset - n @ np.asarray(translation, dtype=np.float64))


def _fit_plane(points):
    c = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - c)
    return vt[2], c, s


def estimate_ground(
    background: PointCloud,
    sensor_origin=(0.0, 0.0, 0.0),
    threshold: float | None = None,
    iterations: int = 500,
    rng: np.random.Generator | int | None = 0,
) -> GroundFrame:
    """RANSAC plane fit with a least-squares refit on the consensus set.

    ``threshold`` defaults to 1% of the bounding-box diagonal. The returned
    normal points toward ``sensor_origin``.
    """
    pts = background.points
    if len(pts) < 3:
        raise DegenerateInput("need at least 3 points to fit a plane")
    diag = background.bbox_diagonal()
    _, _, s = _fit_plane(pts)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateInput("background points are collinear")
    if threshold is None:
        threshold = 0.01 * diag
    rng = np.random.default_rng(rng)

    best_inliers = None
    best_count = -1
    if len(pts) == 3:
        best_inliers = np.ones(3, dtype=bool)
    else:
        for _ in range(iterations):
            sample = pts[rng.choice(len(pts), 3, replace=False)]
            nrm = np.cross(sample[1] - sample[0], sample[2] - sample[0])
            length = np.linalg.norm(nrm)
            if length <= 1e-12 * diag * diag:
                continue
            nrm /= length
            inliers = np.abs((pts - sample[0]) @ nrm) <= threshold
            count = int(inliers.sum())
            if count > best_count:
                best_count, best_inliers = count, inliers
        if best_inliers is None or best_inliers.sum() < 3:
            raise DegenerateInput("no non-degenerate plane hypothesis found")

    normal, center, _ = _fit_plane(pts[best_inliers])
    origin = np.asarray(sensor_origin, dtype=np.float64)
    if normal @ (origin - center) < 0:
        normal = -normal
    return GroundFrame(normal, -float(normal @ center))


def fibonacci_sphere(m: int) -> np.ndarray:
    """``m`` near-uniform unit directions on a spherical Fibonacci spiral."""
    i = np.arange(m) + 0.5
    z = 1.0 - 2.0 * i / m
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(m)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def hidden_point_removal(points, viewpoint, radius: float) -> np.ndarray:
    """Indices of the points visible from ``viewpoint`` (Katz et al. 2007).

    Points are spherically flipped about the viewpoint with a sphere of the
    given ``radius``; the visible ones are the vertices of the convex hull of
    the flipped set plus the viewpoint itself.
    """
    pts = as_points(points)
    rel = pts - np.asarray(viewpoint, dtype=np.float64)
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    if np.any(norms <= 0):
        raise DegenerateInput("viewpoint coincides with a cloud point")
    if radius <= norms.max():
        raise ValueError("flip radius must exceed the largest viewpoint distance")
    flipped = rel + 2.0 * (radius - norms) * rel / norms
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros((1, 3))]))
    except QhullError:
        return np.arange(0, dtype=np.int64)
    verts = hull.vertices
    return np.sort(verts[verts < len(pts)]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class PartitionDictionary:
    """Partial views of one template, all expressed in the template frame.

    A ``None`` viewpoint marks an entry that is not a single view (the whole
    template used as its own partial); its normals face outward.
    """

    partials: list
    viewpoints: list
    indices: list = field(default_factory=list)
    dropped: tuple = ()

    def __post_init__(self):
        if not self.partials:
            raise ValueError("a partition dictionary needs at least one partial")
        if len(self.viewpoints) != len(self.partials):
            raise ValueError("one viewpoint per partial is required")
        labels = {p.frame_label for p in self.partials}
        if len(labels) != 1:
            raise ValueError("partials must share one frame label")

    @property
    def m(self) -> int:
        return len(self.partials)

    @classmethod
    def complete(cls, template: PointCloud) -> "PartitionDictionary":
        """Single-entry dictionary holding the whole template."""
        return cls([template], [None], [np.arange(len(template))])


def partition_template(
    Xstar: PointCloud,
    m: int = DEFAULT_PARTITIONS,
    view_radius_scale: float = DEFAULT_VIEW_RADIUS_SCALE,
    hpr_exponent: float = DEFAULT_HPR_EXPONENT,
) -> PartitionDictionary:
    """Split a complete template into the subsets visible from ``m`` viewpoints.

    Viewpoints sit on a Fibonacci spiral around the centroid at
    ``view_radius_scale`` times the bounding radius. Views yielding fewer than
    3 visible points are dropped with an :class:`EmptyPartition` warning.
    """
    if len(Xstar) < 10:
        raise InvalidCount("template needs at least 10 points")
    if m < 1:
        raise InvalidCount("m must be at least 1")
    center = Xstar.centroid()
    bound = Xstar.bounding_radius()
    flip_radius = 10.0 ** hpr_exponent * bound
    views = center + view_radius_scale * bound * fibonacci_sphere(m)

    partials, viewpoints, indices, dropped = [], [], [], []
    for i, v in enumerate(views):
        vis = hidden_point_removal(Xstar.points, v, flip_radius)
        if len(vis) < 3:
            warnings.warn(f"viewpoint {i} sees {len(vis)} points; dropped", EmptyPartition, stacklevel=2)
            dropped.append(i)
            continue
        partials.append(Xstar.subset(vis))
        viewpoints.append(v)
        indices.append(vis)
    if not partials:
        raise DegenerateInput("no viewpoint produced a usable partial")
    log.debug("partitioned %d points into %d views", len(Xstar), len(partials))
    return PartitionDictionary(partials, viewpoints, indices, tuple(dropped))
