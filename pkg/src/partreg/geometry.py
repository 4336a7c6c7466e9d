"""Point clouds, rigid transforms, the 6D rotation parameterization and
nearest-neighbour search.

Conventions: points are stored row-wise as ``(N, 3)`` float64 arrays and a
transform maps ``p -> R @ p + t``. All containers are immutable; their arrays
are flagged read-only on construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateParameters, EmptyInput

ORTHO_TOL = 1e-9
UNIT_NORMAL_TOL = 1e-6
GRAM_SCHMIDT_EPS = 1e-12
# below this size a brute-force scan beats building a tree
KDTREE_MIN_POINTS = 256


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1 and p.shape[0] == 3:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {p.shape}")
    return p


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    frame_label: str = ""

    def __post_init__(self):
        pts = as_points(self.points)
        if len(pts) == 0:
            raise EmptyInput("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = as_points(self.normals)
            if nrm.shape != pts.shape:
                raise ValueError(
                    f"normals shape {nrm.shape} does not match points shape {pts.shape}"
                )
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= UNIT_NORMAL_TOL):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(nrm))

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals, self.frame_label)

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.frame_label)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def bounding_radius(self) -> float:
        """Largest distance from the centroid to any point."""
        return float(np.max(np.linalg.norm(self.points - self.centroid(), axis=1)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(R.T @ R, np.eye(3), rtol=0.0, atol=ORTHO_TOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation


def apply_transform(T: RigidTransform, X: PointCloud) -> PointCloud:
    normals = None
    if X.normals is not None:
        normals = X.normals @ T.rotation.T
        # rotation preserves length only up to rounding; keep normals unit
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(T.apply(X.points), normals, X.frame_label)


@dataclass(frozen=True, eq=False)
class Rotation6D:
    """Two unconstrained 3-vectors; Gram-Schmidt maps them onto SO(3)."""

    a1: np.ndarray
    a2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a1", _frozen(np.reshape(self.a1, 3)))
        object.__setattr__(self, "a2", _frozen(np.reshape(self.a2, 3)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])

    @classmethod
    def from_vector(cls, v) -> "Rotation6D":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])


def cross3(a, b):
    """Cross product of two 3-vectors (np.cross is slow for single vectors)."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def gram_schmidt(a1, a2):
    """Columns ``(b1, b2, b3)`` of the rotation built from two raw vectors."""
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    n1 = np.linalg.norm(a1)
    if not n1 > GRAM_SCHMIDT_EPS:
        raise DegenerateParameters("first 6D vector has (near) zero length")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if not n2 > GRAM_SCHMIDT_EPS:
        raise DegenerateParameters("second 6D vector is (near) parallel to the first")
    # second pass: a2 nearly parallel to a1 leaves a b1 component behind
    u2 = u2 - (b1 @ u2) * b1
    b2 = u2 / np.linalg.norm(u2)
    b3 = cross3(b1, b2)
    return b1, b2, b3


def to_rotation(r: Rotation6D) -> np.ndarray:
    return np.column_stack(gram_schmidt(r.a1, r.a2))


def from_rotation(R) -> Rotation6D:
    R = np.asarray(R, dtype=np.float64)
    return Rotation6D(R[:, 0], R[:, 1])


def rotation_6d_backward(a1, a2, grad_R):
    """Pull a gradient w.r.t. the 3x3 rotation back onto ``(a1, a2)``.

    Reverse-mode derivative of :func:`gram_schmidt`; ``grad_R`` holds
    dL/dR with the same column layout as the rotation.
    """
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1
    proj = b1 @ a2
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2)
    b2 = u2 / n2

    g1, g2, g3 = grad_R[:, 0].copy(), grad_R[:, 1].copy(), grad_R[:, 2]
    # b3 = b1 x b2
    g1 += cross3(b2, g3)
    g2 += cross3(g3, b1)
    # b2 = u2 / |u2|
    gu2 = (g2 - b2 * (b2 @ g2)) / n2
    # u2 = a2 - (b1.a2) b1
    ga2 = gu2 - b1 * (b1 @ gu2)
    g1 -= proj * gu2 + a2 * (b1 @ gu2)
    # b1 = a1 / |a1|
    ga1 = (g1 - b1 * (b1 @ g1)) / n1
    return ga1, ga2


def pairwise_distances(P, Q) -> np.ndarray:
    """Euclidean distance matrix between the rows of ``P`` (a, 3) and ``Q`` (b, 3)."""
    P = as_points(P)
    Q = as_points(Q)
    diff = P[:, None, :] - Q[None, :, :]
    return np.sqrt(np.einsum("abk,abk->ab", diff, diff))


class NeighborIndex:
    """Exact nearest-neighbour search over a fixed point set.

    Uses a k-d tree above ``KDTREE_MIN_POINTS`` points and a linear scan
    below it. Ties resolve to the lowest index in both cases, and returned
    distances are recomputed from coordinates so both paths agree bit for bit.
    """

    def __init__(self, points):
        self.points = as_points(points)
        if len(self.points) == 0:
            raise EmptyInput("cannot index an empty point set")
        self.tree = cKDTree(self.points) if len(self.points) > KDTREE_MIN_POINTS else None

    def __len__(self):
        return len(self.points)

    def _exact(self, queries, idx):
        d = queries - self.points[idx]
        return np.sqrt(np.einsum("ij,ij->i", d, d))

    def query(self, queries):
        """Return ``(indices, distances)`` of the nearest point for each query row."""
        q = as_points(queries)
        if self.tree is None:
            diff = q[:, None, :] - self.points[None, :, :]
            d = np.sqrt(np.einsum("qnk,qnk->qn", diff, diff))
            idx = np.argmin(d, axis=1)
            return idx, d[np.arange(len(q)), idx]

        k = min(2, len(self.points))
        _, idx = self.tree.query(q, k=k)
        idx = np.atleast_2d(idx).reshape(len(q), k)
        best = idx[:, 0].copy()
        dist = self._exact(q, best)
        if k == 2:
            second = self._exact(q, idx[:, 1])
            # the tree may report near-ties in arbitrary order; settle them exactly
            suspect = np.nonzero(second <= dist * (1 + 1e-12) + 1e-300)[0]
            for i in suspect:
                cand = self.tree.query_ball_point(q[i], dist[i] * (1 + 1e-9) + 1e-12)
                cand = np.asarray(sorted(cand), dtype=np.int64)
                cd = self._exact(np.broadcast_to(q[i], (len(cand), 3)), cand)
                j = int(np.argmin(cd))
                best[i], dist[i] = cand[j], cd[j]
        return best, dist

    def distances(self, queries) -> np.ndarray:
        """Nearest-neighbour distances only (no tie handling needed)."""
        q = as_points(queries)
        if self.tree is None:
            return self.query(q)[1]
        _, idx = self.tree.query(q, k=1)
        return self._exact(q, idx)


def nearest_neighbor(query, cloud: PointCloud):
    idx, dist = NeighborIndex(cloud.points).query(np.reshape(query, (1, 3)))
    return int(idx[0]), float(dist[0])


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints as rows of ``positions`` plus their indices in the source cloud."""

    positions: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        pos = as_points(self.positions)
        if len(idx) != len(pos):
            raise ValueError("positions and source_indices differ in length")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("keypoint source indices must be unique")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "source_indices", _frozen(idx, np.int64))

    @classmethod
    def from_cloud(cls, cloud: PointCloud, indices) -> "KeypointSet":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(cloud)):
            raise IndexError("keypoint index out of range")
        return cls(cloud.points[idx], idx)

    def __len__(self):
        return len(self.source_indices)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) via a uniformly sampled unit quaternion."""
    u1, u2, u3 = rng.random(3)
    q = np.array([
        np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
        np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
        np.sqrt(u1) * np.sin(2 * np.pi * u3),
        np.sqrt(u1) * np.cos(2 * np.pi * u3),
    ])
    return quaternion_to_matrix(q)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as ``(x, y, z, w)``."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_matrix(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
