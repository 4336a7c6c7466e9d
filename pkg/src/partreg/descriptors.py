"""PFH and LPS keypoint descriptors and the row-stochastic affinity matrix
between observed and template keypoints."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import InsufficientNeighborhood
from .geometry import KeypointSet, PointCloud
from .sampling import GroundFrame

PFH_BINS = 5
DEFAULT_EPSILON = 1e-3
DEFAULT_RADIUS_FRACTION = 0.15
DEFAULT_FSCORE_FRACTION = 0.05
DEFAULT_FALLBACK_DEG = 5.0


@dataclass(frozen=True)
class DescriptorConfig:
    """Descriptor settings. ``radius`` and ``fscore_threshold`` are absolute
    lengths; :meth:`for_template` derives them from a template's size."""

    kind: str = "lps"
    radius: float = 0.05
    bins: int = PFH_BINS
    epsilon: float = DEFAULT_EPSILON
    fscore_threshold: float | None = None
    fallback_deg: float = DEFAULT_FALLBACK_DEG

    def __post_init__(self):
        if self.kind not in ("lps", "pfh"):
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        if self.radius <= 0:
            raise ValueError("feature radius must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.bins < 1:
            raise ValueError("bins must be positive")
        if self.fscore_threshold is None:
            object.__setattr__(self, "fscore_threshold", DEFAULT_FSCORE_FRACTION * self.radius)
        if self.fscore_threshold <= 0:
            raise ValueError("F-score threshold must be positive")

    @classmethod
    def for_template(cls, template: PointCloud, kind="lps", radius_fraction=DEFAULT_RADIUS_FRACTION,
                     fscore_fraction=DEFAULT_FSCORE_FRACTION, **kw) -> "DescriptorConfig":
        r = radius_fraction * template.bbox_diagonal()
        return cls(kind=kind, radius=r, fscore_threshold=fscore_fraction * r, **kw)


# --------------------------------------------------------------------- PFH

@dataclass(frozen=True, eq=False)
class PfhDescriptor:
    histogram: np.ndarray

    @property
    def bins(self) -> int:
        return round(len(self.histogram) ** (1 / 3))


def pair_features(p1, n1, p2, n2):
    """Darboux-frame angle triplets for arrays of point pairs.

    Returns ``(f1, f2, f3, valid)`` with f1 in [-pi, pi] and f2, f3 in
    [-1, 1]. The source of each pair is the point whose normal is closer to
    the connecting line, as in PCL. Pairs of coincident points, or whose
    line is parallel to the source normal, are marked invalid.
    """
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    valid = dist > 0
    safe = np.where(valid, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, d) / safe
    a2 = np.einsum("ij,ij->i", n2, d) / safe
    swap = np.arccos(np.clip(np.abs(a1), -1, 1)) > np.arccos(np.clip(np.abs(a2), -1, 1))
    src = np.where(swap[:, None], n2, n1)
    dst = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    f3 = np.where(swap, -a2, a1)
    v = np.cross(d, src)
    vn = np.linalg.norm(v, axis=1)
    valid &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(src, v)
    f2 = np.einsum("ij,ij->i", v, dst)
    f1 = np.arctan2(np.einsum("ij,ij->i", w, dst), np.einsum("ij,ij->i", src, dst))
    return f1, f2, f3, valid


def pfh_histogram(points, normals, bins=PFH_BINS):
    """Normalised b^3 histogram over all unordered pairs of a neighbourhood.

    Returns ``None`` when no valid pair exists.
    """
    i, j = np.triu_indices(len(points), k=1)
    if len(i) == 0:
        return None
    f1, f2, f3, valid = pair_features(points[i], normals[i], points[j], normals[j])
    if not valid.any():
        return None
    h1 = np.clip(np.floor(bins * (f1[valid] + np.pi) / (2 * np.pi)), 0, bins - 1)
    h2 = np.clip(np.floor(bins * (f2[valid] + 1) / 2), 0, bins - 1)
    h3 = np.clip(np.floor(bins * (f3[valid] + 1) / 2), 0, bins - 1)
    flat = (h1 + bins * h2 + bins * bins * h3).astype(np.int64)
    hist = np.bincount(flat, minlength=bins ** 3).astype(np.float64)
    return hist / hist.sum()


def compute_pfh(cloud: PointCloud, keypoint_index: int, radius: float, bins=PFH_BINS, _tree=None) -> PfhDescriptor:
    if not cloud.has_normals:
        raise ValueError("PFH needs point normals")
    p = cloud.points[keypoint_index]
    if _tree is None:
        nbr = np.nonzero(np.linalg.norm(cloud.points - p, axis=1) < radius)[0]
    else:
        nbr = np.asarray(sorted(_tree.query_ball_point(p, radius)), dtype=np.int64)
        # ball queries are inclusive; keep the strict bound
        nbr = nbr[np.linalg.norm(cloud.points[nbr] - p, axis=1) < radius]
    hist = None
    if len(nbr) >= 2:
        hist = pfh_histogram(cloud.points[nbr], cloud.normals[nbr], bins)
    if hist is None:
        warnings.warn(
            f"keypoint {keypoint_index} has no usable point pairs within r={radius:g}; "
            "using a uniform histogram",
            InsufficientNeighborhood,
            stacklevel=2,
        )
        hist = np.full(bins ** 3, 1.0 / bins ** 3)
    return PfhDescriptor(hist)


def emd_1d(h1, h2) -> float:
    """Transport cost between two histograms on a line with unit bin spacing."""
    return float(np.abs(np.cumsum(h1) - np.cumsum(h2)).sum())


def pfh_affinity(d1: PfhDescriptor, d2: PfhDescriptor, epsilon: float = DEFAULT_EPSILON) -> float:
    if len(d1.histogram) != len(d2.histogram):
        raise ValueError("histograms differ in bin count")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return 1.0 / (emd_1d(d1.histogram, d2.histogram) + epsilon)


# --------------------------------------------------------------------- LPS

@dataclass(frozen=True, eq=False)
class LpsDescriptor:
    local_points: np.ndarray
    frame: np.ndarray
    radius: float
    used_fallback: bool = False


def _unit(v):
    return v / np.linalg.norm(v)


def local_frame(keypoint, point_normal, ground_normal, neighborhood, fallback_deg=DEFAULT_FALLBACK_DEG):
    """Local reference frame ``(F, used_fallback)`` with columns x, y, z.

    x is the point normal and y = ground x x. When the two normals are within
    ``fallback_deg`` of parallel, x becomes the least-variance PCA direction
    of the neighbourhood (signed to agree with the point normal). If y is still
    ill-defined after that, it is taken from the dominant PCA direction, signed
    so the neighbourhood's mass lies on its positive side. Every choice is
    built from rotated quantities, so the frame rotates with the data.
    """
    x = _unit(np.asarray(point_normal, dtype=np.float64))
    n = _unit(np.asarray(ground_normal, dtype=np.float64))
    limit = np.sin(np.deg2rad(fallback_deg))
    y = np.cross(n, x)
    fallback = np.linalg.norm(y) < limit
    if fallback:
        rel = neighborhood - keypoint
        cov = rel.T @ rel
        _, evecs = np.linalg.eigh(cov)
        x = evecs[:, 0]
        if x @ point_normal < 0:
            x = -x
        y = np.cross(n, x)
        if np.linalg.norm(y) < limit:
            major = evecs[:, 2]
            major = major - (major @ x) * x
            if np.sum(rel @ major) < 0:
                major = -major
            y = major
    y = _unit(y)
    z = np.cross(x, y)
    return np.column_stack([x, y, _unit(z)]), bool(fallback)


def _lps_from_neighbors(cloud, keypoint_index, nbr, ground_normal, radius, fallback_deg):
    p = cloud.points[keypoint_index]
    hood = cloud.points[nbr]
    F, fb = local_frame(p, cloud.normals[keypoint_index], ground_normal, hood, fallback_deg)
    local = (hood - p) @ F
    return LpsDescriptor(local, F, float(radius), fb)


def compute_lps(cloud: PointCloud, keypoint_index: int, ground: GroundFrame, radius: float,
                fallback_deg: float = DEFAULT_FALLBACK_DEG) -> LpsDescriptor:
    if not cloud.has_normals:
        raise ValueError("LPS needs point normals")
    p = cloud.points[keypoint_index]
    nbr = np.nonzero(np.linalg.norm(cloud.points - p, axis=1) < radius)[0]
    return _lps_from_neighbors(cloud, keypoint_index, nbr, ground.normal, radius, fallback_deg)


def _has_match(A, B, tau):
    if len(B) == 0:
        return np.zeros(len(A), dtype=bool)
    d, _ = cKDTree(B).query(A, k=1)
    return d <= tau


def fscore(A, B, tau: float) -> float:
    """F-score between two point sets at distance threshold ``tau``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("F-score needs non-empty point sets")
    precision = _has_match(A, B, tau).mean()
    recall = _has_match(B, A, tau).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def lps_affinity(d1: LpsDescriptor, d2: LpsDescriptor, fscore_threshold: float) -> float:
    return fscore(d1.local_points, d2.local_points, fscore_threshold)


def batch_fscore(source_sets, target_sets, tau: float) -> np.ndarray:
    """F-score for every (source, target) pair of point sets at once.

    All target sets go into one tree; a single fixed-radius pair search then
    gives, for each source point, the target sets it has a match in (and the
    other way around for recall). Equivalent to calling :func:`fscore` on
    every pair.
    """
    na, nb = len(source_sets), len(target_sets)
    sa = np.array([len(s) for s in source_sets])
    sb = np.array([len(s) for s in target_sets])
    if np.any(sa == 0) or np.any(sb == 0):
        raise ValueError("F-score needs non-empty point sets")
    A = np.vstack(source_sets)
    B = np.vstack(target_sets)
    ida = np.repeat(np.arange(na), sa)
    idb = np.repeat(np.arange(nb), sb)
    pairs = cKDTree(A).sparse_distance_matrix(cKDTree(B), tau, output_type="ndarray")
    ia = pairs["i"].astype(np.int64)
    ib = pairs["j"].astype(np.int64)

    # precision: source point ia has a match in target set idb[ib]
    hits_a = np.unique(ia * nb + idb[ib])
    p_hits = np.bincount(ida[hits_a // nb] * nb + hits_a % nb, minlength=na * nb).reshape(na, nb)
    # recall: target point ib has a match in source set ida[ia]
    hits_b = np.unique(ib * na + ida[ia])
    r_hits = np.bincount((hits_b % na) * nb + idb[hits_b // na], minlength=na * nb).reshape(na, nb)

    P = p_hits / sa[:, None]
    R = r_hits / sb[None, :]
    denom = P + R
    return np.where(denom > 0, 2 * P * R / np.where(denom > 0, denom, 1), 0.0)


# ---------------------------------------------------------------- affinity

@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    scores: np.ndarray

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.size == 0:
            raise ValueError("affinity must be a non-empty 2-D matrix")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("affinity entries must be finite and non-negative")
        if not np.allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("affinity rows must sum to 1")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def row_count(self) -> int:
        return self.scores.shape[0]

    @property
    def col_count(self) -> int:
        return self.scores.shape[1]

    @classmethod
    def from_raw(cls, raw) -> "AffinityMatrix":
        return cls(normalize_rows(raw))


def normalize_rows(raw) -> np.ndarray:
    """Scale each row to sum 1; rows with no mass become uniform."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValueError("raw affinity scores must be non-negative")
    sums = raw.sum(axis=1, keepdims=True)
    uniform = np.full_like(raw, 1.0 / raw.shape[1])
    out = np.where(sums > 0, raw / np.where(sums > 0, sums, 1.0), uniform)
    # one more pass squeezes the rounding error of the division
    return out / out.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Descriptors for every keypoint of one cloud, in keypoint order."""

    kind: str
    items: list

    def matrix(self) -> np.ndarray:
        # PFH: one histogram per row
        return np.vstack([d.histogram for d in self.items])

    def local_sets(self) -> list:
        return [d.local_points for d in self.items]


def describe(cloud: PointCloud, keys: KeypointSet, config: DescriptorConfig,
             ground: GroundFrame | None = None) -> DescriptorSet:
    """Compute the configured descriptor for every keypoint of ``cloud``."""
    if not cloud.has_normals:
        raise ValueError("descriptors need point normals")
    tree = cKDTree(cloud.points)
    items = []
    if config.kind == "pfh":
        for idx in keys.source_indices:
            items.append(compute_pfh(cloud, int(idx), config.radius, config.bins, _tree=tree))
        return DescriptorSet("pfh", items)
    if ground is None:
        raise ValueError("LPS descriptors need a ground normal")
    neighborhoods = tree.query_ball_point(keys.positions, config.radius)
    for idx, nbr in zip(keys.source_indices, neighborhoods):
        nbr = np.asarray(sorted(nbr), dtype=np.int64)
        nbr = nbr[np.linalg.norm(cloud.points[nbr] - cloud.points[idx], axis=1) < config.radius]
        items.append(_lps_from_neighbors(cloud, int(idx), nbr, ground.normal, config.radius,
                                         config.fallback_deg))
    return DescriptorSet("lps", items)


def raw_affinity(source: DescriptorSet, target: DescriptorSet, config: DescriptorConfig) -> np.ndarray:
    """Unnormalised pairwise scores between two descriptor sets."""
    if source.kind != target.kind:
        raise ValueError("descriptor kinds differ")
    if source.kind == "pfh":
        cdf_a = np.cumsum(source.matrix(), axis=1)
        cdf_b = np.cumsum(target.matrix(), axis=1)
        return 1.0 / (cdist(cdf_a, cdf_b, metric="cityblock") + config.epsilon)
    return batch_fscore(source.local_sets(), target.local_sets(), config.fscore_threshold)


def build_affinity(
    source_cloud: PointCloud,
    source_keys: KeypointSet,
    target_cloud: PointCloud,
    target_keys: KeypointSet,
    config: DescriptorConfig,
    ground: GroundFrame | None = None,
    target_ground: GroundFrame | None = None,
) -> AffinityMatrix:
    """Row-normalised affinity between source and target keypoints.

    ``ground`` is the ground plane in the source frame and ``target_ground``
    in the target frame (defaults to ``ground``); both are ignored for PFH.
    """
    if target_ground is None:
        target_ground = ground
    src = describe(source_cloud, source_keys, config, ground)
    tgt = describe(target_cloud, target_keys, config, target_ground)
    return AffinityMatrix.from_raw(raw_affinity(src, tgt, config))


def extract_hard_correspondences(A: AffinityMatrix) -> list:
    """``(row, argmax column)`` for every row; ties go to the lowest column."""
    best = np.argmax(np.asarray(A.scores if isinstance(A, AffinityMatrix) else A), axis=1)
    return [(j, int(k)) for j, k in enumerate(best)]


def write_correspondences(pairs, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(f"{s} {t}\n" for s, t in pairs))


def read_correspondences(path) -> list:
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                s, t = line.split()
                pairs.append((int(s), int(t)))
    return pairs
