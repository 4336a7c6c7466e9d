import math
import warnings

import numpy as np
import pytest
from scipy.optimize import linprog

from partreg.descriptors import (
    AffinityMatrix,
    DescriptorConfig,
    LpsDescriptor,
    PfhDescriptor,
    batch_fscore,
    build_affinity,
    compute_lps,
    compute_pfh,
    emd_1d,
    extract_hard_correspondences,
    fscore,
    lps_affinity,
    normalize_rows,
    pfh_affinity,
    read_correspondences,
    write_correspondences,
)
from partreg.errors import InsufficientNeighborhood
from partreg.geometry import PointCloud, RigidTransform, apply_transform, random_rotation
from partreg.sampling import GroundFrame, estimate_normals, farthest_point_sampling
from partreg.shapes import make_shape

from conftest import grid_plane


def scalar_pair(p1, n1, p2, n2):
    """Darboux-frame features of one pair, written out long-hand."""
    d = [p2[i] - p1[i] for i in range(3)]
    length = math.sqrt(sum(c * c for c in d))
    a1 = sum(n1[i] * d[i] for i in range(3)) / length
    a2 = sum(n2[i] * d[i] for i in range(3)) / length
    if math.acos(abs(a1)) > math.acos(abs(a2)):
        n1, n2 = n2, n1
        d = [-c for c in d]
        f3 = -a2
    else:
        f3 = a1
    v = [d[1] * n1[2] - d[2] * n1[1], d[2] * n1[0] - d[0] * n1[2], d[0] * n1[1] - d[1] * n1[0]]
    vn = math.sqrt(sum(c * c for c in v))
    v = [c / vn for c in v]
    w = [n1[1] * v[2] - n1[2] * v[1], n1[2] * v[0] - n1[0] * v[2], n1[0] * v[1] - n1[1] * v[0]]
    f2 = sum(v[i] * n2[i] for i in range(3))
    f1 = math.atan2(sum(w[i] * n2[i] for i in range(3)), sum(n1[i] * n2[i] for i in range(3)))
    return f1, f2, f3


def pfh_reference(points, normals, b=5):
    hist = [0.0] * b ** 3
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            f1, f2, f3 = scalar_pair(points[i], normals[i], points[j], normals[j])
            i1 = min(b - 1, max(0, int(math.floor(b * (f1 + math.pi) / (2 * math.pi)))))
            i2 = min(b - 1, max(0, int(math.floor(b * (f2 + 1) / 2))))
            i3 = min(b - 1, max(0, int(math.floor(b * (f3 + 1) / 2))))
            hist[i1 + b * i2 + b * b * i3] += 1
    total = sum(hist)
    return np.array([h / total for h in hist])


def lp_emd(h1, h2):
    """Optimal transport on a line of bins with |i - j| ground cost."""
    n = len(h1)
    cost = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :]).ravel()
    rows = np.kron(np.eye(n), np.ones(n))
    cols = np.kron(np.ones(n), np.eye(n))
    res = linprog(cost, A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([h1, h2]),
                  bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0
    return res.fun


def unit_rows(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def curved_patch(rng, count=40):
    xy = rng.uniform(-1, 1, size=(count, 2))
    z = 0.3 * xy[:, 0] ** 2 - 0.2 * xy[:, 0] * xy[:, 1] + 0.1 * xy[:, 1] ** 3
    pts = np.column_stack([xy, z])
    n = np.column_stack([-(0.6 * xy[:, 0] - 0.2 * xy[:, 1]), -(-0.2 * xy[:, 0] + 0.3 * xy[:, 1] ** 2),
                         np.ones(count)])
    return pts, unit_rows(n)


class TestPfh:
    def test_planar_patch_single_bin(self):
        g = grid_plane(6)
        cloud = g.with_normals(np.tile([0, 0, 1.0], (len(g), 1)))
        d = compute_pfh(cloud, 0, 10.0)
        assert d.histogram.max() == 1.0
        assert abs(d.histogram.sum() - 1) < 1e-9

    def test_rigid_invariance(self, rng):
        pts, n = curved_patch(rng)
        cloud = PointCloud(pts, n)
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        h0 = compute_pfh(cloud, 0, 10.0).histogram
        h1 = compute_pfh(apply_transform(T, cloud), 0, 10.0).histogram
        assert np.max(np.abs(h0 - h1)) < 1e-9

    def test_all_pairs_reference(self, rng):
        pts, n = curved_patch(rng)
        n = unit_rows(n + 0.3 * rng.normal(size=n.shape))
        d = compute_pfh(PointCloud(pts, n), 0, 10.0)
        assert np.max(np.abs(d.histogram - pfh_reference(pts.tolist(), n.tolist()))) < 1e-12

    def test_lonely_keypoint(self):
        cloud = PointCloud(np.array([[0, 0, 0], [5, 0, 0.0]]), np.array([[0, 0, 1], [0, 0, 1.0]]))
        with pytest.warns(InsufficientNeighborhood):
            d = compute_pfh(cloud, 0, 1.0)
        assert np.allclose(d.histogram, 1 / 125)


class TestPfhAffinity:
    def test_identical(self):
        h = np.full(125, 1 / 125)
        assert abs(pfh_affinity(PfhDescriptor(h), PfhDescriptor(h), 1e-3) - 1000) < 1e-9

    def test_adjacent_shift(self):
        a, b = PfhDescriptor(np.array([1.0, 0])), PfhDescriptor(np.array([0, 1.0]))
        assert abs(pfh_affinity(a, b, 1e-3) - 1 / (1 + 1e-3)) < 1e-12
        with pytest.raises(ValueError):
            pfh_affinity(a, b, 0.0)

    def test_lp_oracle(self, rng):
        for _ in range(3):
            h1, h2 = rng.random(125), rng.random(125)
            h1, h2 = h1 / h1.sum(), h2 / h2.sum()
            assert abs(emd_1d(h1, h2) - lp_emd(h1, h2)) < 1e-9

    def test_monotone_in_emd(self, rng):
        base = np.zeros(10)
        base[0] = 1
        scores = []
        for shift in range(10):
            h = np.zeros(10)
            h[shift] = 1
            scores.append(pfh_affinity(PfhDescriptor(base), PfhDescriptor(h)))
        assert all(a > b for a, b in zip(scores, scores[1:]))


class TestLps:
    def test_frame_cross_products(self):
        pts = np.array([[0, 0, 0], [0.01, 0, 0.0]])
        cloud = PointCloud(pts, np.array([[1, 0, 0], [1, 0, 0.0]]))
        d = compute_lps(cloud, 0, GroundFrame([0, 0, 1]), 1.0)
        assert np.allclose(d.frame, np.eye(3), atol=1e-15)
        assert not d.used_fallback

    def test_planar_fallback(self):
        g = grid_plane(8)
        cloud = g.with_normals(np.tile([0, 0, 1.0], (len(g), 1)))
        d = compute_lps(cloud, 27, GroundFrame([0, 0, 1]), 0.35)
        assert d.used_fallback
        F = d.frame
        assert np.allclose(F.T @ F, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(F) - 1) < 1e-9
        assert np.all(np.linalg.norm(d.local_points, axis=1) <= 0.35)

    def test_rigid_invariance(self):
        t = make_shape("box_composite", 1500)
        cloud = estimate_normals(t, 20)
        ground = GroundFrame([0, 0, 1])
        rng = np.random.default_rng(4)
        T = RigidTransform(random_rotation(rng), rng.normal(size=3))
        moved = apply_transform(T, cloud)
        g2 = ground.transformed(T.rotation, T.translation)
        for idx in (0, 100, 777, 1400):
            a = compute_lps(cloud, idx, ground, 0.06).local_points
            b = compute_lps(moved, idx, g2, 0.06).local_points
            assert a.shape == b.shape
            assert np.max(np.abs(a - b)) < 1e-6


class TestFscore:
    def test_identical(self, rng):
        A = rng.normal(size=(20, 3))
        assert fscore(A, A, 1e-6) == 1.0

    def test_far_apart(self, rng):
        A = rng.normal(size=(20, 3))
        assert fscore(A, A + 100, 1.0) == 0.0

    def test_hand_example(self):
        A = np.array([[0, 0, 0], [10, 0, 0.0]])
        B = np.array([[0.01, 0, 0], [0, 20, 0], [0, 30, 0], [0, 40, 0.0]])
        assert abs(fscore(A, B, 0.1) - 1 / 3) < 1e-15

    def test_symmetric(self, rng):
        A, B = rng.normal(size=(15, 3)), rng.normal(size=(9, 3))
        a = LpsDescriptor(A, np.eye(3), 1.0)
        b = LpsDescriptor(B, np.eye(3), 1.0)
        assert lps_affinity(a, b, 0.7) == lps_affinity(b, a, 0.7)

    def test_batch_matches_pairwise(self, rng):
        src = [rng.normal(size=(rng.integers(1, 20), 3)) for _ in range(6)]
        tgt = [rng.normal(size=(rng.integers(1, 20), 3)) for _ in range(9)]
        M = batch_fscore(src, tgt, 0.6)
        ref = np.array([[fscore(a, b, 0.6) for b in tgt] for a in src])
        assert np.max(np.abs(M - ref)) < 1e-15


class TestAffinity:
    def test_normalization(self):
        assert normalize_rows([[1.0, 1.0, 2.0]]).tolist() == [[0.25, 0.25, 0.5]]

    def test_zero_row_uniform(self):
        A = AffinityMatrix.from_raw(np.array([[0.0] * 4, [1.0, 0, 0, 0]]))
        assert A.scores[0].tolist() == [0.25] * 4

    def test_rows_stochastic(self, rng):
        A = AffinityMatrix.from_raw(rng.random((30, 60)) ** 8)
        assert np.all(A.scores >= 0)
        assert np.max(np.abs(A.scores.sum(axis=1) - 1)) < 1e-9
        assert A.row_count == 30 and A.col_count == 60

    def test_self_matching(self):
        t = estimate_normals(make_shape("l_bracket", 1500), 20)
        keys = farthest_point_sampling(t, 48)
        cfg = DescriptorConfig.for_template(t)
        A = build_affinity(t, keys, t, keys, cfg, GroundFrame([0, 0, 1]))
        assert [k for _, k in extract_hard_correspondences(A)] == list(range(48))

    def test_pfh_self_matching(self):
        t = estimate_normals(make_shape("box_composite", 1500), 20)
        keys = farthest_point_sampling(t, 16)
        cfg = DescriptorConfig.for_template(t, kind="pfh")
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            A = build_affinity(t, keys, t, keys, cfg)
        assert np.argmax(A.scores, axis=1).tolist() == list(range(16))


class TestHardCorrespondences:
    def test_example(self):
        A = AffinityMatrix(np.array([[.1, .4, .3, .2], [.25, .25, .25, .25]]))
        assert extract_hard_correspondences(A) == [(0, 1), (1, 0)]

    def test_identity_block(self):
        A = AffinityMatrix(np.eye(5))
        assert extract_hard_correspondences(A) == [(j, j) for j in range(5)]

    def test_linear_scan_oracle(self, rng):
        raw = rng.integers(0, 4, size=(40, 12)).astype(float) + 1e-3
        A = AffinityMatrix.from_raw(raw)
        for j, k in extract_hard_correspondences(A):
            row = A.scores[j]
            best = 0
            for c in range(len(row)):
                if row[c] > row[best]:
                    best = c
            assert k == best

    def test_row_rescaling_invariant(self, rng):
        raw = rng.random((20, 40))
        a = extract_hard_correspondences(AffinityMatrix.from_raw(raw))
        b = extract_hard_correspondences(AffinityMatrix.from_raw(raw * rng.uniform(0.1, 10, (20, 1))))
        assert a == b

    def test_file_round_trip(self, tmp_path):
        pairs = [(0, 3), (1, 1), (2, 7)]
        write_correspondences(pairs, tmp_path / "c.txt")
        assert (tmp_path / "c.txt").read_text() == "0 3\n1 1\n2 7\n"
        assert read_correspondences(tmp_path / "c.txt") == pairs
