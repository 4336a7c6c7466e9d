import numpy as np
import pytest

from partreg.errors import EmptyScan
from partreg.geometry import NeighborIndex, PointCloud, RigidTransform
from partreg.registration import one_directional_chamfer
from partreg.sampling import GroundFrame
from partreg.shapes import SHAPES, CappedCylinder, make_shape
from partreg.synthetic import ScanSpec, TrialSampler, generate_scan

from conftest import random_pose


@pytest.fixture(scope="module")
def template():
    return make_shape("l_bracket")


def view_of(template, direction):
    d = np.asarray(direction, dtype=float)
    return template.centroid() + 3 * template.bounding_radius() * d / np.linalg.norm(d)


class TestGenerateScan:
    def test_identity_noiseless_is_subset(self, template):
        scan, pose = generate_scan(template, ScanSpec(RigidTransform.identity(), view_of(template, [1, 1, 1])))
        assert 0 < len(scan) < len(template)
        assert one_directional_chamfer(scan, template) == 0
        assert np.array_equal(pose.as_matrix(), np.eye(4))

    def test_ground_truth_maps_back(self, template, rng):
        spec = ScanSpec(random_pose(rng), view_of(template, [0, -1, 2]), dropout_fraction=0.3, seed=5)
        scan, pose = generate_scan(template, spec)
        back = pose.apply(scan.points)
        assert NeighborIndex(template.points).distances(back).mean() < 1e-12

    def test_seeded_bit_identical(self, template, rng):
        spec = ScanSpec(random_pose(rng), view_of(template, [1, 0, 0]), noise_sigma=0.01, dropout_fraction=0.1,
                        seed=42)
        a, _ = generate_scan(template, spec)
        b, _ = generate_scan(template, spec)
        assert a.points.tobytes() == b.points.tobytes()

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ScanSpec(RigidTransform.identity(), [0, 0, 1], noise_sigma=-1)
        with pytest.raises(ValueError):
            ScanSpec(RigidTransform.identity(), [0, 0, 1], dropout_fraction=1.0)

    def test_empty(self, monkeypatch, template):
        import partreg.synthetic as syn

        monkeypatch.setattr(syn, "hidden_point_removal", lambda *a: np.arange(0))
        with pytest.raises(EmptyScan):
            generate_scan(template, ScanSpec(RigidTransform.identity(), [1, 0, 0]))

    def test_sensor_frame_quantities(self, template, rng):
        spec = ScanSpec(random_pose(rng), view_of(template, [0, 0, 1]))
        # the sensor origin maps back onto the viewpoint
        assert np.allclose(spec.camera_pose.apply(spec.sensor_origin)[0], spec.viewpoint, atol=1e-12)
        g = spec.ground_in_sensor_frame(GroundFrame([0, 0, 1], 0.0))
        assert np.allclose(spec.camera_pose.rotation @ g.normal, [0, 0, 1], atol=1e-12)


class TestTrialSampler:
    def test_reproducible(self, template):
        s = TrialSampler()
        a = s.sample(template, np.random.default_rng(7))
        b = s.sample(template, np.random.default_rng(7))
        assert np.array_equal(a.camera_pose.as_matrix(), b.camera_pose.as_matrix())
        assert a.seed == b.seed
        assert a.noise_sigma == pytest.approx(0.005 * template.bbox_diagonal())

    def test_translation_box(self, template):
        s = TrialSampler(translation_box=0.25)
        rng = np.random.default_rng(0)
        diag = template.bbox_diagonal()
        for _ in range(50):
            assert np.all(np.abs(s.sample(template, rng).camera_pose.translation) <= 0.25 * diag)


class TestShapes:
    @pytest.mark.parametrize("name", SHAPES)
    def test_deterministic_and_centred(self, name):
        a, b = make_shape(name, 2000, seed=1), make_shape(name, 2000, seed=1)
        assert len(a) == 2000
        assert np.array_equal(a.points, b.points)
        assert np.allclose(a.centroid(), 0, atol=1e-12)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_shape("teapot")

    def test_cylinder_surface(self, rng):
        cyl = CappedCylinder(0.05, -0.1, 0.1, slant=np.radians(30))
        pts = cyl.sample(rng, 5000)
        rr = np.hypot(pts[:, 1], pts[:, 2])
        side = (pts[:, 0] > cyl._cut(pts[:, 2]) + 1e-9) & (pts[:, 0] <= 0.1)
        assert np.allclose(rr[side], 0.05)
        assert not cyl.inside(pts).any()
        assert np.all(pts[:, 0] >= cyl._cut(pts[:, 2]) - 1e-12)
