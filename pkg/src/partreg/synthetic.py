"""Synthetic partial scans of a template with a known pose."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyScan, InvalidCount
from .geometry import PointCloud, RigidTransform, random_rotation
from .sampling import DEFAULT_HPR_EXPONENT, GroundFrame, fibonacci_sphere, hidden_point_removal


@dataclass(frozen=True, eq=False)
class ScanSpec:
    """How to simulate one scan.

    ``camera_pose`` maps sensor coordinates into the template frame and is
    the ground truth a registration should recover. ``viewpoint`` is the
    sensor position in the template frame.
    """

    camera_pose: RigidTransform
    viewpoint: np.ndarray
    noise_sigma: float = 0.0
    dropout_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.dropout_fraction < 1:
            raise ValueError("dropout_fraction must lie in [0, 1)")
        object.__setattr__(self, "viewpoint", np.asarray(self.viewpoint, dtype=np.float64).reshape(3))

    @property
    def sensor_origin(self) -> np.ndarray:
        """Sensor position expressed in the scan's own frame."""
        return self.camera_pose.inverse().apply(self.viewpoint)[0]

    def ground_in_sensor_frame(self, template_ground: GroundFrame) -> GroundFrame:
        inv = self.camera_pose.inverse()
        return template_ground.transformed(inv.rotation, inv.translation)


def generate_scan(template: PointCloud, spec: ScanSpec, hpr_exponent: float = DEFAULT_HPR_EXPONENT):
    """Visible, posed, noisy and thinned copy of ``template``.

    Returns ``(scan, pose)`` where ``pose`` maps the scan onto the template.
    """
    if len(template) < 10:
        raise InvalidCount("template needs at least 10 points")
    radius = 10.0 ** hpr_exponent * template.bounding_radius()
    visible = hidden_point_removal(template.points, spec.viewpoint, radius)
    if len(visible) == 0:
        raise EmptyScan("no template point is visible from the viewpoint")
    rng = np.random.default_rng(spec.seed)
    pts = template.points[visible]
    if spec.dropout_fraction > 0:
        keep = rng.random(len(pts)) >= spec.dropout_fraction
        if not keep.any():
            raise EmptyScan("dropout removed every visible point")
        pts = pts[keep]
    pts = spec.camera_pose.inverse().apply(pts)
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
    return PointCloud(pts, frame_label="camera"), spec.camera_pose


@dataclass(frozen=True)
class TrialSampler:
    """Draws random scan settings for evaluation trials.

    Rotations are uniform on SO(3); translations uniform in a cube of half
    width ``translation_box`` (a fraction of the template diagonal); the
    viewpoint direction is uniform on the sphere at ``view_radius_scale``
    bounding radii from the centroid.
    """

    noise_fraction: float = 0.005
    dropout_fraction: float = 0.1
    translation_box: float = 0.25
    view_radius_scale: float = 3.0
    extra: dict = field(default_factory=dict)

    def sample(self, template: PointCloud, rng: np.random.Generator) -> ScanSpec:
        diag = template.bbox_diagonal()
        R = random_rotation(rng)
        t = (rng.random(3) * 2 - 1) * self.translation_box * diag
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        view = template.centroid() + self.view_radius_scale * template.bounding_radius() * d
        return ScanSpec(RigidTransform(R, t), view, self.noise_fraction * diag, self.dropout_fraction,
                        int(rng.integers(2 ** 31)))


def sphere_viewpoints(template: PointCloud, m: int, scale: float = 3.0) -> np.ndarray:
    return template.centroid() + scale * template.bounding_radius() * fibonacci_sphere(m)
