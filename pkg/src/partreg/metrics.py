"""Pose error metrics and their aggregation into table rows."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyInput


def rotation_error(R_gt, R_pred) -> float:
    """Geodesic angle (radians) between two rotations."""
    R_gt = np.asarray(R_gt, dtype=np.float64)
    R_pred = np.asarray(R_pred, dtype=np.float64)
    # the inverse of a rotation is its transpose
    c = (np.trace(R_gt.T @ R_pred) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def translation_error(t_gt, t_pred) -> float:
    return float(np.linalg.norm(np.asarray(t_gt, dtype=np.float64) - np.asarray(t_pred, dtype=np.float64)))


def axis_alignment_error(axis_gt, axis_pred) -> float:
    """Angle between two sign-free axes, in [0, pi/2]."""
    c = abs(float(np.dot(axis_gt, axis_pred)))
    return float(np.arccos(min(c, 1.0)))


@dataclass(frozen=True)
class PoseErrorSummary:
    mean_rotation_deg: float
    median_rotation_deg: float
    acc_at_10deg: float
    acc_at_30deg: float
    mean_translation: float
    count: int = 0

    CSV_FIELDS = ("mean_rot_deg", "median_rot_deg", "acc_10deg", "acc_30deg", "mean_trans")

    def as_row(self) -> dict:
        return dict(zip(self.CSV_FIELDS, (self.mean_rotation_deg, self.median_rotation_deg,
                                          self.acc_at_10deg, self.acc_at_30deg, self.mean_translation)))

    def as_dict(self) -> dict:
        return asdict(self)


def lower_median(values):
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def summarize(errors) -> PoseErrorSummary:
    """Aggregate ``(rotation_rad, translation)`` pairs.

    Accuracies count errors at or below 10 and 30 degrees; the median of an
    even-length list is its lower middle element.
    """
    errors = list(errors)
    if not errors:
        raise EmptyInput("cannot summarise an empty list of errors")
    rot = [math.degrees(float(r)) for r, _ in errors]
    trans = [float(t) for _, t in errors]
    n = len(errors)
    return PoseErrorSummary(
        mean_rotation_deg=math.fsum(rot) / n,
        median_rotation_deg=lower_median(rot),
        acc_at_10deg=sum(r <= 10.0 for r in rot) / n,
        acc_at_30deg=sum(r <= 30.0 for r in rot) / n,
        mean_translation=math.fsum(trans) / n,
        count=n,
    )


def fscore_clouds(X, Y, tau: float) -> float:
    """F-score between two clouds at distance threshold ``tau``."""
    from .descriptors import fscore

    X = getattr(X, "points", X)
    Y = getattr(Y, "points", Y)
    return fscore(X, Y, tau)
