"""Partial-to-template point cloud registration with soft correspondences.

The pipeline partitions a complete template into views, matches keypoint
descriptors into a soft affinity, initialises the pose by weighted SVD and
refines pose and correspondences by gradient descent, keeping the best
dictionary candidate.
"""

from ._version import __version__
from .config import RunConfig
from .descriptors import (
    AffinityMatrix,
    DescriptorConfig,
    build_affinity,
    emd_1d,
    extract_hard_correspondences,
    fscore,
    lps_affinity,
    pfh_affinity,
)
from .errors import (
    AllCandidatesFailed,
    ConfigError,
    DegenerateCovariance,
    DegenerateInput,
    DegenerateParameters,
    EmptyInput,
    EmptyScan,
    InvalidCount,
    IoError,
    ParseError,
    PartregError,
    UnsupportedFormat,
)
from .geometry import KeypointSet, PointCloud, RigidTransform, Rotation6D, apply_transform
from .io import read_point_cloud, read_pose, write_point_cloud, write_pose
from .metrics import PoseErrorSummary, rotation_error, summarize, translation_error
from .registration import (
    CorrespondenceMatrix,
    OptimizerConfig,
    RegistrationResult,
    icp_multistart,
    one_directional_chamfer,
    optimize_joint,
    optimize_pose,
    register_dictionary,
    svd_initialize,
    wpd_loss,
)
from .sampling import GroundFrame, PartitionDictionary, estimate_ground, farthest_point_sampling, partition_template
from .synthetic import ScanSpec, generate_scan

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
