"""Pose estimation from soft keypoint correspondences.

Pipeline per dictionary candidate: affinity -> weighted SVD initialisation
-> Adam on the pose with the affinity held fixed -> Adam on pose and
correspondence logits jointly. The candidate with the lowest final loss (or
the lowest Chamfer distance to the complete template) wins.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import _kernels
from .descriptors import (
    AffinityMatrix,
    DescriptorConfig,
    DescriptorSet,
    describe,
    raw_affinity,
)
from .errors import AllCandidatesFailed, DegenerateCovariance
from .geometry import (
    GRAM_SCHMIDT_EPS,
    KeypointSet,
    NeighborIndex,
    PointCloud,
    RigidTransform,
    apply_transform,
    as_points,
    gram_schmidt,
    quaternion_to_matrix,
)
from .sampling import (
    DEFAULT_NORMAL_NEIGHBORS,
    GroundFrame,
    PartitionDictionary,
    estimate_normals,
    farthest_point_sampling,
)

log = logging.getLogger(__name__)

LOGIT_FLOOR = 1e-12
DEGENERATE_SINGULAR = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    steps_per_stage: int = 300
    rotation_parameterization: str = "6d"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    chamfer_weight: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps_per_stage < 1:
            raise ValueError("steps_per_stage must be at least 1")
        if self.rotation_parameterization != "6d":
            raise ValueError("only the 6d rotation parameterization is supported")
        if self.chamfer_weight < 0:
            raise ValueError("chamfer_weight must be non-negative")


def _points(x):
    if isinstance(x, KeypointSet):
        return x.positions
    if isinstance(x, PointCloud):
        return x.points
    return as_points(x)


def _scores(W):
    if isinstance(W, AffinityMatrix):
        return W.scores
    if isinstance(W, CorrespondenceMatrix):
        return W.realized()
    return np.asarray(W, dtype=np.float64)


# ------------------------------------------------------------ correspondence

def row_softmax(logits) -> np.ndarray:
    e = logits - logits.max(axis=1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


@dataclass(frozen=True, eq=False)
class CorrespondenceMatrix:
    """Correspondence scores kept on the row simplex via a row softmax."""

    logits: np.ndarray

    def __post_init__(self):
        L = np.array(self.logits, dtype=np.float64)
        if L.ndim != 2 or not np.all(np.isfinite(L)):
            raise ValueError("logits must be a finite 2-D matrix")
        L.setflags(write=False)
        object.__setattr__(self, "logits", L)

    @classmethod
    def from_affinity(cls, A) -> "CorrespondenceMatrix":
        return cls(np.log(_scores(A) + LOGIT_FLOOR))

    def realized(self) -> np.ndarray:
        return row_softmax(self.logits)


# ------------------------------------------------------------------- SVD init

def weighted_kabsch(source, virtual):
    """Rigid fit of ``source`` onto ``virtual``; returns ``(T, degenerate)``."""
    cs = source.mean(axis=0)
    ct = virtual.mean(axis=0)
    H = (source - cs).T @ (virtual - ct)
    U, S, Vt = np.linalg.svd(H)
    if S[1] < DEGENERATE_SINGULAR and S[2] < DEGENERATE_SINGULAR:
        return RigidTransform(np.eye(3), ct - cs), True
    V = Vt.T
    R = V @ U.T
    if np.linalg.det(R) < 0:
        V[:, 2] *= -1
        R = V @ U.T
    return RigidTransform(R, ct - R @ cs), False


def svd_initialize(source_keys, target_keys, A) -> RigidTransform:
    """Closed-form pose from soft correspondences.

    Each source keypoint is paired with the affinity-weighted average of the
    target keypoints, then the pairs are aligned with Kabsch/Umeyama (no
    scale). A near rank-deficient cross-covariance gives the identity
    rotation plus centroid alignment and a :class:`DegenerateCovariance`
    warning.
    """
    T, degenerate = _svd_initialize(source_keys, target_keys, A)
    if degenerate:
        warnings.warn("cross-covariance is rank deficient; using centroid alignment",
                      DegenerateCovariance, stacklevel=2)
    return T


def _svd_initialize(source_keys, target_keys, A):
    P = _points(source_keys)
    Q = _points(target_keys)
    W = _scores(A)
    if W.shape != (len(P), len(Q)):
        raise ValueError(f"affinity shape {W.shape} does not match keypoints ({len(P)}, {len(Q)})")
    return weighted_kabsch(P, W @ Q)


# ---------------------------------------------------------------------- loss

class WpdObjective:
    """Weighted pairwise distance loss with an optional Chamfer term.

    ``loss = sum_jk W_jk |R p_j + t - q_k| + lam * mean_j min_x |R p_j + t - x|``
    where x ranges over the template. Gradients are exact except at zero
    distances and nearest-neighbour switches, where a subgradient is used.
    """

    def __init__(self, source, target, template=None, chamfer_weight=0.0):
        self.P = np.ascontiguousarray(_points(source))
        self.Q = np.ascontiguousarray(_points(target))
        self.QT = np.ascontiguousarray(self.Q.T)
        self.lam = float(chamfer_weight)
        if self.lam < 0:
            raise ValueError("chamfer weight must be non-negative")
        self.index = None
        if self.lam > 0:
            if template is None:
                raise ValueError("a template is required when chamfer_weight > 0")
            self.index = template if isinstance(template, NeighborIndex) else NeighborIndex(_points(template))

    def distances(self, R, t):
        y = self.P @ R.T + t
        # coordinate-wise accumulation: same rounding as a nested loop, ~3x faster
        # than broadcasting an (a, b, 3) difference tensor
        QT = self.QT
        d = y[:, 0:1] - QT[0]
        D = d * d
        for k in (1, 2):
            d = y[:, k:k + 1] - QT[k]
            D += d * d
        return y, np.sqrt(D, out=D)

    def chamfer(self, y):
        idx, dist = self.index.query(y)
        return idx, dist

    def value(self, R, t, W) -> float:
        y, D = self.distances(R, t)
        loss = float(np.sum(W * D))
        if self.lam > 0:
            loss += self.lam * float(self.chamfer(y)[1].mean())
        return loss

    def evaluate(self, R, t, W):
        """Return ``(loss, dL/dR, dL/dt, D)``; D is also dL/dW."""
        y, D = self.distances(R, t)
        loss = float(np.sum(W * D))
        G = np.divide(W, D, out=np.zeros_like(D), where=D > 0)
        gy = y * G.sum(axis=1, keepdims=True) - G @ self.Q
        if self.lam > 0:
            idx, dist = self.chamfer(y)
            loss += self.lam * float(dist.mean())
            r = y - self.index.points[idx]
            scale = np.divide(self.lam / len(y), dist, out=np.zeros_like(dist), where=dist > 0)
            gy = gy + r * scale[:, None]
        gR = gy.T @ self.P
        gt = gy.sum(axis=0)
        return loss, gR, gt, D

    # Compiled fast paths used by the optimizer. They agree with
    # ``evaluate`` to rounding and never materialise the distance matrix.

    def _chamfer_grad(self, R, t, loss, gR, gt):
        y = self.P @ R.T + t
        idx, dist = self.chamfer(y)
        r = y - self.index.points[idx]
        scale = np.divide(self.lam / len(y), dist, out=np.zeros_like(dist), where=dist > 0)
        gy = r * scale[:, None]
        gR += gy.T @ self.P
        gt += gy.sum(axis=0)
        return loss + self.lam * float(dist.mean())

    def pose_step(self, R, t, W):
        """``(loss, dL/dR, dL/dt)`` for fixed weights ``W``."""
        gR = np.zeros((3, 3))
        gt = np.zeros(3)
        loss = _kernels.wpd_pose(self.P, self.QT, np.ascontiguousarray(W), R, t, gR, gt)
        if self.lam > 0:
            loss = self._chamfer_grad(R, t, loss, gR, gt)
        return loss, gR, gt

    def joint_step(self, R, t, logits, grad_logits):
        """Loss with ``W = softmax(logits)``; fills ``grad_logits`` in place."""
        gR = np.zeros((3, 3))
        gt = np.zeros(3)
        C = np.empty_like(logits)
        _kernels.shift_rows(logits, C)
        np.exp(C, out=C)
        loss = _kernels.wpd_joint(self.P, self.QT, R, t, C, gR, gt, grad_logits)
        if self.lam > 0:
            loss = self._chamfer_grad(R, t, loss, gR, gt)
        return loss, gR, gt


def wpd_loss(W, T: RigidTransform, source_keys, target_keys, template=None, lam: float = 0.0) -> float:
    W = _scores(W)
    obj = WpdObjective(source_keys, target_keys, template, lam)
    if W.shape != (len(obj.P), len(obj.Q)):
        raise ValueError("weight matrix shape does not match keypoints")
    return obj.value(T.rotation, T.translation, W)


def _rotation(params):
    params = np.ascontiguousarray(params, dtype=np.float64)
    R = np.empty((3, 3))
    if not _kernels.rot6d(params, R, GRAM_SCHMIDT_EPS):
        # borderline case: defer to the reference (which raises if degenerate)
        R = np.column_stack(gram_schmidt(params[:3], params[3:6]))
    return R


def _param_grad(params, gR, gt):
    out = np.empty(9)
    _kernels.rot6d_backward(np.ascontiguousarray(params, dtype=np.float64), gR, gt, out)
    return out


def pose_gradient(obj: WpdObjective, params, W):
    """Loss and gradient w.r.t. the 9 pose parameters ``(a1, a2, t)``."""
    R = _rotation(params)
    loss, gR, gt = obj.pose_step(R, params[6:9], np.asarray(W, dtype=np.float64))
    return loss, _param_grad(params, gR, gt)


def joint_gradient(obj: WpdObjective, params, logits, out=None):
    """Loss and gradients w.r.t. pose parameters and correspondence logits.

    ``dL/dlogits = C * (D - rowsum(C * D))`` with ``C`` the row softmax.
    """
    R = _rotation(params)
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    gL = np.empty_like(logits) if out is None else out
    loss, gR, gt = obj.joint_step(R, params[6:9], logits, gL)
    return loss, _param_grad(params, gR, gt), gL


def pose_to_params(T: RigidTransform) -> np.ndarray:
    return np.concatenate([T.rotation[:, 0], T.rotation[:, 1], T.translation])


def params_to_pose(params) -> RigidTransform:
    return RigidTransform(np.column_stack(gram_schmidt(params[:3], params[3:6])), params[6:9])


# ----------------------------------------------------------------- optimizer

class Adam:
    """Adam over a list of arrays, matching the usual bias-corrected update."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            _kernels.adam_update(p, np.ascontiguousarray(g, dtype=np.float64), m, v,
                                 self.lr, self.b1, self.b2, self.eps, c1, c2)


def _adam(config: OptimizerConfig, params):
    return Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)


def optimize_pose(T0: RigidTransform, A, source_keys, target_keys, template=None,
                  config: OptimizerConfig = OptimizerConfig(), callback=None,
                  objective: WpdObjective | None = None):
    """First stage: refine the pose with the affinity held fixed.

    Returns ``(pose, loss)`` for the best iterate seen, so the loss never
    ends above its starting value.
    """
    W = _scores(A)
    obj = objective or WpdObjective(source_keys, target_keys, template, config.chamfer_weight)
    opt = _adam(config, [pose_to_params(T0)])
    best_loss, best = np.inf, None
    for step in range(config.steps_per_stage + 1):
        params = opt.params[0]
        loss, grad = pose_gradient(obj, params, W)
        if loss < best_loss:
            best_loss, best = loss, params.copy()
        if callback is not None:
            callback("pose", step, params, None, loss)
        if step < config.steps_per_stage:
            opt.step([grad])
    return params_to_pose(best), best_loss


def optimize_joint(T: RigidTransform, C0: CorrespondenceMatrix, source_keys, target_keys, template=None,
                   config: OptimizerConfig = OptimizerConfig(), callback=None,
                   objective: WpdObjective | None = None, debug: bool | None = None):
    """Second stage: refine pose and correspondence logits together.

    Returns ``(pose, CorrespondenceMatrix, loss)`` at the best iterate.
    With ``debug`` (default: the ``PARTREG_DEBUG`` environment variable) the
    realized C is checked to be strictly positive and row-stochastic at
    every step.
    """
    if debug is None:
        debug = os.environ.get("PARTREG_DEBUG", "") not in ("", "0")
    obj = objective or WpdObjective(source_keys, target_keys, template, config.chamfer_weight)
    if not isinstance(C0, CorrespondenceMatrix):
        C0 = CorrespondenceMatrix.from_affinity(C0)
    opt = _adam(config, [pose_to_params(T), C0.logits])
    glog = np.empty_like(opt.params[1])
    best_loss, best = np.inf, None
    for step in range(config.steps_per_stage + 1):
        params, logits = opt.params
        loss, gpose, _ = joint_gradient(obj, params, logits, glog)
        if debug:
            _check_stochastic(logits, step)
        if loss < best_loss:
            best_loss, best = loss, (params.copy(), logits.copy())
        if callback is not None:
            callback("joint", step, params, logits, loss)
        if step < config.steps_per_stage:
            opt.step([gpose, glog])
    return params_to_pose(best[0]), CorrespondenceMatrix(best[1]), best_loss


def _check_stochastic(logits, step):
    C = row_softmax(logits)
    drift = np.max(np.abs(C.sum(axis=1) - 1.0))
    if not (drift <= 1e-9 and np.all(C > 0)):
        raise FloatingPointError(f"step {step}: C left the row simplex (row-sum drift {drift:.3g}, "
                                 f"min entry {C.min():.3g})")


# -------------------------------------------------------------------- chamfer

def one_directional_chamfer(X, Y) -> float:
    """Mean distance from each point of ``X`` to its nearest point in ``Y``."""
    index = Y if isinstance(Y, NeighborIndex) else NeighborIndex(_points(Y))
    return float(index.distances(_points(X)).mean())


# ----------------------------------------------------------------------- ICP

def rotation_starts(count: int) -> list:
    """Identity followed by ``count - 1`` Halton-spread rotations."""
    if count < 1:
        raise ValueError("need at least one start")
    out = [np.eye(3)]
    if count > 1:
        seq = qmc.Halton(d=3, scramble=False)
        seq.fast_forward(1)
        for u1, u2, u3 in seq.random(count - 1):
            q = [np.sqrt(1 - u1) * np.sin(2 * np.pi * u2), np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
                 np.sqrt(u1) * np.sin(2 * np.pi * u3), np.sqrt(u1) * np.cos(2 * np.pi * u3)]
            out.append(quaternion_to_matrix(q))
    return out


def icp(observed, target_index: NeighborIndex, T0: RigidTransform, max_iter=100, tol=1e-6):
    """Point-to-point ICP; returns ``(pose, mean closest-point residual)``."""
    from .metrics import rotation_error

    src = _points(observed)
    T = T0
    for _ in range(max_iter):
        moved = T.apply(src)
        idx, _ = target_index.query(moved)
        step, _ = weighted_kabsch(moved, target_index.points[idx])
        T = step @ T
        if rotation_error(np.eye(3), step.rotation) + np.linalg.norm(step.translation) < tol:
            break
    return T, float(target_index.distances(T.apply(src)).mean())


@dataclass(frozen=True, eq=False)
class IcpResult:
    pose: RigidTransform
    residual: float
    start_index: int


def icp_multistart(observed, target, starts: int = 20, max_iter=100, tol=1e-6) -> IcpResult:
    """ICP from ``starts`` rotations spread over SO(3), centroids aligned;
    keeps the run with the lowest residual (first one on ties)."""
    src = _points(observed)
    index = target if isinstance(target, NeighborIndex) else NeighborIndex(_points(target))
    c_src = src.mean(axis=0)
    c_tgt = index.points.mean(axis=0)
    best = None
    for i, R0 in enumerate(rotation_starts(starts)):
        T, res = icp(src, index, RigidTransform(R0, c_tgt - R0 @ c_src), max_iter, tol)
        if best is None or res < best.residual:
            best = IcpResult(T, res, i)
    return best


# --------------------------------------------------------- dictionary match

@dataclass(frozen=True, eq=False)
class CandidateResult:
    pose: RigidTransform
    loss: float
    chamfer: float
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    pose: RigidTransform
    final_loss: float
    chamfer_to_template: float
    candidate_index: int
    all_candidates: list = field(default_factory=list)
    selection: str = "min_loss"


@dataclass(frozen=True, eq=False)
class TemplateEntry:
    cloud: PointCloud
    keys: KeypointSet
    descriptors: DescriptorSet
    viewpoint: np.ndarray | None


@dataclass(frozen=True, eq=False)
class PreparedTemplate:
    """Template-side work shared by every observed cloud: normals,
    keypoints and descriptors of each dictionary entry."""

    template: PointCloud
    index: NeighborIndex
    entries: list
    config: DescriptorConfig


def prepare_template(template: PointCloud, dictionary: PartitionDictionary, desc_config: DescriptorConfig,
                     n_keypoints: int = 256, ground: GroundFrame | None = None,
                     normal_neighbors: int = DEFAULT_NORMAL_NEIGHBORS) -> PreparedTemplate:
    if ground is None:
        ground = GroundFrame([0.0, 0.0, 1.0])
    entries = []
    for partial, view in zip(dictionary.partials, dictionary.viewpoints):
        cloud = partial
        if not cloud.has_normals:
            k = min(normal_neighbors, len(cloud) - 1)
            cloud = estimate_normals(cloud, k, view)
        keys = farthest_point_sampling(cloud, min(n_keypoints, len(cloud)))
        entries.append(TemplateEntry(cloud, keys, describe(cloud, keys, desc_config, ground), view))
    return PreparedTemplate(template, NeighborIndex(template.points), entries, desc_config)


def _worker_count(jobs: int) -> int:
    env = os.environ.get("PARTREG_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, jobs))


def register_candidate(obs_keys, obs_desc, entry: TemplateEntry, prepared: PreparedTemplate,
                       observed_points, opt_config: OptimizerConfig) -> CandidateResult:
    A = AffinityMatrix.from_raw(raw_affinity(obs_desc, entry.descriptors, prepared.config))
    T0, degenerate = _svd_initialize(obs_keys, entry.keys, A)
    obj = WpdObjective(obs_keys, entry.keys, prepared.index, opt_config.chamfer_weight)
    T1, _ = optimize_pose(T0, A, obs_keys, entry.keys, config=opt_config, objective=obj)
    T2, _, loss = optimize_joint(T1, CorrespondenceMatrix.from_affinity(A), obs_keys, entry.keys,
                                 config=opt_config, objective=obj)
    chamfer = one_directional_chamfer(T2.apply(observed_points), prepared.index)
    return CandidateResult(T2, loss, chamfer, degenerate)


def register_dictionary(
    observed: PointCloud,
    dictionary: PartitionDictionary | None,
    template: PointCloud,
    desc_config: DescriptorConfig,
    opt_config: OptimizerConfig = OptimizerConfig(),
    selection: str = "min_loss",
    n_keypoints: int = 128,
    observed_ground: GroundFrame | None = None,
    template_ground: GroundFrame | None = None,
    sensor_origin=(0.0, 0.0, 0.0),
    normal_neighbors: int = DEFAULT_NORMAL_NEIGHBORS,
    prepared: PreparedTemplate | None = None,
) -> RegistrationResult:
    """Register ``observed`` against every dictionary entry and pick one pose.

    ``selection`` is ``"min_loss"`` (lowest final correspondence loss) or
    ``"min_chamfer"`` (lowest one-directional Chamfer distance from the
    aligned observation to the complete template). Ties go to the lowest
    index. Pass ``prepared`` to reuse template-side work across calls.
    """
    if selection not in ("min_loss", "min_chamfer"):
        raise ValueError(f"unknown selection {selection!r}")
    if len(observed) < n_keypoints:
        raise ValueError(f"observed cloud has {len(observed)} points, fewer than n={n_keypoints}")
    if desc_config.kind == "lps" and observed_ground is None:
        raise ValueError("LPS matching needs the ground plane in the observed frame")
    if prepared is None:
        prepared = prepare_template(template, dictionary, desc_config, 2 * n_keypoints,
                                    template_ground, normal_neighbors)
    if not observed.has_normals:
        observed = estimate_normals(observed, min(normal_neighbors, len(observed) - 1), sensor_origin)
    obs_keys = farthest_point_sampling(observed, n_keypoints)
    obs_desc = describe(observed, obs_keys, desc_config, observed_ground)

    def run(entry):
        return register_candidate(obs_keys, obs_desc, entry, prepared, observed.points, opt_config)

    workers = _worker_count(len(prepared.entries))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            candidates = list(pool.map(run, prepared.entries))
    else:
        candidates = [run(e) for e in prepared.entries]

    usable = [i for i, c in enumerate(candidates) if not c.degenerate]
    if not usable:
        raise AllCandidatesFailed("every candidate had a degenerate SVD initialisation")
    key = (lambda c: c.loss) if selection == "min_loss" else (lambda c: c.chamfer)
    best = min(usable, key=lambda i: (key(candidates[i]), i))
    chosen = candidates[best]
    log.debug("selected candidate %d of %d (%s)", best, len(candidates), selection)
    return RegistrationResult(chosen.pose, chosen.loss, chosen.chamfer, best, candidates, selection)


def aligned_cloud(result: RegistrationResult, observed: PointCloud) -> PointCloud:
    return apply_transform(result.pose, observed)
