"""Synthetic evaluation harness.

Draws seeded scans of a template, registers each one and tabulates the
pose errors. Rows come out in trial order whatever the thread count, and
nothing time- or machine-dependent is written, so a fixed seed gives a
byte-identical CSV.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._version import __version__
from .config import RunConfig
from .errors import AllCandidatesFailed, EmptyScan
from .geometry import NeighborIndex, PointCloud
from .io import write_csv
from .metrics import PoseErrorSummary, rotation_error, summarize, translation_error
from .registration import (
    _worker_count,
    icp_multistart,
    prepare_template,
    register_dictionary,
)
from .sampling import PartitionDictionary, farthest_point_sampling, partition_template
from .synthetic import ScanSpec, TrialSampler, generate_scan

log = logging.getLogger(__name__)

METHODS = ("ours", "ours_complete", "icp")
TRIAL_FIELDS = ("row_type", "method", "trial", "status", "rot_err_deg", "trans_err", "loss", "chamfer", "candidate")
CSV_FIELDS = TRIAL_FIELDS + PoseErrorSummary.CSV_FIELDS + ("count",)
# scans that come out smaller than this are redrawn
MAX_REDRAWS = 100


@dataclass(frozen=True)
class Trial:
    index: int
    spec: ScanSpec
    scan: PointCloud


@dataclass(frozen=True)
class TrialRecord:
    method: str
    trial: int
    rotation_rad: float
    translation: float
    loss: float
    chamfer: float
    candidate: int
    failed: bool = False

    def as_row(self) -> dict:
        return {
            "row_type": "trial", "method": self.method, "trial": self.trial,
            "status": "failed" if self.failed else "ok",
            "rot_err_deg": math.degrees(self.rotation_rad), "trans_err": self.translation,
            "loss": self.loss, "chamfer": self.chamfer, "candidate": self.candidate,
        }


def draw_trials(template: PointCloud, config: RunConfig, count: int) -> list:
    """Seeded scans; a draw whose scan is too small for ``n`` keypoints is
    replaced by the next draw from the same stream."""
    rng = np.random.default_rng(config.seed)
    sampler = TrialSampler(config.noise_fraction, config.dropout_fraction, config.translation_box,
                           config.view_radius_scale)
    trials = []
    for i in range(count):
        for _ in range(MAX_REDRAWS):
            spec = sampler.sample(template, rng)
            try:
                scan, _ = generate_scan(template, spec, config.hpr_exponent)
            except EmptyScan:
                continue
            if len(scan) > max(config.n, config.normal_neighbors):
                break
        else:
            raise EmptyScan(f"could not draw a usable scan for trial {i}")
        if config.downsample is not None and len(scan) > config.downsample:
            scan = scan.subset(farthest_point_sampling(scan, config.downsample).source_indices)
        trials.append(Trial(i, spec, scan))
    return trials


class Evaluator:
    """Registers trials with one method; template-side work is done once."""

    def __init__(self, template: PointCloud, config: RunConfig, method: str = "ours"):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        self.template = template
        self.config = config
        self.method = method
        self.diag = template.bbox_diagonal()
        self.index = NeighborIndex(template.points)
        self.prepared = None
        if method != "icp":
            self.desc = config.descriptor_config(template)
            if method == "ours":
                dictionary = partition_template(template, config.m, config.view_radius_scale, config.hpr_exponent)
            else:
                dictionary = PartitionDictionary.complete(template)
            self.dictionary = dictionary
            self.prepared = prepare_template(template, dictionary, self.desc, 2 * config.n,
                                             config.template_ground(), config.normal_neighbors)

    def run(self, trial: Trial) -> TrialRecord:
        cfg = self.config
        gt = trial.spec.camera_pose
        if self.method == "icp":
            res = icp_multistart(trial.scan, self.index, cfg.icp_starts, cfg.icp_max_iter)
            pose, loss, chamfer, cand = res.pose, res.residual, res.residual, res.start_index
        else:
            try:
                res = register_dictionary(
                    trial.scan, self.dictionary, self.template, self.desc, cfg.optimizer_config(),
                    selection=cfg.selection, n_keypoints=cfg.n,
                    observed_ground=trial.spec.ground_in_sensor_frame(cfg.template_ground()),
                    sensor_origin=trial.spec.sensor_origin, normal_neighbors=cfg.normal_neighbors,
                    prepared=self.prepared)
            except AllCandidatesFailed:
                log.warning("trial %d: every candidate failed", trial.index)
                return TrialRecord(self.method, trial.index, math.pi, self.diag, math.nan, math.nan, -1, True)
            pose, loss, chamfer, cand = res.pose, res.final_loss, res.chamfer_to_template, res.candidate_index
        rec = TrialRecord(self.method, trial.index, rotation_error(gt.rotation, pose.rotation),
                          translation_error(gt.translation, pose.translation), loss, chamfer, cand)
        log.info("%s trial %d: rot %.2f deg, trans %.4g", self.method, trial.index,
                 math.degrees(rec.rotation_rad), rec.translation)
        return rec

    def run_all(self, trials) -> list:
        workers = _worker_count(len(trials))
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(self.run, trials))
        return [self.run(t) for t in trials]


def summary_row(method: str, records) -> dict:
    s = summarize([(r.rotation_rad, r.translation) for r in records])
    row = {"row_type": "summary", "method": method, "count": s.count}
    row.update(s.as_row())
    return row


@dataclass(frozen=True)
class EvaluationReport:
    config: RunConfig
    records: dict  # method -> list of TrialRecord

    def summaries(self) -> dict:
        return {m: summarize([(r.rotation_rad, r.translation) for r in recs]) for m, recs in self.records.items()}

    def rows(self) -> list:
        out = []
        for method, recs in self.records.items():
            out.extend(r.as_row() for r in recs)
        for method, recs in self.records.items():
            out.append(summary_row(method, recs))
        return out

    def header_lines(self) -> list:
        return [f"partreg {__version__}",
                "config " + json.dumps(self.config.to_dict(), sort_keys=True, separators=(",", ":"))]

    def write_csv(self, path) -> None:
        write_csv(path, CSV_FIELDS, self.rows(), self.header_lines())


def evaluate(template: PointCloud, config: RunConfig, trials: int, method: str = "ours",
             baseline_compare: bool = False) -> EvaluationReport:
    """Run ``trials`` seeded scans through ``method``.

    With ``baseline_compare`` the same scans also go through the pipeline
    with a single complete-template entry (``ours_complete``).
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    methods = [method]
    if baseline_compare and method != "ours_complete":
        methods.append("ours_complete")
    drawn = draw_trials(template, config, trials)
    records = {m: Evaluator(template, config, m).run_all(drawn) for m in methods}
    return EvaluationReport(config, records)


def success_rate(records, diag: float, max_rot_deg: float = 10.0, max_trans_fraction: float = 0.05) -> float:
    ok = [math.degrees(r.rotation_rad) <= max_rot_deg and r.translation <= max_trans_fraction * diag
          for r in records]
    return float(np.mean(ok))

