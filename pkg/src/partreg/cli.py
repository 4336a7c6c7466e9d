"""Command-line entry point: ``partreg <subcommand> ...``.

Exit codes: 0 success, 2 bad input (arguments, files, config), 3 when every
dictionary candidate failed, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .config import RunConfig
from .descriptors import build_affinity, extract_hard_correspondences, write_correspondences
from .errors import AllCandidatesFailed, IoError, PartregError
from .evaluate import evaluate
from .geometry import PointCloud, apply_transform
from .io import atomic_write_text, dumps_json, read_point_cloud, read_pose, write_point_cloud, write_pose
from .metrics import rotation_error, translation_error
from .registration import prepare_template, register_dictionary
from .sampling import (
    GroundFrame,
    PartitionDictionary,
    estimate_ground,
    estimate_normals,
    farthest_point_sampling,
    partition_template,
)
from .shapes import SHAPES, make_shape
from .synthetic import TrialSampler, generate_scan

log = logging.getLogger("partreg")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_FAILED = 0, 1, 2, 3
SELECTION_ALIASES = {"loss": "min_loss", "chamfer": "min_chamfer", "min_loss": "min_loss",
                     "min_chamfer": "min_chamfer"}


class UsageError(PartregError):
    """Inconsistent command-line arguments."""


# ------------------------------------------------------------------ helpers

def _vector(text):
    try:
        v = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three numbers, got {text!r}") from None
    if len(v) != 3 or not all(math.isfinite(x) for x in v):
        raise argparse.ArgumentTypeError(f"expected three finite numbers, got {text!r}")
    return v


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    for name in ("m", "n", "seed", "downsample"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "selection", None):
        changes["selection"] = SELECTION_ALIASES[args.selection]
    if getattr(args, "descriptor", None):
        changes["descriptor"] = args.descriptor
    return cfg.replace(**changes) if changes else cfg


def _load_template(args) -> PointCloud:
    if getattr(args, "shape", None):
        return make_shape(args.shape)
    if not args.template:
        raise UsageError("give --template or --shape")
    return read_point_cloud(args.template)


def _downsample(cloud: PointCloud, count):
    if count is None or len(cloud) <= count:
        return cloud
    return cloud.subset(farthest_point_sampling(cloud, count).source_indices)


def _sidecar(args):
    """Ground-truth document written by ``generate-scan`` (optional)."""
    if not getattr(args, "gt", None):
        return None, {}
    return read_pose(args.gt)


def _observed_frame(args, cfg: RunConfig, meta: dict):
    """Sensor origin and ground frame in the observed cloud's coordinates."""
    origin = args.sensor_origin or meta.get("sensor_origin") or [0.0, 0.0, 0.0]
    ground = None
    if args.ground_normal:
        ground = GroundFrame(args.ground_normal)
    elif args.background:
        ground = estimate_ground(read_point_cloud(args.background), origin)
    elif "ground_normal" in meta:
        ground = GroundFrame(meta["ground_normal"])
    if ground is None and cfg.descriptor == "lps":
        raise UsageError("the LPS descriptor needs the ground plane: pass --ground-normal, --background "
                         "or a --gt document that records it")
    return np.asarray(origin, dtype=np.float64), ground


def _dictionary(template, cfg: RunConfig):
    if cfg.m == 1:
        return PartitionDictionary.complete(template)
    return partition_template(template, cfg.m, cfg.view_radius_scale, cfg.hpr_exponent)


# -------------------------------------------------------------- subcommands

def cmd_register(args) -> int:
    cfg = _load_config(args)
    template = _load_template(args)
    observed = _downsample(read_point_cloud(args.observed), cfg.downsample)
    gt, meta = _sidecar(args)
    origin, ground = _observed_frame(args, cfg, meta)
    cfg = cfg.replace(template_path=args.template or f"shape:{args.shape}", observed_path=str(args.observed),
                      output_path=str(args.out))
    result = register_dictionary(
        observed, _dictionary(template, cfg), template, cfg.descriptor_config(template), cfg.optimizer_config(),
        selection=cfg.selection, n_keypoints=cfg.n, observed_ground=ground,
        template_ground=cfg.template_ground(), sensor_origin=origin, normal_neighbors=cfg.normal_neighbors)
    extra = {}
    if gt is not None:
        extra["ground_truth_error"] = {
            "rot_err_deg": math.degrees(rotation_error(gt.rotation, result.pose.rotation)),
            "trans_err": translation_error(gt.translation, result.pose.translation),
        }
        print("rotation error %.3f deg, translation error %.6g" % tuple(extra["ground_truth_error"].values()),
              file=sys.stderr)
    write_pose(result, args.out, cfg.to_dict(), extra)
    if args.dump_aligned:
        write_point_cloud(apply_transform(result.pose, PointCloud(observed.points)), args.dump_aligned)
    log.info("selected candidate %d (%s)", result.candidate_index, result.selection)
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    template = _load_template(args)
    dictionary = partition_template(template, cfg.m, cfg.view_radius_scale, cfg.hpr_exponent)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(dictionary.m - 1)))
    entries = []
    for i, (partial, view) in enumerate(zip(dictionary.partials, dictionary.viewpoints)):
        name = f"partial_{i:0{width}d}.ply"
        write_point_cloud(PointCloud(partial.points), out / name)
        entries.append({"file": name, "viewpoint": list(view), "points": len(partial)})
    doc = {"version": __version__, "m_requested": cfg.m, "dropped_views": [int(d) for d in dictionary.dropped],
           "partials": entries, "config": cfg.to_dict()}
    atomic_write_text(out / "partition.json", dumps_json(doc))
    print(f"wrote {len(entries)} partials to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    template = _load_template(args)
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    report = evaluate(template, cfg, args.trials, args.method, args.baseline_compare)
    report.write_csv(args.out)
    for method, s in report.summaries().items():
        print(f"{method}: mean {s.mean_rotation_deg:.2f} deg, median {s.median_rotation_deg:.2f} deg, "
              f"acc10 {s.acc_at_10deg:.2f}, acc30 {s.acc_at_30deg:.2f}, mean trans {s.mean_translation:.4g}",
              file=sys.stderr)
    return EXIT_OK


def cmd_generate_scan(args) -> int:
    cfg = _load_config(args)
    template = _load_template(args)
    rng = np.random.default_rng(cfg.seed)
    sampler = TrialSampler(cfg.noise_fraction, cfg.dropout_fraction, cfg.translation_box, cfg.view_radius_scale)
    spec = sampler.sample(template, rng)
    scan, gt = generate_scan(template, spec, cfg.hpr_exponent)
    write_point_cloud(scan, args.out)
    ground = spec.ground_in_sensor_frame(cfg.template_ground())
    doc = {"version": __version__, "rotation": [list(r) for r in gt.rotation], "translation": list(gt.translation),
           "sensor_origin": list(spec.sensor_origin), "ground_normal": list(ground.normal),
           "viewpoint_template_frame": list(spec.viewpoint), "noise_sigma": spec.noise_sigma,
           "dropout_fraction": spec.dropout_fraction, "points": len(scan), "config": cfg.to_dict()}
    gt_path = args.gt_out or str(Path(args.out).with_suffix(".gt.json"))
    atomic_write_text(gt_path, dumps_json(doc))
    print(f"wrote {len(scan)} points to {args.out}; ground truth in {gt_path}", file=sys.stderr)
    return EXIT_OK


def cmd_correspondences(args) -> int:
    cfg = _load_config(args)
    template = _load_template(args)
    observed = _downsample(read_point_cloud(args.observed), cfg.downsample)
    _, meta = _sidecar(args)
    origin, ground = _observed_frame(args, cfg, meta)
    dictionary = _dictionary(template, cfg)
    if not 0 <= args.partial < dictionary.m:
        raise UsageError(f"--partial must lie in [0, {dictionary.m - 1}]")
    desc = cfg.descriptor_config(template)
    prepared = prepare_template(template, PartitionDictionary([dictionary.partials[args.partial]],
                                                              [dictionary.viewpoints[args.partial]],
                                                              [dictionary.indices[args.partial]]),
                                desc, 2 * cfg.n, cfg.template_ground(), cfg.normal_neighbors)
    entry = prepared.entries[0]
    if not observed.has_normals:
        observed = estimate_normals(observed, min(cfg.normal_neighbors, len(observed) - 1), origin)
    keys = farthest_point_sampling(observed, cfg.n)
    A = build_affinity(observed, keys, entry.cloud, entry.keys, desc, ground, cfg.template_ground())
    to_template = np.asarray(dictionary.indices[args.partial])
    pairs = [(int(keys.source_indices[j]), int(to_template[entry.keys.source_indices[k]]))
             for j, k in extract_hard_correspondences(A)]
    write_correspondences(pairs, args.out)
    print(f"wrote {len(pairs)} correspondences (observed index, template index) to {args.out}", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partreg", description="Partial-to-template point cloud registration.")
    p.add_argument("--version", action="version", version=f"partreg {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, template_required=False):
        g = sp.add_mutually_exclusive_group(required=template_required)
        g.add_argument("--template", help="complete template cloud (PLY or OBJ)")
        g.add_argument("--shape", choices=SHAPES, help="use a built-in procedural template instead")
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--m", type=int, help="number of dictionary partials (overrides config)")
        sp.add_argument("--n", type=int, help="observed keypoint count (overrides config)")
        sp.add_argument("--descriptor", choices=("lps", "pfh"))
        sp.add_argument("--seed", type=int)

    def observed_args(sp):
        sp.add_argument("--observed", required=True, help="observed partial cloud (PLY or OBJ)")
        sp.add_argument("--sensor-origin", type=_vector, help="sensor position in the observed frame, 'x,y,z'")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--ground-normal", type=_vector, help="ground normal in the observed frame, 'x,y,z'")
        g.add_argument("--background", help="background cloud from which to fit the ground plane")
        sp.add_argument("--gt", help="ground-truth JSON (as written by generate-scan)")
        sp.add_argument("--downsample", type=int, help="farthest-point downsample the observed cloud first")

    r = sub.add_parser("register", help="estimate the pose of an observed cloud")
    common(r, True)
    observed_args(r)
    r.add_argument("--out", required=True, help="output pose JSON")
    r.add_argument("--selection", choices=sorted(SELECTION_ALIASES))
    r.add_argument("--dump-aligned", help="also write the observed cloud moved into the template frame")
    r.set_defaults(func=cmd_register)

    pt = sub.add_parser("partition", help="write the template's partial views as PLY files")
    common(pt, True)
    pt.add_argument("--out-dir", required=True)
    pt.set_defaults(func=cmd_partition)

    e = sub.add_parser("evaluate", help="register seeded synthetic scans and tabulate the errors")
    common(e, True)
    e.add_argument("--trials", type=int, required=True)
    e.add_argument("--out", required=True, help="output CSV")
    e.add_argument("--method", choices=("ours", "icp"), default="ours")
    e.add_argument("--baseline-compare", action="store_true",
                   help="also run the pipeline with the complete template as the only entry")
    e.add_argument("--selection", choices=sorted(SELECTION_ALIASES))
    e.add_argument("--downsample", type=int)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("generate-scan", help="simulate a posed, noisy partial scan of a template")
    common(g, True)
    g.add_argument("--out", required=True, help="output scan PLY")
    g.add_argument("--gt-out", help="ground-truth JSON (default: <out>.gt.json)")
    g.set_defaults(func=cmd_generate_scan)

    c = sub.add_parser("correspondences", help="dump hard keypoint correspondences for external solvers")
    common(c, True)
    observed_args(c)
    c.add_argument("--partial", type=int, default=0, help="dictionary entry to match against")
    c.add_argument("--out", required=True, help="output text file of 'observed_index template_index' lines")
    c.set_defaults(func=cmd_correspondences)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AllCandidatesFailed as exc:
        print(f"partreg: registration failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except IoError as exc:
        print(f"partreg: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (PartregError, ValueError, FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        # parse, format, config and argument problems
        print(f"partreg: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
