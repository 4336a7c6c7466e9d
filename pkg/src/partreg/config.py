"""Run configuration: every knob of the pipeline in one JSON-serialisable record."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .descriptors import (
    DEFAULT_EPSILON,
    DEFAULT_FALLBACK_DEG,
    DEFAULT_FSCORE_FRACTION,
    DEFAULT_RADIUS_FRACTION,
    PFH_BINS,
    DescriptorConfig,
)
from .errors import ConfigError
from .geometry import PointCloud
from .registration import OptimizerConfig
from .sampling import (
    DEFAULT_HPR_EXPONENT,
    DEFAULT_NORMAL_NEIGHBORS,
    DEFAULT_PARTITIONS,
    DEFAULT_VIEW_RADIUS_SCALE,
    GroundFrame,
)

SELECTIONS = ("min_loss", "min_chamfer")


@dataclass
class RunConfig:
    """Resolved settings for one run.

    ``radius`` / ``fscore_threshold`` are absolute lengths; when left as
    ``None`` they are derived from the template diagonal through
    ``radius_fraction`` and ``fscore_fraction``. ``template_up`` is the
    ground normal expressed in the template frame.
    """

    # descriptors
    descriptor: str = "lps"
    radius: float | None = None
    radius_fraction: float = DEFAULT_RADIUS_FRACTION
    fscore_threshold: float | None = None
    fscore_fraction: float = DEFAULT_FSCORE_FRACTION
    bins: int = PFH_BINS
    epsilon: float = DEFAULT_EPSILON
    fallback_deg: float = DEFAULT_FALLBACK_DEG
    normal_neighbors: int = DEFAULT_NORMAL_NEIGHBORS
    template_up: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    # dictionary
    m: int = DEFAULT_PARTITIONS
    n: int = 128
    hpr_exponent: float = DEFAULT_HPR_EXPONENT
    view_radius_scale: float = DEFAULT_VIEW_RADIUS_SCALE
    # optimizer
    learning_rate: float = 0.001
    steps_per_stage: int = 300
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    chamfer_weight: float = 0.0
    selection: str = "min_chamfer"
    # baseline
    icp_starts: int = 20
    icp_max_iter: int = 100
    # synthetic trials
    seed: int = 0
    noise_fraction: float = 0.005
    dropout_fraction: float = 0.1
    translation_box: float = 0.25
    downsample: int | None = None
    # paths (informational; the CLI fills them in)
    template_path: str | None = None
    observed_path: str | None = None
    output_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.descriptor in ("lps", "pfh"), f"descriptor must be 'lps' or 'pfh', got {self.descriptor!r}")
        need(self.selection in SELECTIONS, f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        for name in ("m", "n", "bins", "steps_per_stage", "normal_neighbors", "icp_starts", "icp_max_iter"):
            v = getattr(self, name)
            need(isinstance(v, int) and not isinstance(v, bool) and v >= 1, f"{name} must be a positive integer")
        need(self.normal_neighbors >= 3, "normal_neighbors must be at least 3")
        for name in ("radius_fraction", "fscore_fraction", "epsilon", "learning_rate", "view_radius_scale",
                     "adam_epsilon"):
            v = getattr(self, name)
            need(_finite(v) and v > 0, f"{name} must be a positive number")
        for name in ("radius", "fscore_threshold"):
            v = getattr(self, name)
            need(v is None or (_finite(v) and v > 0), f"{name} must be positive when given")
        need(_finite(self.chamfer_weight) and self.chamfer_weight >= 0, "chamfer_weight must be non-negative")
        need(_finite(self.noise_fraction) and self.noise_fraction >= 0, "noise_fraction must be non-negative")
        need(_finite(self.dropout_fraction) and 0 <= self.dropout_fraction < 1, "dropout_fraction must lie in [0, 1)")
        need(_finite(self.translation_box) and self.translation_box >= 0, "translation_box must be non-negative")
        need(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "Adam betas must lie in [0, 1)")
        need(0 <= self.fallback_deg < 90, "fallback_deg must lie in [0, 90)")
        need(_finite(self.hpr_exponent), "hpr_exponent must be finite")
        need(self.downsample is None or (isinstance(self.downsample, int) and self.downsample >= self.n),
             "downsample must be an integer of at least n")
        need(isinstance(self.seed, int) and not isinstance(self.seed, bool) and self.seed >= 0,
             "seed must be a non-negative integer")
        up = self.template_up
        need(isinstance(up, (list, tuple)) and len(up) == 3 and all(_finite(c) for c in up)
             and any(c != 0 for c in up), "template_up must be a non-zero 3-vector")
        self.template_up = [float(c) for c in up]
        return self

    # --------------------------------------------------------- derived objects

    def descriptor_config(self, template: PointCloud) -> DescriptorConfig:
        diag = template.bbox_diagonal()
        r = self.radius if self.radius is not None else self.radius_fraction * diag
        tau = self.fscore_threshold if self.fscore_threshold is not None else self.fscore_fraction * r
        return DescriptorConfig(kind=self.descriptor, radius=r, bins=self.bins, epsilon=self.epsilon,
                                fscore_threshold=tau, fallback_deg=self.fallback_deg)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(learning_rate=self.learning_rate, steps_per_stage=self.steps_per_stage,
                               adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
                               adam_epsilon=self.adam_epsilon, chamfer_weight=self.chamfer_weight)

    def template_ground(self) -> GroundFrame:
        return GroundFrame(self.template_up)

    # ----------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        return cls.from_json(text)

    def save(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, self.to_json())

    def replace(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return type(self).from_dict(data)


def _finite(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
