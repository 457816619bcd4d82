"""Pipeline configuration: one JSON-serializable bundle of knobs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .core import DynParams
from .fusion import FusionParams
from .odometry import OdometryParams


@dataclass(frozen=True)
class PerceptionParams:
    nms_iou: float = 0.5
    assoc_iou: float = 0.3
    fb_max: float = 2.0
    cost_max: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    dyn: DynParams = field(default_factory=DynParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    odometry: OdometryParams = field(default_factory=OdometryParams)
    perception: PerceptionParams = field(default_factory=PerceptionParams)
    depth_min: float = 0.1
    depth_max: float = 10.0
    use_gt_pose: bool = True
    codec: str = "deflate"
    lockstep: bool = True
    tsdf_blocks_per_packet: int = 32
    # a changed block is re-streamed at most once per this many frames; the
    # final full flush reconciles whatever was still pending
    tsdf_restream_interval: int = 5
    provider: str = "ground_truth"   # ground_truth | naive_flow | replay

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        raw = json.loads(text)
        return cls._from_dict(raw)

    @classmethod
    def _from_dict(cls, raw: dict) -> "PipelineConfig":
        kwargs = dict(raw)
        if "dyn" in kwargs:
            kwargs["dyn"] = DynParams(**kwargs["dyn"])
        if "fusion" in kwargs:
            kwargs["fusion"] = FusionParams(**kwargs["fusion"])
        if "odometry" in kwargs:
            odo = dict(kwargs["odometry"])
            if "iterations" in odo:
                odo["iterations"] = tuple(odo["iterations"])
            kwargs["odometry"] = OdometryParams(**odo)
        if "perception" in kwargs:
            kwargs["perception"] = PerceptionParams(**kwargs["perception"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text())

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """Applies nested {"fusion": {...}, "dyn": {...}} style overrides."""
        cfg = self
        for section, values in overrides.items():
            if not isinstance(values, dict):
                cfg = replace(cfg, **{section: values})
                continue
            current = getattr(cfg, section)
            cfg = replace(cfg, **{section: replace(current, **values)})
        return cfg
