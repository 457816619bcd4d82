"""Scene scripts: declarative synthetic scenes with known ground truth.

A script lists static primitives, optionally detected/moving objects with
rigid trajectories, a camera trajectory, and render settings.  Everything is
plain data (JSON round-trippable) so recorded sequences are reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..core import CameraIntrinsics, Pose


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose with CV axes (x right, y down, z forward)."""
    eye = np.asarray(eye, float)
    f = np.asarray(target, float) - eye
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, float)
    r = np.cross(f, upv)
    n = np.linalg.norm(r)
    if n < 1e-9:
        raise ValueError("camera forward is parallel to up")
    r = r / n
    d = np.cross(f, r)
    m = np.eye(4)
    m[:3, 0] = r
    m[:3, 1] = d
    m[:3, 2] = f
    m[:3, 3] = eye
    return Pose(m)


@dataclass(frozen=True)
class Primitive:
    """Object-local geometry: an axis-aligned box or a sphere at the origin.

    size is the full box extent (meters) or (diameter, _, _) for spheres.
    checker > 0 draws a two-tone checker with that cell size using albedo2.
    """

    kind: str                      # "box" | "sphere"
    size: tuple[float, float, float]
    albedo: tuple[int, int, int]
    albedo2: tuple[int, int, int] = (0, 0, 0)
    checker: float = 0.0

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class Trajectory:
    """Time-parameterized rigid placement (translation only).

    kinds:
      fixed:     position
      linear:    p0 -> p1 over [start, stop], clamped outside
      sinusoid:  position + axis * amplitude * sin(2 pi (k-start)/period)
                 for k in [start, stop], clamped outside
      waypoints: piecewise-constant positions [(frame, p), ...] (teleports)
    """

    kind: str = "fixed"
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    p1: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    amplitude: float = 0.0
    period: float = 30.0
    start: int = 0
    stop: int = 0
    waypoints: tuple = ()

    def position_at(self, k: int) -> np.ndarray:
        p0 = np.asarray(self.position, float)
        if self.kind == "fixed":
            return p0
        if self.kind == "linear":
            if self.stop <= self.start:
                return p0
            t = min(max(k, self.start), self.stop)
            a = (t - self.start) / (self.stop - self.start)
            return p0 + a * (np.asarray(self.p1, float) - p0)
        if self.kind == "sinusoid":
            t = min(max(k, self.start), self.stop)
            phase = 2.0 * math.pi * (t - self.start) / self.period
            return p0 + np.asarray(self.axis, float) * self.amplitude * math.sin(phase)
        if self.kind == "waypoints":
            pos = p0
            for frame, p in self.waypoints:
                if k >= frame:
                    pos = np.asarray(p, float)
            return pos
        raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def pose_at(self, k: int) -> Pose:
        return Pose.from_rt(np.eye(3), self.position_at(k))


@dataclass(frozen=True)
class CameraPath:
    """Camera trajectory; eye follows a Trajectory, aimed at a target point.

    With target1 set, the aim sweeps out to target1 and back to target over
    [target_start, target_stop] (a look-away-and-return pan).
    """

    eye: Trajectory
    target: tuple[float, float, float]
    target1: tuple[float, float, float] | None = None
    target_start: int = 0
    target_stop: int = 0

    def pose_at(self, k: int) -> Pose:
        target = np.asarray(self.target, float)
        if self.target1 is not None and self.target_stop > self.target_start:
            t = min(max(k, self.target_start), self.target_stop)
            f = (t - self.target_start) / (self.target_stop - self.target_start)
            a = 1.0 - abs(2.0 * f - 1.0)
            target = target + a * (np.asarray(self.target1, float) - target)
        return look_at(self.eye.position_at(k), target)


@dataclass(frozen=True)
class SceneObject:
    """A primitive with a placement trajectory.

    class_label > 0 marks the object as detectable by instance segmentation;
    label 0 objects are anonymous static geometry (walls, floor).
    """

    name: str
    primitive: Primitive
    trajectory: Trajectory
    class_label: int = 0


@dataclass(frozen=True)
class SceneScript:
    name: str
    objects: tuple[SceneObject, ...]
    camera: CameraPath
    frame_count: int
    width: int = 320
    height: int = 240
    fx: float = 260.0
    fy: float = 260.0
    fps: float = 30.0
    depth_min: float = 0.1
    depth_max: float = 10.0
    depth_noise_std: float = 0.0
    seed: int = 0
    background: tuple[int, int, int] = (40, 40, 48)
    # per-script pipeline overrides (fusion weight cap etc.), applied by the CLI
    config_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not any(o.trajectory.kind == "fixed" for o in self.objects):
            raise ValueError("script needs at least one static primitive")
        if self.frame_count <= 0:
            raise ValueError("frame_count must be positive")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, (self.width - 1) / 2.0,
                                (self.height - 1) / 2.0, self.width, self.height)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneScript":
        raw = json.loads(text)

        def _traj(d):
            d = dict(d)
            d["position"] = tuple(d.get("position", (0, 0, 0)))
            d["p1"] = tuple(d.get("p1", (0, 0, 0)))
            d["axis"] = tuple(d.get("axis", (1, 0, 0)))
            d["waypoints"] = tuple((int(f), tuple(p)) for f, p in d.get("waypoints", ()))
            return Trajectory(**d)

        objects = tuple(
            SceneObject(
                name=o["name"],
                primitive=Primitive(
                    kind=o["primitive"]["kind"],
                    size=tuple(o["primitive"]["size"]),
                    albedo=tuple(o["primitive"]["albedo"]),
                    albedo2=tuple(o["primitive"].get("albedo2", (0, 0, 0))),
                    checker=o["primitive"].get("checker", 0.0),
                ),
                trajectory=_traj(o["trajectory"]),
                class_label=o.get("class_label", 0),
            )
            for o in raw["objects"]
        )
        cam = raw["camera"]
        camera = CameraPath(
            eye=_traj(cam["eye"]),
            target=tuple(cam["target"]),
            target1=tuple(cam["target1"]) if cam.get("target1") else None,
            target_start=cam.get("target_start", 0),
            target_stop=cam.get("target_stop", 0),
        )
        keys = ("name", "frame_count", "width", "height", "fx", "fy", "fps",
                "depth_min", "depth_max", "depth_noise_std", "seed")
        kwargs = {k: raw[k] for k in keys if k in raw}
        kwargs["background"] = tuple(raw.get("background", (40, 40, 48)))
        kwargs["config_overrides"] = raw.get("config_overrides", {})
        return cls(objects=objects, camera=camera, **kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "SceneScript":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# Bundled scripts, mirroring a fixed/moving/outside-view scene taxonomy
# ---------------------------------------------------------------------------

def _room(extent=2.4, height=1.8, checker=0.3):
    """Floor plus two walls enclosing the origin corner-style."""
    wall = Primitive("box", (extent, height, 0.05), (150, 148, 140))
    side = Primitive("box", (0.05, height, extent), (135, 140, 150))
    floor = Primitive("box", (extent, 0.05, extent), (118, 113, 103),
                      albedo2=(138, 133, 123), checker=checker)
    return (
        SceneObject("floor", floor, Trajectory("fixed", (0.0, -0.025, extent / 2))),
        SceneObject("wall_back", wall, Trajectory("fixed", (0.0, height / 2, extent))),
        SceneObject("wall_left", side, Trajectory("fixed", (-extent / 2, height / 2, extent / 2))),
    )


def _static_props():
    return (
        SceneObject(
            "crate",
            Primitive("box", (0.3, 0.3, 0.3), (180, 120, 60)),
            Trajectory("fixed", (-0.5, 0.15, 1.5)),
            class_label=2,
        ),
        SceneObject(
            "ball",
            Primitive("sphere", (0.24, 0.24, 0.24), (60, 110, 190)),
            Trajectory("fixed", (0.55, 0.12, 1.3)),
        ),
    )


def _camera_default(frames, sweep=0.25):
    return CameraPath(
        eye=Trajectory("linear", (0.0, 1.0, -0.6), p1=(sweep, 1.05, -0.5),
                       start=0, stop=max(1, frames - 1)),
        target=(0.0, 0.2, 1.4),
    )


def static_room(frames: int = 100) -> SceneScript:
    """Static desk-scale room; one detectable but never-moving prop."""
    return SceneScript(
        name="static_room",
        objects=_room() + _static_props(),
        camera=_camera_default(frames),
        frame_count=frames,
    )


def moving_box(frames: int = 90, onset: int = 15, stop: int = 60) -> SceneScript:
    """Category M: camera drifts while a box oscillates, then parks.

    Geometry tuned so the box turns dynamic within two frames of onset and
    its whole original footprint scores above the invalidation threshold on
    the first moving frame.
    """
    box = SceneObject(
        "runner",
        Primitive("box", (0.12, 0.12, 0.12), (200, 60, 50)),
        Trajectory("sinusoid", (0.0, 0.06, 0.9), axis=(1.0, 0.0, 0.0),
                   amplitude=0.24, period=30.0, start=onset, stop=stop),
        class_label=1,
    )
    return SceneScript(
        name="moving_box",
        objects=_room() + (box,) + _static_props(),
        camera=CameraPath(
            eye=Trajectory("linear", (0.0, 0.9, -0.55), p1=(0.06, 0.92, -0.5),
                           start=0, stop=frames - 1),
            target=(0.0, 0.15, 1.2),
        ),
        frame_count=frames,
        config_overrides={"fusion": {"weight_max": 4.0, "weight_dynamic": 2.0}},
    )


def oof_box(frames: int = 150, away_start: int = 40, back_start: int = 60) -> SceneScript:
    """Category O: a box relocates while the camera looks away."""
    box = SceneObject(
        "mover",
        Primitive("box", (0.16, 0.16, 0.16), (60, 170, 70)),
        Trajectory("waypoints", (-0.35, 0.08, 1.3),
                   waypoints=(((away_start + back_start) // 2, (0.45, 0.08, 1.45)),)),
        class_label=1,
    )
    return SceneScript(
        name="oof_box",
        objects=_room() + (box,),
        camera=CameraPath(
            eye=Trajectory("fixed", (0.0, 0.95, -0.6)),
            target=(0.0, 0.2, 1.3),
            target1=(-2.6, 0.5, 0.2),
            target_start=away_start,
            target_stop=back_start,
        ),
        frame_count=frames,
        config_overrides={"fusion": {"weight_max": 16.0, "weight_dynamic": 2.0}},
    )


def _fixed_cam_items(frames=80):
    box = SceneObject(
        "slider",
        Primitive("box", (0.14, 0.14, 0.14), (210, 160, 40)),
        Trajectory("linear", (-0.4, 0.07, 1.25), p1=(0.4, 0.07, 1.25),
                   start=20, stop=55),
        class_label=1,
    )
    return SceneScript(
        name="items_fixed",
        objects=_room() + (box,) + _static_props(),
        camera=CameraPath(eye=Trajectory("fixed", (0.0, 1.0, -0.6)),
                          target=(0.0, 0.2, 1.3)),
        frame_count=frames,
        config_overrides={"fusion": {"weight_max": 8.0, "weight_dynamic": 2.0}},
    )


def _two_movers(frames=100):
    a = SceneObject(
        "lift",
        Primitive("box", (0.12, 0.12, 0.12), (210, 70, 160)),
        Trajectory("linear", (-0.45, 0.06, 1.4), p1=(-0.45, 0.5, 1.4),
                   start=25, stop=60),
        class_label=1,
    )
    b = SceneObject(
        "drift",
        Primitive("sphere", (0.16, 0.16, 0.16), (90, 200, 200)),
        Trajectory("sinusoid", (0.4, 0.3, 1.5), axis=(0.0, 0.0, 1.0),
                   amplitude=0.2, period=40.0, start=20, stop=90),
        class_label=3,
    )
    return SceneScript(
        name="two_movers",
        objects=_room() + (a, b),
        camera=_camera_default(frames, sweep=0.3),
        frame_count=frames,
        config_overrides={"fusion": {"weight_max": 8.0, "weight_dynamic": 2.0}},
    )


def bundled_scripts() -> dict[str, SceneScript]:
    """Ten bundled scripts across the fixed/moving/outside taxonomy."""
    out = {}
    for s in (
        static_room(100),
        static_room(40),
        _fixed_cam_items(),
        _fixed_cam_items(60),
        moving_box(),
        moving_box(40, onset=10, stop=30),
        _two_movers(),
        oof_box(),
        oof_box(120, away_start=30, back_start=50),
        moving_box(70, onset=12, stop=45),
    ):
        key = s.name
        n = 1
        while key in out:
            n += 1
            key = f"{s.name}_{n}"
        out[key] = s
    return out
