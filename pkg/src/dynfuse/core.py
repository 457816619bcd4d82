"""Shared image/geometry types and projection math.

Conventions used throughout the package:

- World frame is right-handed with y up; camera frame is the usual
  computer-vision one (x right, y down, z forward).
- Poses are 4x4 camera-to-world rigid transforms in meters.
- Depth maps store the camera-space z coordinate in meters; 0.0 marks an
  invalid measurement.  The wire format quantizes depth to millimeters.
- Pixel coordinates are (x, y) with x along image columns.  Optical flow is
  backward: pixel u in frame k corresponds to u + flow(u) in frame k-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive camera-space z."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


class Pose:
    """Rigid camera-to-world transform stored as a 4x4 row-major matrix.

    The rotation block must be orthonormal within 1e-5 and the last row is
    required to be exactly (0, 0, 0, 1).
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last pose row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block must be right-handed")
        self.matrix = m
        self.matrix.setflags(write=False)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def compose(self, other: "Pose") -> "Pose":
        """Returns the composition self * other (apply `other` first)."""
        return Pose(self.matrix @ other.matrix)

    def inverse(self) -> "Pose":
        r = self.matrix[:3, :3]
        t = self.matrix[:3, 3]
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ t
        return Pose(m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transforms an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix, other.matrix, atol=atol)

    def __repr__(self):
        t = self.translation
        return f"Pose(t=[{t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}])"


@dataclass(frozen=True)
class RgbdFrame:
    """One indexed color+depth image pair.

    color: (H, W, 3) uint8; depth: (H, W) float32 meters with 0.0 = invalid;
    timestamp in microseconds since the capture epoch.
    """

    index: int
    color: np.ndarray
    depth: np.ndarray
    timestamp_us: int

    def __post_init__(self):
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise ValueError("color must be (H, W, 3)")
        if self.depth.shape != self.color.shape[:2]:
            raise ValueError("depth and color dimensions differ")
        if self.color.dtype != np.uint8:
            raise ValueError("color must be uint8")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class FlowField:
    """Backward optical flow with validity, confidence and matcher cost.

    vectors: (H, W, 2) float32 (dx, dy) pixels; pixel u maps to u + vectors(u)
    in the previous frame.  weight is clamped to [0, 1] and forced to 0 on
    invalid pixels; cost is the raw per-pixel matcher cost (>= 0).
    """

    vectors: np.ndarray
    valid: np.ndarray
    weight: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        h, w = self.valid.shape
        if self.vectors.shape != (h, w, 2):
            raise ValueError("flow vectors must be (H, W, 2)")
        if self.weight.shape != (h, w) or self.cost.shape != (h, w):
            raise ValueError("weight/cost shape mismatch")
        weight = np.where(self.valid, np.clip(self.weight, 0.0, 1.0), 0.0)
        object.__setattr__(self, "weight", weight.astype(np.float32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def zero(cls, shape: tuple[int, int]) -> "FlowField":
        h, w = shape
        return cls(
            vectors=np.zeros((h, w, 2), np.float32),
            valid=np.ones((h, w), bool),
            weight=np.ones((h, w), np.float32),
            cost=np.zeros((h, w), np.float32),
        )


@dataclass(frozen=True)
class InstanceInfo:
    class_label: int
    pixel_count: int
    track_id: int


@dataclass(frozen=True)
class InstanceMap:
    """Per-pixel class labels and instance IDs plus per-instance metadata.

    ids == 0 means "no instance"; every nonzero id must appear as a key in
    `instances` and vice versa.  After track association, pixel ids are the
    persistent track ids.
    """

    labels: np.ndarray
    ids: np.ndarray
    instances: dict[int, InstanceInfo] = field(default_factory=dict)

    def __post_init__(self):
        if self.labels.shape != self.ids.shape:
            raise ValueError("labels/ids shape mismatch")
        present = set(np.unique(self.ids).tolist()) - {0}
        if present != set(self.instances.keys()):
            raise ValueError("instance metadata does not cover map ids")
        if np.any((self.ids != 0) & (self.labels == 0)):
            raise ValueError("instance pixels must carry a class label")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "InstanceMap":
        return cls(np.zeros(shape, np.int32), np.zeros(shape, np.int32), {})

    def mask_of(self, instance_id: int) -> np.ndarray:
        return self.ids == instance_id


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel dynamicity score and accumulated motion (meters), both >= 0."""

    scores: np.ndarray
    accum: np.ndarray

    def __post_init__(self):
        if self.scores.shape != self.accum.shape:
            raise ValueError("score/accum shape mismatch")


@dataclass(frozen=True)
class DynParams:
    """Knobs for the dynamicity scoring chain.

    dynamic_threshold is the score above which an instance is dynamic; scores
    <= 1 are static and the band in between is resolved by hysteresis.
    invalidate_threshold triggers signed-distance invalidation during fusion.
    """

    dynamic_threshold: float = 1.5
    rescale: float = 0.5
    invalidate_threshold: float = 1.0
    bin_width: float = 0.5
    min_mode_px: int = 30
    min_mode_frac: float = 0.02
    smoothing: float = 0.3

    def __post_init__(self):
        if self.dynamic_threshold < 1.0:
            raise ValueError("dynamic threshold must be >= 1")
        if self.rescale < 0.0:
            raise ValueError("rescale factor must be >= 0")
        if self.invalidate_threshold <= 0.0:
            raise ValueError("invalidate threshold must be > 0")
        if not (0.0 < self.smoothing <= 1.0):
            raise ValueError("smoothing factor must be in (0, 1]")
        if self.bin_width <= 0.0:
            raise ValueError("bin width must be > 0")

    def min_mode_size(self, instance_pixels: int) -> int:
        return max(self.min_mode_px, int(self.min_mode_frac * instance_pixels))


# ---------------------------------------------------------------------------
# Projection math
# ---------------------------------------------------------------------------

def backproject(u: tuple[float, float], d: float,
                intr: CameraIntrinsics) -> Optional[tuple[float, float, float]]:
    """Lifts pixel u at depth d to a camera-space point; None if d <= 0."""
    if d <= 0.0:
        return None
    x, y = u
    return ((x - intr.cx) * d / intr.fx, (y - intr.cy) * d / intr.fy, d)


def project(p, intr: CameraIntrinsics) -> tuple[float, float]:
    """Projects a camera-space point to subpixel coordinates.

    Raises BehindCameraError for z <= 0; the caller checks image bounds.
    """
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    if z <= 0.0:
        raise BehindCameraError(f"point behind camera (z={z})")
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def transform(p, pose: Pose) -> np.ndarray:
    """Applies a rigid transform to a point or an (..., 3) array."""
    return pose.apply(p)


@lru_cache(maxsize=8)
def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) float64 ray directions with z = 1, one per pixel center."""
    ys, xs = np.mgrid[0:intr.height, 0:intr.width]
    rays = np.empty((intr.height, intr.width, 3), np.float64)
    rays[..., 0] = (xs - intr.cx) / intr.fx
    rays[..., 1] = (ys - intr.cy) / intr.fy
    rays[..., 2] = 1.0
    return rays


def backproject_grid(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-space points for a whole depth map, (H, W, 3).

    Entries with depth <= 0 are garbage; mask with (depth > 0).
    """
    return pixel_rays(intr) * depth[..., None].astype(np.float64)


def project_points(points: np.ndarray, intr: CameraIntrinsics):
    """Projects (..., 3) camera-space points.

    Returns (pixels (..., 2), valid) where valid requires z > 0 and the
    projection to land inside the image.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    px = np.empty(p.shape[:-1] + (2,), np.float64)
    px[..., 0] = intr.fx * p[..., 0] / safe_z + intr.cx
    px[..., 1] = intr.fy * p[..., 1] / safe_z + intr.cy
    inside = (
        (px[..., 0] >= 0) & (px[..., 0] <= intr.width - 1)
        & (px[..., 1] >= 0) & (px[..., 1] <= intr.height - 1)
    )
    return px, front & inside


def warp_image(prev: np.ndarray, flow: FlowField) -> np.ndarray:
    """Samples `prev` at u + flow(u) with bilinear interpolation.

    Out-of-bounds targets and invalid-flow pixels produce 0 so that
    disocclusions forget accumulated state.  Works on (H, W) and (H, W, C).
    """
    h, w = flow.shape
    if prev.shape[:2] != (h, w):
        raise ValueError("image/flow dimensions differ")
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + flow.vectors[..., 0].astype(np.float64)
    ty = ys + flow.vectors[..., 1].astype(np.float64)
    inside = flow.valid & (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    tx = np.where(inside, tx, 0.0)
    ty = np.where(inside, ty, 0.0)

    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = tx - x0
    ay = ty - y0

    src = prev.astype(np.float64)
    p00 = src[y0, x0]
    p10 = src[y0, x1]
    p01 = src[y1, x0]
    p11 = src[y1, x1]
    if src.ndim == 3:
        ax = ax[..., None]
        ay = ay[..., None]
    top = p00 + (p10 - p00) * ax
    bot = p01 + (p11 - p01) * ax
    out = top + (bot - top) * ay
    if src.ndim == 3:
        out[~inside] = 0.0
    else:
        out = np.where(inside, out, 0.0)
    return out.astype(prev.dtype)
