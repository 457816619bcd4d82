"""Analytic RGB-D renderer with exact ground-truth flow, poses and masks.

Rays are parameterized with camera-space z as the ray parameter, so the
intersection parameter t is directly the stored depth value.  Backward flow
is the true motion field: each hit point is pulled back through its object's
trajectory to the previous frame and reprojected into the previous camera.
"""

from __future__ import annotations

import numpy as np

from ..core import (
    CameraIntrinsics,
    FlowField,
    InstanceInfo,
    InstanceMap,
    Pose,
    RgbdFrame,
    pixel_rays,
)
from .scripts import SceneScript


_NO_HIT = 1e30


def _intersect_box(origins, dirs, half):
    """Entry parameter of rays against an origin-centered AABB (slab method)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (-half - origins) * inv
    t2 = (half - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 0) & (tmin > 1e-6)
    return np.where(hit, tmin, _NO_HIT)


def _intersect_sphere(origins, dirs, radius):
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = 2.0 * np.einsum("...i,...i->...", origins, dirs)
    c = np.einsum("...i,...i->...", origins, origins) - radius**2
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit = ok & (t > 1e-6)
    return np.where(hit, t, _NO_HIT)


class SyntheticSequence:
    """Renders script frames on demand; serves the ground-truth provider API."""

    def __init__(self, script: SceneScript):
        self.script = script
        self.intrinsics: CameraIntrinsics = script.intrinsics
        self.frame_count = script.frame_count
        self._cache: dict[int, tuple] = {}

    # -- trajectory helpers -------------------------------------------------

    def pose(self, k: int) -> Pose:
        return self.script.camera.pose_at(k)

    def timestamp_us(self, k: int) -> int:
        return int(round(k * 1e6 / self.script.fps))

    # -- rendering ----------------------------------------------------------

    def _trace_rays(self, origins: np.ndarray, dirs: np.ndarray, k: int):
        """Nearest intersection parameter and object index per ray at frame k."""
        n = dirs.shape[0]
        best_t = np.full(n, _NO_HIT)
        winner = np.full(n, -1, np.int64)
        for oi, obj in enumerate(self.script.objects):
            offset = obj.trajectory.position_at(k)
            o = origins - offset
            if obj.primitive.kind == "box":
                half = np.asarray(obj.primitive.size, float) / 2.0
                t = _intersect_box(o, dirs, half)
            else:
                t = _intersect_sphere(o, dirs, obj.primitive.size[0] / 2.0)
            closer = t < best_t
            best_t[closer] = t[closer]
            winner[closer] = oi
        return best_t, winner

    def _trace(self, k: int):
        """Camera-ray trace for frame k.

        Rays carry camera-space z as the parameter, so t is directly the
        stored depth.  Returns (t, winner_index, dirs, eye).
        """
        intr = self.intrinsics
        cam = self.pose(k)
        dirs = pixel_rays(intr).reshape(-1, 3) @ cam.rotation.T
        eye = cam.translation
        best_t, winner = self._trace_rays(np.broadcast_to(eye, dirs.shape), dirs, k)
        return best_t, winner, dirs, eye

    def render(self, k: int):
        """Full ground truth for frame k.

        Returns (RgbdFrame, Pose, InstanceMap, FlowField).
        """
        if k in self._cache:
            return self._cache[k]
        if not 0 <= k < self.frame_count:
            raise IndexError(f"frame {k} out of range")
        script = self.script
        intr = self.intrinsics
        h, w = intr.height, intr.width
        best_t, winner, dirs, eye = self._trace(k)

        hit = winner >= 0
        depth = np.where(hit, best_t, 0.0)
        in_range = hit & (depth >= script.depth_min) & (depth <= script.depth_max)
        depth = np.where(in_range, depth, 0.0)

        world = eye + dirs * best_t[:, None]

        color = np.empty((h * w, 3), np.uint8)
        color[:] = script.background
        for oi, obj in enumerate(self.script.objects):
            sel = winner == oi
            if not np.any(sel):
                continue
            prim = obj.primitive
            if prim.checker > 0:
                local = world[sel] - obj.trajectory.position_at(k)
                cells = np.floor(local / prim.checker).astype(np.int64).sum(axis=1)
                color[sel] = np.where((cells % 2 == 0)[:, None],
                                      np.asarray(prim.albedo, np.uint8),
                                      np.asarray(prim.albedo2, np.uint8))
            else:
                color[sel] = prim.albedo

        # Backward flow: pull hit points through the object motion, reproject
        prev_k = max(k - 1, 0)
        prev_pose_inv = self.pose(prev_k).inverse()
        prev_world = world.copy()
        for oi, obj in enumerate(self.script.objects):
            if obj.trajectory.kind == "fixed":
                continue
            sel = winner == oi
            if not np.any(sel):
                continue
            shift = (obj.trajectory.position_at(prev_k)
                     - obj.trajectory.position_at(k))
            prev_world[sel] += shift
        prev_cam = prev_pose_inv.apply(prev_world)
        z = prev_cam[:, 2]
        front = z > 1e-9
        safe_z = np.where(front, z, 1.0)
        px = intr.fx * prev_cam[:, 0] / safe_z + intr.cx
        py = intr.fy * prev_cam[:, 1] / safe_z + intr.cy
        inbounds = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        fvalid = in_range & front & inbounds
        # a correspondence occluded in the previous frame has no defined flow;
        # demand a metric clearance so razor-thin corner cases drop out too
        if k > 0:
            prev_eye = self.pose(prev_k).translation
            occ_dirs = prev_world - prev_eye
            t_vis, _ = self._trace_rays(
                np.broadcast_to(prev_eye, occ_dirs.shape), occ_dirs, prev_k)
            dist = np.linalg.norm(occ_dirs, axis=-1)
            fvalid &= (1.0 - t_vis) * dist < 2e-3
        ys, xs = np.mgrid[0:h, 0:w]
        vectors = np.zeros((h * w, 2), np.float32)
        vectors[:, 0] = np.where(fvalid, px - xs.ravel(), 0.0)
        vectors[:, 1] = np.where(fvalid, py - ys.ravel(), 0.0)

        labels = np.zeros(h * w, np.int32)
        ids = np.zeros(h * w, np.int32)
        instances: dict[int, InstanceInfo] = {}
        next_id = 1
        for oi, obj in enumerate(self.script.objects):
            if obj.class_label <= 0:
                continue
            sel = (winner == oi) & in_range
            count = int(np.count_nonzero(sel))
            if count == 0:
                continue
            ids[sel] = next_id
            labels[sel] = obj.class_label
            instances[next_id] = InstanceInfo(obj.class_label, count, next_id)
            next_id += 1

        depth = depth.reshape(h, w).astype(np.float32)
        if script.depth_noise_std > 0:
            noise = self._depth_noise(k, (h, w)) * script.depth_noise_std
            depth = np.where(depth > 0, np.maximum(depth + noise, 1e-3), 0.0)
            depth = depth.astype(np.float32)

        frame = RgbdFrame(
            index=k,
            color=color.reshape(h, w, 3),
            depth=depth,
            timestamp_us=self.timestamp_us(k),
        )
        imap = InstanceMap(labels.reshape(h, w), ids.reshape(h, w), instances)
        flow = FlowField(
            vectors=vectors.reshape(h, w, 2),
            valid=fvalid.reshape(h, w),
            weight=np.ones((h, w), np.float32),
            cost=np.zeros((h, w), np.float32),
        )
        result = (frame, self.pose(k), imap, flow)
        self._cache = {k: result}  # keep only the newest frame resident
        return result

    def _depth_noise(self, k: int, shape) -> np.ndarray:
        # deterministic per frame regardless of render order
        rng = np.random.default_rng((self.script.seed, k))
        return rng.normal(size=shape)

    # -- ground-truth provider API -------------------------------------------

    def frame(self, k: int) -> RgbdFrame:
        return self.render(k)[0]

    def instance_map(self, k: int) -> InstanceMap:
        return self.render(k)[2]

    def flow(self, k: int) -> FlowField:
        return self.render(k)[3]
