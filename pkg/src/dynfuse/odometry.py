"""Camera pose estimation and camera-motion-induced flow fields.

Pose estimation is point-to-plane ICP on a depth pyramid (coarse to fine),
with correspondence rejection by distance and normal angle.  A bypass mode
returns externally supplied poses (used with ground-truth sequences).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, Pose, RgbdFrame, backproject_grid, pixel_rays


@dataclass(frozen=True)
class OdometryParams:
    iterations: tuple[int, ...] = (10, 5, 4)  # coarsest level first
    max_point_dist: float = 0.05
    max_normal_angle_deg: float = 30.0
    min_valid_pixels: int = 500
    convergence_rms: float = 0.05


@dataclass(frozen=True)
class OdometryResult:
    relative: Pose          # maps current-camera coords into previous-camera coords
    absolute: Pose          # camera-to-world of the current frame
    converged: bool
    rms: float


def se3_exp(twist: np.ndarray) -> Pose:
    """Exponential map from a (rx, ry, rz, tx, ty, tz) twist to a Pose."""
    w = twist[:3]
    v = twist[3:]
    theta = np.linalg.norm(w)
    k = np.array([
        [0, -w[2], w[1]],
        [w[2], 0, -w[0]],
        [-w[1], w[0], 0],
    ])
    if theta < 1e-12:
        rot = np.eye(3) + k
        vmat = np.eye(3)
    else:
        a = np.sin(theta) / theta
        b = (1 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
        rot = np.eye(3) + a * k + b * (k @ k)
        vmat = np.eye(3) + b * k + c * (k @ k)
    # re-orthonormalize to keep the Pose constructor happy on long chains
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return Pose.from_rt(rot, vmat @ v)


def depth_pyramid(depth: np.ndarray, levels: int) -> list[np.ndarray]:
    """Valid-aware 2x2 average pyramid, finest level first."""
    out = [depth.astype(np.float64)]
    for _ in range(levels - 1):
        d = out[-1]
        h, w = (d.shape[0] // 2) * 2, (d.shape[1] // 2) * 2
        quads = np.stack([
            d[0:h:2, 0:w:2], d[0:h:2, 1:w:2], d[1:h:2, 0:w:2], d[1:h:2, 1:w:2]
        ])
        valid = quads > 0
        count = valid.sum(axis=0)
        summed = np.where(valid, quads, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore"):
            avg = np.where(count > 0, summed / np.maximum(count, 1), 0.0)
        out.append(avg)
    return out


def normals_from_depth(points: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-pixel normals from central differences of the vertex map."""
    h, w = valid.shape
    dx = np.zeros_like(points)
    dy = np.zeros_like(points)
    dx[:, 1:-1] = points[:, 2:] - points[:, :-2]
    dy[1:-1, :] = points[2:, :] - points[:-2, :]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok = (
        valid
        & np.roll(valid, 1, axis=0) & np.roll(valid, -1, axis=0)
        & np.roll(valid, 1, axis=1) & np.roll(valid, -1, axis=1)
        & (norm > 1e-12)
    )
    ok[0, :] = ok[-1, :] = False
    ok[:, 0] = ok[:, -1] = False
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
    # orient toward the camera (-z half-space)
    flip = n[..., 2] > 0
    n[flip] *= -1.0
    return n


def _scaled_intrinsics(intr: CameraIntrinsics, scale: int) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=intr.fx / scale, fy=intr.fy / scale,
        cx=intr.cx / scale, cy=intr.cy / scale,
        width=max(1, intr.width // scale), height=max(1, intr.height // scale),
    )


def estimate_pose(prev: RgbdFrame, cur: RgbdFrame, intr: CameraIntrinsics,
                  init: Pose, prev_pose: Pose,
                  params: OdometryParams = OdometryParams()) -> OdometryResult:
    """Point-to-plane ICP aligning `cur` against `prev`.

    `init` is the initial guess for the relative motion (current camera into
    previous camera coordinates, identity for smooth motion).  On failure the
    flag is False and the pose falls back to the initial guess; the caller may
    keep such frames out of fusion.
    """
    if (np.count_nonzero(prev.depth > 0) < params.min_valid_pixels
            or np.count_nonzero(cur.depth > 0) < params.min_valid_pixels):
        return OdometryResult(init, prev_pose.compose(init), False, float("inf"))

    levels = len(params.iterations)
    prev_pyr = depth_pyramid(prev.depth, levels)
    cur_pyr = depth_pyramid(cur.depth, levels)
    rel = init
    rms = float("inf")
    cos_max = np.cos(np.deg2rad(params.max_normal_angle_deg))

    for level in range(levels - 1, -1, -1):
        scale = 2 ** level
        intr_l = _scaled_intrinsics(intr, scale)
        tgt_depth = prev_pyr[level]
        src_depth = cur_pyr[level]
        tgt_valid = tgt_depth > 0
        src_valid = src_depth > 0
        tgt_pts = pixel_rays(intr_l) * tgt_depth[..., None]
        tgt_nrm = normals_from_depth(tgt_pts, tgt_valid)
        src_pts = pixel_rays(intr_l) * src_depth[..., None]
        src_nrm_map = normals_from_depth(src_pts, src_valid)
        usable = src_valid & (np.linalg.norm(src_nrm_map, axis=-1) > 0.5)
        src = src_pts[usable]
        src_nrm = src_nrm_map[usable]

        for _ in range(params.iterations[levels - 1 - level]):
            p = rel.apply(src)
            z = p[:, 2]
            front = z > 1e-6
            u = np.full((len(p), 2), -1.0)
            u[front, 0] = intr_l.fx * p[front, 0] / z[front] + intr_l.cx
            u[front, 1] = intr_l.fy * p[front, 1] / z[front] + intr_l.cy
            ui = np.rint(u).astype(np.int64)
            inside = (
                front & (ui[:, 0] >= 0) & (ui[:, 0] < intr_l.width)
                & (ui[:, 1] >= 0) & (ui[:, 1] < intr_l.height)
            )
            ui[~inside] = 0
            q = tgt_pts[ui[:, 1], ui[:, 0]]
            n = tgt_nrm[ui[:, 1], ui[:, 0]]
            has_normal = np.linalg.norm(n, axis=-1) > 0.5
            dist_ok = np.linalg.norm(p - q, axis=-1) < params.max_point_dist
            rotated = src_nrm @ rel.rotation.T
            angle_ok = np.einsum("ij,ij->i", rotated, n) > cos_max
            keep = (inside & tgt_valid[ui[:, 1], ui[:, 0]] & has_normal
                    & dist_ok & angle_ok)
            if np.count_nonzero(keep) < 64:
                break
            pk, qk, nk = p[keep], q[keep], n[keep]
            r = np.einsum("ij,ij->i", pk - qk, nk)
            jac = np.concatenate([np.cross(pk, nk), nk], axis=1)
            rhs = -(jac * r[:, None]).sum(axis=0)
            hess = jac.T @ jac
            try:
                delta = np.linalg.solve(hess + 1e-9 * np.eye(6), rhs)
            except np.linalg.LinAlgError:
                break
            rel = se3_exp(delta).compose(rel)
            rms = float(np.sqrt(np.mean(r**2)))
            if np.linalg.norm(delta) < 1e-10:
                break

    converged = np.isfinite(rms) and rms < params.convergence_rms
    if not converged:
        rel = init
    return OdometryResult(rel, prev_pose.compose(rel), converged,
                          rms if np.isfinite(rms) else float("inf"))


class PoseAccumulator:
    """Folds per-frame relative motions into absolute camera-to-world poses.

    The first frame is pinned to the world origin.
    """

    def __init__(self):
        self._last: Pose | None = None

    @property
    def last(self) -> Pose | None:
        return self._last

    def push_relative(self, rel: Pose) -> Pose:
        self._last = Pose.identity() if self._last is None else self._last.compose(rel)
        return self._last

    def push_absolute(self, pose: Pose) -> Pose:
        self._last = pose
        return pose


def odometry_flow(depth: np.ndarray, cur_pose: Pose, prev_pose: Pose,
                  intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Backward flow a fully static scene would show under the camera motion.

    flow(u) = project(rel * backproject(u, depth(u))) - u with rel mapping
    current-camera into previous-camera coordinates.  Returns (vectors, valid);
    pixels with no depth or leaving the previous image are invalid.
    """
    h, w = depth.shape
    rel = prev_pose.inverse().compose(cur_pose)
    pts = backproject_grid(depth, intr)
    moved = rel.apply(pts.reshape(-1, 3)).reshape(h, w, 3)
    z = moved[..., 2]
    has_depth = depth > 0
    front = z > 1e-9
    safe_z = np.where(front, z, 1.0)
    px = intr.fx * moved[..., 0] / safe_z + intr.cx
    py = intr.fy * moved[..., 1] / safe_z + intr.cy
    inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    valid = has_depth & front & inside
    ys, xs = np.mgrid[0:h, 0:w]
    vectors = np.zeros((h, w, 2), np.float32)
    vectors[..., 0] = np.where(valid, px - xs, 0.0)
    vectors[..., 1] = np.where(valid, py - ys, 0.0)
    return vectors, valid


def flow_3d(flow: "np.ndarray | object", depth_cur: np.ndarray,
            depth_prev: np.ndarray, cur_pose: Pose, prev_pose: Pose,
            intr: CameraIntrinsics,
            depth_edge: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """World-space displacement of each pixel between consecutive frames.

    The previous depth is sampled bilinearly at the subpixel flow target when
    the 2x2 neighborhood lies on one surface (spread below `depth_edge`);
    discontinuous neighborhoods mark the correspondence invalid instead of
    mixing foreground and background depths.  Invalid correspondences yield a
    zero vector.  Accepts a FlowField or a raw (H, W, 2) array with an implied
    all-valid mask.  Returns (vectors (H, W, 3) float64, valid).
    """
    if hasattr(flow, "vectors"):
        vectors = flow.vectors
        fvalid = flow.valid
    else:
        vectors = flow
        fvalid = np.ones(vectors.shape[:2], bool)
    h, w = depth_cur.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + vectors[..., 0].astype(np.float64)
    ty = ys + vectors[..., 1].astype(np.float64)
    inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    txc = np.where(inside, tx, 0.0)
    tyc = np.where(inside, ty, 0.0)

    x0 = np.floor(txc).astype(np.int64)
    y0 = np.floor(tyc).astype(np.int64)
    interior = (x0 >= 1) & (x0 + 2 <= w - 1) & (y0 >= 1) & (y0 + 2 <= h - 1)
    x0c = np.clip(x0, 1, w - 3)
    y0c = np.clip(y0, 1, h - 3)
    # 4x4 stencil around the bilinear cell; a single smooth surface has tiny
    # second differences there while steps, creases and silhouettes do not
    stencil = np.empty((4, 4) + x0c.shape, np.float64)
    for dy in range(-1, 3):
        for dx in range(-1, 3):
            stencil[dy + 1, dx + 1] = depth_prev[y0c + dy, x0c + dx]
    used = stencil[[1, 2]].reshape(-1, *x0c.shape)
    used = np.concatenate([used, stencil[:, [1, 2]].reshape(-1, *x0c.shape)])
    taps_ok = np.all(used > 0, axis=0)
    ddx = np.abs(np.diff(stencil[1:3], n=2, axis=1)).max(axis=(0, 1))
    ddy = np.abs(np.diff(stencil[:, 1:3], n=2, axis=0)).max(axis=(0, 1))
    spread = (stencil[1:3, 1:3].max(axis=(0, 1))
              - stencil[1:3, 1:3].min(axis=(0, 1)))
    flat = (interior & taps_ok & (spread <= depth_edge)
            & (ddx <= 2.5e-3) & (ddy <= 2.5e-3))
    ax = txc - x0
    ay = tyc - y0
    d00, d01 = stencil[1, 1], stencil[1, 2]
    d10, d11 = stencil[2, 1], stencil[2, 2]
    top = d00 + (d01 - d00) * ax
    bot = d10 + (d11 - d10) * ax
    d_prev = top + (bot - top) * ay
    valid = fvalid & inside & (depth_cur > 0) & flat

    cur_world = cur_pose.apply(backproject_grid(depth_cur, intr).reshape(-1, 3))
    prev_cam = np.empty((h, w, 3), np.float64)
    prev_cam[..., 0] = (txc - intr.cx) * d_prev / intr.fx
    prev_cam[..., 1] = (tyc - intr.cy) * d_prev / intr.fy
    prev_cam[..., 2] = d_prev
    prev_world = prev_pose.apply(prev_cam.reshape(-1, 3))
    vec = (cur_world - prev_world).reshape(h, w, 3)
    vec[~valid] = 0.0
    return vec, valid
