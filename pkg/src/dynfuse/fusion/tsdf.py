"""Voxel-block TSDF model with dynamicity-aware integration.

Blocks are 8^3 voxel arrays living in a spatial hash.  Integration follows
the capped-moving-average weighting, extended so that the per-pixel weight
cap shrinks with the dynamicity score, plus hard invalidation (sdf := -1,
weight := 1) wherever the score exceeds the invalidation threshold.  The
four interplay cases this realizes:

  1. dynamic pixels contribute no content and invalidate aggressively;
  2. instances that calm down re-enter fusion as their score decays;
  3. freshly moving content is carved out immediately via invalidation;
  4. stale surfaces that changed while unobserved are overwritten within a
     bounded number of observations because the weight cap bounds inertia.

Concurrency: a block's voxel channels live in one immutable BlockData that
integration swaps with a single attribute assignment, so concurrent readers
always see a consistent pre- or post-update snapshot of any single block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import CameraIntrinsics, Pose
from .hashmap import SpatialHashMap

BLOCK = 8
_CELLS = BLOCK * BLOCK * BLOCK

# voxel offsets within a block, x-major (index = (ix*8 + iy)*8 + iz)
_OFFS = np.stack([
    np.arange(_CELLS) // (BLOCK * BLOCK),
    (np.arange(_CELLS) // BLOCK) % BLOCK,
    np.arange(_CELLS) % BLOCK,
], axis=1).astype(np.float64)


@dataclass(frozen=True)
class FusionParams:
    voxel_size: float = 0.01
    trunc_voxels: float = 4.0
    weight_max: float = 64.0
    weight_dynamic: float = 4.0
    weight_obs: float = 1.0
    # a block is re-streamed only when the change is visible after the
    # 8-bit interpolation quantization of the mesh extraction
    dirty_sdf_eps: float = 0.04
    dirty_sign_eps: float = 1.0 / 64.0
    dirty_color_eps: float = 4.0
    dirty_motion_eps: float = 1e-3

    @property
    def trunc(self) -> float:
        return self.voxel_size * self.trunc_voxels

    @property
    def block_size(self) -> float:
        return self.voxel_size * BLOCK


class BlockData:
    """Immutable voxel channel snapshot: treat the arrays as read-only."""

    __slots__ = ("sdf", "weight", "color", "motion")

    def __init__(self, sdf, weight, color, motion):
        self.sdf = sdf
        self.weight = weight
        self.color = color
        self.motion = motion

    @classmethod
    def zeros(cls) -> "BlockData":
        return cls(np.zeros(_CELLS, np.float32), np.zeros(_CELLS, np.float32),
                   np.zeros((_CELLS, 3), np.float32), np.zeros(_CELLS, np.float32))


class VoxelBlock:
    __slots__ = ("coord", "data", "dirty", "last_update")

    def __init__(self, coord: tuple[int, int, int],
                 data: BlockData | None = None):
        self.coord = coord
        self.data = data or BlockData.zeros()
        self.dirty = True          # a fresh block must be streamed once
        self.last_update = -1


class VoxelBlockMap:
    """Spatially hashed TSDF volume."""

    def __init__(self, params: FusionParams = FusionParams()):
        self.params = params
        self._map = SpatialHashMap()

    def __len__(self):
        return len(self._map)

    def __contains__(self, coord):
        return tuple(coord) in self._map

    def get(self, coord) -> VoxelBlock | None:
        return self._map.get(tuple(coord))

    def get_or_create(self, coord) -> tuple[VoxelBlock, bool]:
        coord = tuple(coord)
        return self._map.setdefault(coord, lambda: VoxelBlock(coord))

    def remove_blocks(self, coords) -> int:
        """Removes listed blocks; returns how many actually existed."""
        return sum(1 for c in coords if self._map.remove(tuple(c)))

    def coords(self) -> list[tuple[int, int, int]]:
        return self._map.keys()

    def dirty_sweep(self, since_frame: int = -1) -> list[tuple[int, int, int]]:
        """Blocks needing (re)streaming; clears flags as it reads them."""
        out = []
        for coord, block in self._map.items():
            if block.dirty and block.last_update >= since_frame:
                block.dirty = False
                out.append(coord)
        return out

    # -- geometry helpers ---------------------------------------------------

    def voxel_centers(self, coord) -> np.ndarray:
        """(512, 3) world-space voxel centers of a block."""
        base = np.asarray(coord, np.float64) * self.params.block_size
        return base + (_OFFS + 0.5) * self.params.voxel_size

    @staticmethod
    def voxel_index(ix: int, iy: int, iz: int) -> int:
        return (ix * BLOCK + iy) * BLOCK + iz


def allocate_blocks(depth: np.ndarray, pose: Pose, static_mask: np.ndarray,
                    intr: CameraIntrinsics, volume: VoxelBlockMap,
                    stride: int = 1) -> list[tuple[int, int, int]]:
    """Ensures blocks along the truncation band of each measurement exist.

    For every valid static pixel, every block intersecting the ray segment
    [d - trunc, d + trunc] around the measurement is present afterwards
    (exact integer-grid walk per ray).  Returns the coordinates of newly
    created blocks only, so re-integrating the same frame allocates nothing.
    """
    p = volume.params
    sel = (depth > 0) & static_mask
    if stride > 1:
        keep = np.zeros_like(sel)
        keep[::stride, ::stride] = True
        sel &= keep
    ys, xs = np.nonzero(sel)
    if len(ys) == 0:
        return []
    d = depth[ys, xs].astype(np.float64)
    dirs_cam = np.stack([(xs - intr.cx) / intr.fx,
                         (ys - intr.cy) / intr.fy,
                         np.ones(len(xs))], axis=1)
    dirs = dirs_cam @ pose.rotation.T
    eye = pose.translation
    near = eye + dirs * np.maximum(d - p.trunc, 1e-4)[:, None]
    far = eye + dirs * (d + p.trunc)[:, None]

    bs = p.block_size
    cur = np.floor(near / bs).astype(np.int64)
    end = np.floor(far / bs).astype(np.int64)
    seg = far - near
    step = np.sign(seg).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(seg != 0, bs / np.abs(seg), np.inf)
        next_boundary = (cur + (step > 0)) * bs
        t_max = np.where(seg != 0, (next_boundary - near) / seg, np.inf)

    # collect packed keys along the walk, dedupe once at the end
    shift = 1 << 20
    half = shift // 2

    def packed(c):
        return ((c[:, 0] + half) * shift + (c[:, 1] + half)) * shift + (c[:, 2] + half)

    keys = [packed(cur)]
    active = np.ones(len(ys), bool)
    # segments span 2*trunc and blocks are >= trunc wide, so the walk is short
    for _ in range(16):
        done = np.all(cur == end, axis=1)
        active &= ~done
        if not active.any():
            break
        axis = np.argmin(t_max, axis=1)
        rows = np.nonzero(active)[0]
        cur[rows, axis[rows]] += step[rows, axis[rows]]
        t_max[rows, axis[rows]] += t_delta[rows, axis[rows]]
        keys.append(packed(cur[rows]))

    new_coords: list[tuple[int, int, int]] = []
    for key in np.unique(np.concatenate(keys)):
        z_ = int(key % shift) - half
        y_ = int((key // shift) % shift) - half
        x_ = int(key // (shift * shift)) - half
        block, created = volume.get_or_create((x_, y_, z_))
        if created:
            new_coords.append(block.coord)
    return new_coords


def _frustum_cull(volume: VoxelBlockMap, pose: Pose, intr: CameraIntrinsics,
                  depth_max: float) -> list[tuple[int, int, int]]:
    """Conservative visibility filter over all existing block coordinates."""
    coords = volume.coords()
    if not coords:
        return []
    arr = np.asarray(coords, np.float64)
    bs = volume.params.block_size
    corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1],
                        [1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]], float)
    pts = (arr[:, None, :] + corners[None]) * bs
    inv = pose.inverse()
    cam = inv.apply(pts.reshape(-1, 3)).reshape(len(coords), 8, 3)
    z = cam[..., 2]
    ok_z = (z.max(axis=1) > 0.01) & (z.min(axis=1) < depth_max + bs)
    safe_z = np.maximum(z, 1e-3)
    px = intr.fx * cam[..., 0] / safe_z + intr.cx
    py = intr.fy * cam[..., 1] / safe_z + intr.cy
    pad = 8.0
    ok = ok_z & ~(
        (px.max(axis=1) < -pad) | (px.min(axis=1) > intr.width - 1 + pad)
        | (py.max(axis=1) < -pad) | (py.min(axis=1) > intr.height - 1 + pad)
    )
    return [coords[i] for i in np.nonzero(ok)[0]]


def integrate(frame_index: int, depth: np.ndarray, color: np.ndarray,
              pose: Pose, intr: CameraIntrinsics, scores: np.ndarray,
              accum: np.ndarray, dyn_mask: np.ndarray,
              volume: VoxelBlockMap, params_dyn,
              depth_max: float = 10.0,
              chunk: int = 1024,
              use_jit: bool | None = None) -> set[tuple[int, int, int]]:
    """Fuses one frame into every visible block.

    Dispatches to a JIT-compiled per-block kernel when numba is available
    and to the vectorized numpy fallback otherwise; both implement the same
    update rules.

    Per voxel that projects to an in-bounds pixel u:
      - scores(u) above the invalidation threshold carve the voxel
        (sdf := -1, weight := 1, motion kept), masked or not: removal must
        keep working while a region is classified dynamic;
      - otherwise dynamic-masked pixels are skipped entirely;
      - otherwise the standard capped moving average runs, with the cap
        interpolated from weight_max (score <= 1) down to weight_dynamic
        (score >= dynamic threshold); motion fuses by max.

    Returns the set of block coordinates whose content materially changed
    (material = could alter the extracted mesh).
    """
    if use_jit is None:
        use_jit = _fuse_block_kernel is not None
    impl = _integrate_numba if use_jit else _integrate_numpy
    return impl(frame_index, depth, color, pose, intr, scores, accum,
                dyn_mask, volume, params_dyn, depth_max, chunk)


def _integrate_numpy(frame_index: int, depth: np.ndarray, color: np.ndarray,
                     pose: Pose, intr: CameraIntrinsics, scores: np.ndarray,
                     accum: np.ndarray, dyn_mask: np.ndarray,
                     volume: VoxelBlockMap, params_dyn,
                     depth_max: float = 10.0,
                     chunk: int = 1024) -> set[tuple[int, int, int]]:
    """Vectorized reference implementation of `integrate`.

    Per voxel that projects to an in-bounds pixel u:
      - scores(u) above the invalidation threshold carve the voxel
        (sdf := -1, weight := 1, motion kept), masked or not: removal must
        keep working while a region is classified dynamic;
      - otherwise dynamic-masked pixels are skipped entirely;
      - otherwise the standard capped moving average runs, with the cap
        interpolated from weight_max (score <= 1) down to weight_dynamic
        (score >= dynamic threshold); motion fuses by max.

    Returns the set of block coordinates whose content materially changed
    (material = could alter the extracted mesh).
    """
    p = volume.params
    h, w = depth.shape
    visible = _frustum_cull(volume, pose, intr, depth_max)
    if not visible:
        return set()
    inv = pose.inverse()
    rot_t = inv.rotation.T.astype(np.float32)
    trans = inv.translation.astype(np.float32)
    dirty: set[tuple[int, int, int]] = set()

    tau = np.float32(params_dyn.dynamic_threshold)
    tau_sdf = np.float32(params_dyn.invalidate_threshold)
    w_span = np.float32(max(tau - 1.0, 1e-9))
    color_f = color.astype(np.float32)
    depth_f = depth.astype(np.float32)
    scores32 = scores.astype(np.float32)
    local = ((_OFFS + 0.5) * p.voxel_size).astype(np.float32)  # (512, 3)

    for batch_start in range(0, len(visible), chunk):
        batch = visible[batch_start:batch_start + chunk]
        blocks = [volume.get(c) for c in batch]
        pairs = [(c, b) for c, b in zip(batch, blocks) if b is not None]
        if not pairs:
            continue
        batch = [c for c, _ in pairs]
        datas = [b.data for _, b in pairs]
        n = len(pairs)

        base = (np.asarray(batch, np.float64) * p.block_size).astype(np.float32)
        centers = (base[:, None, :] + local[None]).reshape(-1, 3)
        cam = centers @ rot_t + trans
        z = cam[:, 2]
        front = z > 1e-6
        safe_z = np.where(front, z, np.float32(1.0))
        fpx = intr.fx * cam[:, 0] / safe_z + intr.cx
        fpy = intr.fy * cam[:, 1] / safe_z + intr.cy
        px = np.rint(fpx).astype(np.int64)
        py = np.rint(fpy).astype(np.int64)
        inside = front & (px >= 0) & (px < w) & (py >= 0) & (py < h)
        pxc = np.clip(px, 0, w - 1)
        pyc = np.clip(py, 0, h - 1)

        s = scores32[pyc, pxc]
        a = accum[pyc, pxc].astype(np.float32)
        m = dyn_mask[pyc, pxc]
        d = depth_f[pyc, pxc]

        # subpixel depth: bilinear on one-surface neighborhoods, nearest at
        # depth edges; kills the re-observation wobble on slanted surfaces
        x0 = np.clip(np.floor(fpx).astype(np.int64), 0, w - 1)
        y0 = np.clip(np.floor(fpy).astype(np.int64), 0, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        d00 = depth_f[y0, x0]
        d01 = depth_f[y0, x1]
        d10 = depth_f[y1, x0]
        d11 = depth_f[y1, x1]
        taps = np.stack([d00, d01, d10, d11])
        flat = (taps > 0).all(axis=0) & (
            taps.max(axis=0) - taps.min(axis=0) <= p.trunc * 0.5)
        ax = np.clip(fpx - x0, 0.0, 1.0)
        ay = np.clip(fpy - y0, 0.0, 1.0)
        d_bilin = ((d00 + (d01 - d00) * ax) * (1 - ay)
                   + (d10 + (d11 - d10) * ax) * ay)
        d = np.where(flat, d_bilin, d)

        eta = d - z
        invalidate = inside & (s > tau_sdf)
        fuse = inside & ~invalidate & ~m & (d > 0) & (eta >= -p.trunc)

        sdf_old = np.stack([b.sdf for b in datas]).reshape(-1)
        w_old = np.stack([b.weight for b in datas]).reshape(-1)
        c_old = np.stack([b.color for b in datas]).reshape(-1, 3)
        m_old = np.stack([b.motion for b in datas]).reshape(-1)

        sdf_new = np.clip(eta / p.trunc, -1.0, 1.0).astype(np.float32)
        w_cap = np.where(
            s <= 1.0, p.weight_max,
            np.where(s >= tau, p.weight_dynamic,
                     p.weight_max + (s - 1.0) / w_span
                     * (p.weight_dynamic - p.weight_max))).astype(np.float32)
        denom = (w_old + p.weight_obs).astype(np.float32)
        sdf_fused = (w_old * sdf_old + p.weight_obs * sdf_new) / denom
        w_fused = np.minimum(denom, w_cap)
        c_obs = color_f[pyc, pxc]
        c_fused = ((w_old[:, None] * c_old + p.weight_obs * c_obs)
                   / denom[:, None])
        m_fused = np.maximum(m_old, a)

        sdf_out = np.where(invalidate, -1.0, np.where(fuse, sdf_fused, sdf_old))
        w_out = np.where(invalidate, 1.0, np.where(fuse, w_fused, w_old))
        c_out = np.where(fuse[:, None], c_fused, c_old)
        m_out = np.where(fuse, m_fused, m_old)

        touched = invalidate | fuse
        sdf_delta = np.abs(sdf_out - sdf_old)
        material = touched & (
            (sdf_delta > p.dirty_sdf_eps)
            | (((sdf_out < 0) != (sdf_old < 0)) & (sdf_delta > p.dirty_sign_eps))
            | ((w_old == 0) != (w_out == 0))
            | (np.abs(c_out - c_old).max(axis=1) > p.dirty_color_eps)
            | (m_out - m_old > p.dirty_motion_eps)
        )

        touched_b = touched.reshape(n, _CELLS).any(axis=1)
        material_b = material.reshape(n, _CELLS).any(axis=1)
        sdf_out = sdf_out.reshape(n, _CELLS).astype(np.float32)
        w_out = w_out.reshape(n, _CELLS).astype(np.float32)
        c_out = c_out.reshape(n, _CELLS, 3).astype(np.float32)
        m_out = m_out.reshape(n, _CELLS).astype(np.float32)

        for i, (coord, block) in enumerate(pairs):
            if not touched_b[i]:
                continue
            block.data = BlockData(sdf_out[i], w_out[i], c_out[i], m_out[i])
            block.last_update = frame_index
            if material_b[i]:
                block.dirty = True
                dirty.add(tuple(coord))
    return dirty


# ---------------------------------------------------------------------------
# JIT kernel path
# ---------------------------------------------------------------------------

try:
    from numba import njit as _njit
except ImportError:          # pragma: no cover - numba is normally present
    _fuse_block_kernel = None
else:
    @_njit(cache=True, fastmath=False)
    def _fuse_block_kernel(sdf, weight, colr, motion,
                           out_sdf, out_w, out_c, out_m,
                           bx, by, bz, block_size, voxel,
                           rot, trans, fx, fy, cx, cy,
                           depth, color_img, scores, accum, mask,
                           trunc, w_max, w_dyn, w_obs, tau, tau_sdf,
                           sdf_eps, sign_eps, color_eps, motion_eps):
        h, w = depth.shape
        w_span = tau - np.float32(1.0)
        if w_span < np.float32(1e-9):
            w_span = np.float32(1e-9)
        touched = False
        material = False
        for i in range(512):
            ix = i // 64
            iy = (i // 8) % 8
            iz = i % 8
            wx = np.float32((bx * 8 + ix + 0.5) * voxel)
            wy = np.float32((by * 8 + iy + 0.5) * voxel)
            wz = np.float32((bz * 8 + iz + 0.5) * voxel)
            out_sdf[i] = sdf[i]
            out_w[i] = weight[i]
            out_c[i, 0] = colr[i, 0]
            out_c[i, 1] = colr[i, 1]
            out_c[i, 2] = colr[i, 2]
            out_m[i] = motion[i]

            z = rot[2, 0] * wx + rot[2, 1] * wy + rot[2, 2] * wz + trans[2]
            if z <= 1e-6:
                continue
            xc = rot[0, 0] * wx + rot[0, 1] * wy + rot[0, 2] * wz + trans[0]
            yc = rot[1, 0] * wx + rot[1, 1] * wy + rot[1, 2] * wz + trans[1]
            px = fx * xc / z + cx
            py = fy * yc / z + cy
            ipx = int(np.rint(px))
            ipy = int(np.rint(py))
            if ipx < 0 or ipx >= w or ipy < 0 or ipy >= h:
                continue
            s = scores[ipy, ipx]
            if s > tau_sdf:
                # invalidation: carve regardless of the mask
                old_sdf = sdf[i]
                old_w = weight[i]
                out_sdf[i] = -1.0
                out_w[i] = 1.0
                touched = True
                delta = abs(old_sdf + np.float32(1.0))
                if (delta > sdf_eps
                        or ((old_sdf >= 0) and delta > sign_eps)
                        or old_w == 0.0):
                    material = True
                continue
            if mask[ipy, ipx]:
                continue
            d = depth[ipy, ipx]
            if d <= 0.0:
                continue
            # edge-aware bilinear depth (see _integrate_numpy)
            x0 = int(np.floor(px))
            y0 = int(np.floor(py))
            if x0 < 0:
                x0 = 0
            if x0 > w - 1:
                x0 = w - 1
            if y0 < 0:
                y0 = 0
            if y0 > h - 1:
                y0 = h - 1
            x1 = x0 + 1 if x0 + 1 <= w - 1 else w - 1
            y1 = y0 + 1 if y0 + 1 <= h - 1 else h - 1
            d00 = depth[y0, x0]
            d01 = depth[y0, x1]
            d10 = depth[y1, x0]
            d11 = depth[y1, x1]
            dmin = min(min(d00, d01), min(d10, d11))
            dmax = max(max(d00, d01), max(d10, d11))
            if dmin > 0.0 and (dmax - dmin) <= trunc * 0.5:
                ax = px - x0
                if ax < 0.0:
                    ax = np.float32(0.0)
                if ax > 1.0:
                    ax = np.float32(1.0)
                ay = py - y0
                if ay < 0.0:
                    ay = np.float32(0.0)
                if ay > 1.0:
                    ay = np.float32(1.0)
                top = d00 + (d01 - d00) * ax
                bot = d10 + (d11 - d10) * ax
                d = top + (bot - top) * ay
            eta = d - z
            if eta < -trunc:
                continue
            sdf_new = eta / trunc
            if sdf_new > 1.0:
                sdf_new = np.float32(1.0)
            if sdf_new < -1.0:
                sdf_new = np.float32(-1.0)
            if s <= 1.0:
                w_cap = w_max
            elif s >= tau:
                w_cap = w_dyn
            else:
                w_cap = w_max + (s - np.float32(1.0)) / w_span * (w_dyn - w_max)
            old_sdf = sdf[i]
            old_w = weight[i]
            denom = old_w + w_obs
            sdf_f = (old_w * old_sdf + w_obs * sdf_new) / denom
            w_f = denom if denom < w_cap else w_cap
            c0 = (old_w * colr[i, 0] + w_obs * color_img[ipy, ipx, 0]) / denom
            c1 = (old_w * colr[i, 1] + w_obs * color_img[ipy, ipx, 1]) / denom
            c2 = (old_w * colr[i, 2] + w_obs * color_img[ipy, ipx, 2]) / denom
            a = accum[ipy, ipx]
            m_f = motion[i] if motion[i] > a else a

            out_sdf[i] = sdf_f
            out_w[i] = w_f
            out_c[i, 0] = c0
            out_c[i, 1] = c1
            out_c[i, 2] = c2
            out_m[i] = m_f
            touched = True
            if not material:
                delta = abs(sdf_f - old_sdf)
                dc = abs(c0 - colr[i, 0])
                if abs(c1 - colr[i, 1]) > dc:
                    dc = abs(c1 - colr[i, 1])
                if abs(c2 - colr[i, 2]) > dc:
                    dc = abs(c2 - colr[i, 2])
                if (delta > sdf_eps
                        or ((sdf_f < 0) != (old_sdf < 0) and delta > sign_eps)
                        or (old_w == 0.0) != (w_f == 0.0)
                        or dc > color_eps
                        or m_f - motion[i] > motion_eps):
                    material = True
        return touched, material


def _integrate_numba(frame_index, depth, color, pose, intr, scores, accum,
                     dyn_mask, volume, params_dyn, depth_max=10.0, chunk=1024):
    p = volume.params
    visible = _frustum_cull(volume, pose, intr, depth_max)
    if not visible:
        return set()
    inv = pose.inverse()
    rot = np.ascontiguousarray(inv.rotation, np.float32)
    trans = np.ascontiguousarray(inv.translation, np.float32)
    depth_f = np.ascontiguousarray(depth, np.float32)
    color_f = np.ascontiguousarray(color, np.float32)
    scores_f = np.ascontiguousarray(scores, np.float32)
    accum_f = np.ascontiguousarray(accum, np.float32)
    mask_u = np.ascontiguousarray(dyn_mask)

    dirty: set[tuple[int, int, int]] = set()
    for coord in visible:
        block = volume.get(coord)
        if block is None:
            continue
        data = block.data
        out_sdf = np.empty(_CELLS, np.float32)
        out_w = np.empty(_CELLS, np.float32)
        out_c = np.empty((_CELLS, 3), np.float32)
        out_m = np.empty(_CELLS, np.float32)
        touched, material = _fuse_block_kernel(
            data.sdf, data.weight, data.color, data.motion,
            out_sdf, out_w, out_c, out_m,
            coord[0], coord[1], coord[2], p.block_size, p.voxel_size,
            rot, trans,
            np.float32(intr.fx), np.float32(intr.fy),
            np.float32(intr.cx), np.float32(intr.cy),
            depth_f, color_f, scores_f, accum_f, mask_u,
            np.float32(p.trunc), np.float32(p.weight_max),
            np.float32(p.weight_dynamic), np.float32(p.weight_obs),
            np.float32(params_dyn.dynamic_threshold),
            np.float32(params_dyn.invalidate_threshold),
            np.float32(p.dirty_sdf_eps), np.float32(p.dirty_sign_eps),
            np.float32(p.dirty_color_eps), np.float32(p.dirty_motion_eps))
        if touched:
            block.data = BlockData(out_sdf, out_w, out_c, out_m)
            block.last_update = frame_index
            if material:
                block.dirty = True
                dirty.add(tuple(coord))
    return dirty
