"""Reconstruction client: drives perception, scoring and fusion over a
sequence and streams the results to the relay server.

Stages can run either in lockstep (single loop; fully deterministic and used
by the test harness) or as concurrent pipeline stages connected by bounded
queues, where throughput is set by the slowest stage.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import PipelineConfig
from ..core import FlowField, Pose
from ..dynamicity import Classification, DynamicityScorer
from ..fusion import (McBlock, VoxelBlockMap, allocate_blocks,
                      extract_payloads, integrate, mc_block_to_triangles,
                      mesh_digest, parse_cell_payload, payload_is_empty)
from ..fusion.mesh import save_mesh_ply, volume_triangles
from ..odometry import PoseAccumulator, estimate_pose, flow_3d, odometry_flow
from ..perception import (
    GroundTruthProvider,
    NaiveFlowProvider,
    TrackAssociator,
    confidence_weights,
    resolve_proposals,
    segment_or_empty,
)
from .. import protocol as P
from .timesync import estimate_offset, now_us, SyncUnavailable


@dataclass
class FrameResult:
    index: int
    emitted_us: int
    pose: Pose
    mask: np.ndarray
    records: dict
    dirty: list


class ReconstructionClient:
    def __init__(self, source, config: PipelineConfig, conn=None,
                 out_dir: str | Path | None = None,
                 snapshot_frames: tuple[int, ...] = (),
                 progress=None):
        self.source = source
        self.config = config
        self.conn = conn
        self.out_dir = Path(out_dir) if out_dir else None
        self.snapshot_frames = set(snapshot_frames)
        self.progress = progress
        self.intrinsics = source.intrinsics
        self.volume = VoxelBlockMap(config.fusion)
        self.scorer = DynamicityScorer(config.dyn, self.intrinsics.shape)
        self.associator = TrackAssociator(config.perception.assoc_iou)
        self.poses = PoseAccumulator()
        self.offset_us = 0
        self.sync_ok = False
        self._naive = NaiveFlowProvider()
        self._gt = GroundTruthProvider(source)
        self._prev_frame = None
        self._prev_pose = None
        self._emission_log: list[tuple[int, int]] = []
        self._classify_log: list[dict] = []
        self._last_streamed: dict[tuple[int, int, int], int] = {}

    # -- networking -----------------------------------------------------------

    def handshake(self, name: str = "reconstruction"):
        self.conn.send_packet(P.PacketType.HELLO, P.serialize_hello(
            P.Hello(P.Hello.ROLE_RECONSTRUCTION, name)))
        try:
            self.offset_us = estimate_offset(self._sync_exchange)
            self.sync_ok = True
        except SyncUnavailable:
            self.offset_us = 0
            self.sync_ok = False

    def _sync_exchange(self, seq: int, t1: int):
        self.conn.send_packet(P.PacketType.TIME_SYNC, P.serialize_time_sync(
            P.TimeSync(0, seq, t1)))
        got = self.conn.recv_packet()
        if got is None:
            raise TimeoutError
        ptype, payload, _ = got
        resp = P.deserialize_time_sync(payload)
        return resp.t2, resp.t3

    # -- per-frame pipeline -----------------------------------------------------

    def _perceive(self, k: int):
        """Source + perception + odometry + scoring (ordered, stateful)."""
        frame, gt_pose, _, _ = self.source.render(k)
        emitted = now_us()
        self._emission_log.append((k, emitted))

        cfg = self.config
        shape = frame.shape
        proposals = segment_or_empty(self._segmentation_provider(), frame)
        raw_imap = resolve_proposals(proposals, shape, cfg.perception.nms_iou)

        if self._prev_frame is None:
            flow = FlowField.zero(shape)
        else:
            flow = self._compute_flow(frame, self._prev_frame)
        imap = self.associator.associate(raw_imap, flow)

        if cfg.use_gt_pose:
            pose = gt_pose
            self.poses.push_absolute(pose)
            converged = True
        else:
            if self._prev_frame is None:
                pose = self.poses.push_absolute(Pose.identity())
                converged = True
            else:
                result = estimate_pose(self._prev_frame, frame, self.intrinsics,
                                       Pose.identity(), self._prev_pose,
                                       cfg.odometry)
                pose = self.poses.push_relative(result.relative)
                converged = result.converged

        if self._prev_pose is None:
            cam_vec = np.zeros(shape + (2,), np.float32)
            cam_valid = frame.depth > 0
            motion3 = np.zeros(shape + (3,))
        else:
            cam_vec, cam_valid = odometry_flow(frame.depth, pose,
                                               self._prev_pose, self.intrinsics)
            motion3, _ = flow_3d(flow, frame.depth, self._prev_frame.depth,
                                 pose, self._prev_pose, self.intrinsics)

        score_map, mask, records = self.scorer.step(flow, cam_vec, cam_valid,
                                                    imap, motion3)
        self._classify_log.append({
            "frame": k,
            "tracks": {
                str(t): {
                    "class": r.classification.value,
                    "label": imap.instances[t].class_label,
                    "smoothed": round(r.smoothed, 6),
                    "raw_mode": round(r.raw_mode, 6),
                }
                for t, r in records.items()
            },
            "dynamic_pixels": int(mask.sum()),
        })
        self._prev_frame = frame
        self._prev_pose = pose
        return frame, pose, score_map, mask, records, emitted, converged

    def _segmentation_provider(self):
        return self._gt  # neural providers are out of scope; GT or replay

    def _compute_flow(self, cur, prev) -> FlowField:
        cfg = self.config
        if cfg.provider in ("ground_truth", "replay"):
            return self._gt.flow(cur, prev)
        flow = self._naive.flow(cur, prev)
        inverse = self._naive.flow(prev, cur)
        weight = confidence_weights(flow, inverse, flow.cost,
                                    cfg.perception.fb_max,
                                    cfg.perception.cost_max)
        return FlowField(flow.vectors, flow.valid, weight, flow.cost)

    def _fuse(self, k, frame, pose, score_map, mask, converged):
        if not converged:
            return []
        cfg = self.config
        static_region = ~mask & (frame.depth > 0)
        allocate_blocks(frame.depth, pose, static_region, self.intrinsics,
                        self.volume)
        integrate(k, frame.depth, frame.color, pose, self.intrinsics,
                  score_map.scores.astype(np.float64), score_map.accum, mask,
                  self.volume, cfg.dyn, depth_max=cfg.depth_max)

        # rate-limit re-streaming of churning blocks; anything postponed is
        # re-marked dirty and the final flush reconciles the remainder
        due = []
        interval = max(cfg.tsdf_restream_interval, 0)
        for coord in self.volume.dirty_sweep():
            last = self._last_streamed.get(coord)
            if last is None or k - last >= interval:
                self._last_streamed[coord] = k
                due.append(coord)
            else:
                block = self.volume.get(coord)
                if block is not None:
                    block.dirty = True
        return due

    def _emit(self, k, frame, pose, mask, dirty, final=False):
        if self.conn is None:
            return
        cfg = self.config
        p = self.volume.params
        step = cfg.tsdf_blocks_per_packet
        for i in range(0, len(dirty), step):
            blocks = [self.volume.get(c) for c in dirty[i:i + step]]
            blocks = [b for b in blocks if b is not None]
            if blocks:
                self.conn.send_packet(P.PacketType.TSDF_BLOCKS,
                                      P.serialize_tsdf_blocks(
                                          blocks, p.voxel_size, p.trunc))
        self.conn.send_packet(P.PacketType.DYN_FRAME, P.serialize_dyn_frame(
            frame, mask, pose, self.intrinsics))
        self.conn.send_packet(P.PacketType.POSE, P.serialize_pose(
            P.PoseUpdate(0, k, frame.timestamp_us, pose)))

    # -- run ----------------------------------------------------------------

    def run(self) -> dict:
        if self.config.lockstep:
            self._run_lockstep()
        else:
            self._run_threaded()
        return self._finish()

    def _run_lockstep(self):
        for k in range(self.source.frame_count):
            frame, pose, score_map, mask, records, _, conv = self._perceive(k)
            dirty = self._fuse(k, frame, pose, score_map, mask, conv)
            self._emit(k, frame, pose, mask, dirty)
            self._snapshot_if_due(k)
            if self.progress:
                self.progress(k)

    def _run_threaded(self):
        """Three concurrent stages: perceive -> fuse -> emit."""
        q1: queue.Queue = queue.Queue(maxsize=2)
        q2: queue.Queue = queue.Queue(maxsize=2)
        errors: list[BaseException] = []

        def stage_perceive():
            try:
                for k in range(self.source.frame_count):
                    frame, pose, sm, mask, recs, _, conv = self._perceive(k)
                    q1.put((k, frame, pose, sm, mask, conv))
            except BaseException as exc:  # propagate to the driver
                errors.append(exc)
            finally:
                q1.put(None)

        def stage_fuse():
            try:
                while True:
                    item = q1.get()
                    if item is None:
                        break
                    k, frame, pose, sm, mask, conv = item
                    dirty = self._fuse(k, frame, pose, sm, mask, conv)
                    q2.put((k, frame, pose, mask, dirty))
            except BaseException as exc:
                errors.append(exc)
            finally:
                q2.put(None)

        threads = [threading.Thread(target=stage_perceive, daemon=True),
                   threading.Thread(target=stage_fuse, daemon=True)]
        for t in threads:
            t.start()
        while True:
            item = q2.get()
            if item is None:
                break
            k, frame, pose, mask, dirty = item
            self._emit(k, frame, pose, mask, dirty)
            self._snapshot_if_due(k)
            if self.progress:
                self.progress(k)
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    def _snapshot_if_due(self, k: int):
        if k not in self.snapshot_frames or self.out_dir is None:
            return
        pos, col, mot = volume_triangles(self.volume)
        save_mesh_ply(self.out_dir / f"mesh_{k:05d}.ply", pos, col, mot)

    def _finish(self) -> dict:
        # stream the complete final model so the replica matches bit-exactly,
        # then raise end-of-stream
        if self.conn is not None:
            coords = sorted(self.volume.coords())
            p = self.volume.params
            step = self.config.tsdf_blocks_per_packet
            for i in range(0, len(coords), step):
                blocks = [self.volume.get(c) for c in coords[i:i + step]]
                blocks = [b for b in blocks if b is not None]
                self.conn.send_packet(P.PacketType.TSDF_BLOCKS,
                                      P.serialize_tsdf_blocks(
                                          blocks, p.voxel_size, p.trunc))
            self.conn.send_packet(P.PacketType.METRICS, P.serialize_metrics(
                {"event": "end_of_stream"}), eos=True)

        payloads = extract_payloads(self.volume, self.volume.coords())
        digest = mesh_digest(payloads)
        summary = {
            "frames": self.source.frame_count,
            "digest": digest,
            "sync_offset_us": self.offset_us,
            "sync_ok": self.sync_ok,
        }
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "digest.txt").write_text(digest + "\n")
            with open(self.out_dir / "emission.log", "w") as f:
                for k, t in self._emission_log:
                    f.write(f"{k} {t}\n")
            with open(self.out_dir / "classify.jsonl", "w") as f:
                for row in self._classify_log:
                    f.write(json.dumps(row) + "\n")
            (self.out_dir / "summary.json").write_text(json.dumps(summary))
            pos, col, mot = _payload_triangles(payloads,
                                               self.volume.params.voxel_size)
            save_mesh_ply(self.out_dir / "mesh_final.ply", pos, col, mot)
        return summary


def _payload_triangles(payloads, voxel_size):
    pos, col, mot = [], [], []
    for coord, body in payloads.items():
        if payload_is_empty(body):
            continue
        cells, _ = parse_cell_payload(body)
        p_, c_, m_ = mc_block_to_triangles(McBlock(coord, cells), voxel_size)
        if len(p_):
            pos.append(p_)
            col.append(c_)
            mot.append(m_)
    if not pos:
        return (np.zeros((0, 3)), np.zeros((0, 3), np.uint8),
                np.zeros(0, np.float32))
    return np.concatenate(pos), np.concatenate(col), np.concatenate(mot)
