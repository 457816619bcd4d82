"""Headless exploration client: mirrors the streamed scene state.

The mesh store reflects exactly the applied MC_BLOCKS / BLOCK_REMOVE
messages, the dynamic point cloud always comes from the single newest
dynamic frame, and pose updates track the sensor plus other users.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

import numpy as np

from .. import protocol as P
from ..fusion import (McBlock, mc_block_to_triangles, mesh_digest,
                      parse_cell_payload, payload_is_empty)
from .timesync import estimate_offset, now_us, SyncUnavailable


class ExplorationState:
    def __init__(self):
        self.meshes: dict[tuple[int, int, int], tuple] = {}
        self.voxel_size = 0.01
        self.dyn: P.DynFrame | None = None
        self.sensor_pose: P.PoseUpdate | None = None
        self.user_poses: dict[int, P.PoseUpdate] = {}
        self._lock = threading.Lock()

    def apply_packet(self, ptype: int, payload: bytes) -> dict:
        """Applies one decoded payload; returns an event description."""
        if ptype == P.PacketType.MC_BLOCKS:
            voxel_size, items = P.deserialize_mc_payloads(payload)
            with self._lock:
                self.voxel_size = voxel_size
                for coord, body in items:
                    if payload_is_empty(body):
                        self.meshes.pop(tuple(coord), None)
                    else:
                        self.meshes[tuple(coord)] = body
            return {"kind": "mesh", "blocks": [tuple(c) for c, _ in items]}
        if ptype == P.PacketType.BLOCK_REMOVE:
            coords = P.deserialize_block_remove(payload)
            with self._lock:
                for c in coords:
                    self.meshes.pop(tuple(c), None)
            return {"kind": "remove", "blocks": [tuple(c) for c in coords]}
        if ptype == P.PacketType.DYN_FRAME:
            dyn = P.deserialize_dyn_frame(payload)
            with self._lock:
                if self.dyn is not None and dyn.index < self.dyn.index:
                    return {"kind": "stale_dyn", "frame": dyn.index}
                self.dyn = dyn
            return {"kind": "dyn", "frame": dyn.index, "pixels": dyn.count}
        if ptype == P.PacketType.POSE:
            update = P.deserialize_pose(payload)
            with self._lock:
                if update.source == 0:
                    self.sensor_pose = update
                else:
                    self.user_poses[update.source] = update
            return {"kind": "pose", "source": update.source}
        if ptype == P.PacketType.METRICS:
            return {"kind": "metrics", "data": P.deserialize_metrics(payload)}
        raise P.CorruptPayload(f"unexpected packet type {ptype} for exploration")

    def digest(self) -> str:
        with self._lock:
            return mesh_digest(dict(self.meshes))

    def dynamic_points(self) -> np.ndarray:
        with self._lock:
            dyn = self.dyn
        if dyn is None:
            return np.zeros((0, 3))
        return dyn.backproject()

    def snapshot_messages(self):
        """(ptype, payload) mesh messages reproducing the current store."""
        with self._lock:
            coords = sorted(self.meshes)
            out = []
            chunk = 64
            for i in range(0, len(coords), chunk):
                group = [(c, self.meshes[c]) for c in coords[i:i + chunk]]
                out.append((P.PacketType.MC_BLOCKS,
                            P.serialize_mc_payloads(group, self.voxel_size)))
        return out

    def triangles(self):
        """Triangle soup of the mirrored mesh (positions, colors, motion)."""
        import numpy as np
        with self._lock:
            items = list(self.meshes.items())
            voxel_size = self.voxel_size
        pos, col, mot = [], [], []
        for coord, body in items:
            cells, _ = parse_cell_payload(body)
            p_, c_, m_ = mc_block_to_triangles(McBlock(coord, cells), voxel_size)
            if len(p_):
                pos.append(p_)
                col.append(c_)
                mot.append(m_)
        if not pos:
            return (np.zeros((0, 3)), np.zeros((0, 3), np.uint8),
                    np.zeros(0, np.float32))
        return (np.concatenate(pos), np.concatenate(col), np.concatenate(mot))


class ExplorationClient:
    def __init__(self, conn, name: str = "exploration", out_dir=None,
                 on_update=None):
        self.conn = conn
        self.name = name
        self.out_dir = Path(out_dir) if out_dir else None
        self.state = ExplorationState()
        self.on_update = on_update
        self.offset_us = 0
        self.sync_ok = False
        self.arrival_log: list[tuple[int, int, int]] = []
        self.eos_seen = False
        self._last_dyn_payload: bytes | None = None
        self._last_pose_payload: bytes | None = None

    def handshake(self):
        self.conn.send_packet(P.PacketType.HELLO, P.serialize_hello(
            P.Hello(P.Hello.ROLE_EXPLORATION, self.name)))
        try:
            self.offset_us = estimate_offset(self._sync_exchange)
            self.sync_ok = True
        except SyncUnavailable:
            self.sync_ok = False

    def _sync_exchange(self, seq: int, t1: int):
        self.conn.send_packet(P.PacketType.TIME_SYNC, P.serialize_time_sync(
            P.TimeSync(0, seq, t1)))
        while True:
            got = self.conn.recv_packet()
            if got is None:
                raise TimeoutError
            ptype, payload, eos = got
            if eos:
                self.eos_seen = True
            if ptype == P.PacketType.TIME_SYNC:
                resp = P.deserialize_time_sync(payload)
                return resp.t2, resp.t3
            # snapshot traffic may already be flowing; apply it
            self._apply(ptype, payload)

    def _apply(self, ptype: int, payload: bytes):
        event = self.state.apply_packet(ptype, payload)
        if event["kind"] == "dyn":
            self.arrival_log.append((event["frame"], now_us(), event["pixels"]))
            self._last_dyn_payload = payload
        elif event["kind"] == "pose":
            self._last_pose_payload = payload
        if self.on_update:
            self.on_update(ptype, payload, event)
        return event

    def latest_realtime_payloads(self):
        """Latest (dyn, pose) payload bytes for late-joining viewers."""
        return self._last_dyn_payload, self._last_pose_payload

    def run(self) -> dict:
        """Consumes the stream until end-of-stream or disconnect."""
        while not self.eos_seen:
            got = self.conn.recv_packet()
            if got is None:
                break
            ptype, payload, eos = got
            self._apply(ptype, payload)
            if eos:
                self.eos_seen = True
        return self.finish()

    def finish(self) -> dict:
        summary = {
            "digest": self.state.digest(),
            "mesh_blocks": len(self.state.meshes),
            "sync_offset_us": self.offset_us,
            "sync_ok": self.sync_ok,
            "eos": self.eos_seen,
            "dyn_frames": len(self.arrival_log),
        }
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / f"{self.name}.arrival.log", "w") as f:
                for frame, t, px in self.arrival_log:
                    f.write(f"{frame} {t} {px}\n")
            (self.out_dir / f"{self.name}.summary.json").write_text(
                json.dumps(summary))
        return summary
