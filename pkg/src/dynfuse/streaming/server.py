"""Relay server: ingests TSDF updates, converts them to marching-cubes
blocks on a model replica, and broadcasts mesh/dynamic/pose traffic to any
number of exploration clients.

A client joining mid-run first receives a snapshot of every cached mesh
block, then live deltas; reconnecting yields a fresh snapshot, which is what
makes the stream robust to interruptions.
"""

from __future__ import annotations

import logging
import socket
import threading

from .. import protocol as P
import numpy as np

from ..fusion import (
    FusionParams,
    VoxelBlockMap,
    extract_payloads,
    mesh_digest,
    payload_is_empty,
)
from .connection import Connection
from .queues import ConnectionStalled, SendQueues
from .timesync import now_us

log = logging.getLogger(__name__)

_NEIGHBOR_DELTAS = [(dx, dy, dz)
                    for dx in (0, -1) for dy in (0, -1) for dz in (0, -1)]


def _faces_differ(old, new) -> bool:
    """True when any low-face voxel differs (neighbor extractions read it)."""
    for a, b in ((old.sdf, new.sdf), (old.weight, new.weight),
                 (old.motion, new.motion)):
        av = a.reshape(8, 8, 8)
        bv = b.reshape(8, 8, 8)
        if (not np.array_equal(av[0], bv[0])
                or not np.array_equal(av[:, 0], bv[:, 0])
                or not np.array_equal(av[:, :, 0], bv[:, :, 0])):
            return True
    ac = old.color.reshape(8, 8, 8, 3)
    bc = new.color.reshape(8, 8, 8, 3)
    return (not np.array_equal(ac[0], bc[0])
            or not np.array_equal(ac[:, 0], bc[:, 0])
            or not np.array_equal(ac[:, :, 0], bc[:, :, 0]))


class _Client:
    def __init__(self, conn: Connection, role: int, name: str,
                 realtime_reliable: bool = False):
        self.conn = conn
        self.role = role
        self.name = name
        self.queues = SendQueues(realtime_reliable=realtime_reliable)
        self.writer = threading.Thread(target=self._write_loop, daemon=True)
        self.alive = True

    def start(self):
        self.writer.start()

    def _write_loop(self):
        while True:
            framed = self.queues.next_packet(timeout=0.5)
            if framed is None:
                if not self.alive:
                    return
                continue
            ptype = framed[5]
            try:
                self.conn.send_framed(ptype, framed)
            except OSError:
                self.alive = False
                return

    def offer(self, ptype: int, framed: bytes):
        if not self.alive:
            return
        try:
            self.queues.offer(ptype, framed)
        except ConnectionStalled:
            log.warning("client %s stalled; closing", self.name)
            self.close()

    def close(self):
        self.alive = False
        self.queues.close()
        self.conn.close()


class RelayServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 codec: str = "deflate", netlog=None, max_clients: int = 16,
                 realtime_reliable: bool = False):
        self.codec = P.Codec(codec)
        self.realtime_reliable = realtime_reliable
        self._netlog = netlog
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(max_clients)
        self.port = self._listener.getsockname()[1]
        self._clients: list[_Client] = []
        self._lock = threading.RLock()
        self.replica: VoxelBlockMap | None = None
        self._pending: set[tuple[int, int, int]] = set()
        self._mc_cache: dict[tuple[int, int, int], tuple] = {}
        self._voxel_size = 0.01
        self._recon_done = threading.Event()
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._threads: list[threading.Thread] = []
        self._next_user = 1

    # -- lifecycle ------------------------------------------------------------

    def start(self):
        self._accept_thread.start()

    def stop(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for c in self._clients:
                c.close()

    def wait_reconstruction_done(self, timeout=None) -> bool:
        return self._recon_done.wait(timeout)

    def mesh_digest(self) -> str:
        with self._lock:
            return mesh_digest(dict(self._mc_cache))

    # -- accept/reader loops ---------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._serve, args=(sock, addr),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, sock: socket.socket, addr):
        conn = Connection(sock, name=f"{addr[0]}:{addr[1]}",
                          netlog=self._netlog, codec=self.codec)
        try:
            first = conn.recv_packet()
            if first is None:
                conn.close()
                return
            ptype, payload, _ = first
            if ptype != P.PacketType.HELLO:
                raise P.CorruptPayload("expected HELLO first")
            hello = P.deserialize_hello(payload)
        except P.ProtocolError as exc:
            log.warning("handshake failed from %s: %s", addr, exc)
            conn.close()
            return

        if hello.role == P.Hello.ROLE_RECONSTRUCTION:
            self._serve_reconstruction(conn, hello)
        else:
            self._serve_exploration(conn, hello)

    # -- reconstruction ingest -------------------------------------------------

    def _serve_reconstruction(self, conn: Connection, hello: P.Hello):
        log.info("reconstruction client %r connected", hello.name)
        try:
            while True:
                got = conn.recv_packet()
                if got is None:
                    break
                ptype, payload, eos = got
                self._handle_recon_packet(conn, ptype, payload)
                if eos:
                    break
        except P.ProtocolError as exc:
            log.warning("reconstruction stream error: %s", exc)
        finally:
            self._finish_stream()
            conn.close()

    def _handle_recon_packet(self, conn: Connection, ptype: int,
                             payload: bytes):
        if ptype == P.PacketType.TSDF_BLOCKS:
            voxel_size, trunc, blocks = P.deserialize_tsdf_blocks(payload)
            self._ingest_tsdf(voxel_size, trunc, blocks)
        elif ptype == P.PacketType.BLOCK_REMOVE:
            coords = P.deserialize_block_remove(payload)
            self._ingest_removal(coords)
        elif ptype in (P.PacketType.DYN_FRAME, P.PacketType.POSE):
            # the realtime packet marks the end of a frame's mesh updates:
            # convert the batched TSDF changes to MC exactly once per frame
            self._flush_pending()
            self._broadcast(ptype, payload)
        elif ptype == P.PacketType.TIME_SYNC:
            self._answer_time_sync(conn, payload)
        elif ptype == P.PacketType.METRICS:
            self._flush_pending()
        else:
            raise P.CorruptPayload(f"unexpected packet type {ptype}")

    def _ingest_tsdf(self, voxel_size, trunc, blocks):
        with self._lock:
            if self.replica is None:
                self.replica = VoxelBlockMap(FusionParams(
                    voxel_size=voxel_size,
                    trunc_voxels=trunc / voxel_size))
                self._voxel_size = voxel_size
            for coord, data in blocks:
                coord = tuple(coord)
                block, created = self.replica.get_or_create(coord)
                old = None if created else block.data
                block.data = data
                # neighbors re-extract only when a shared boundary changed
                faces_changed = created or old is None or _faces_differ(old, data)
                self._pending.add((coord, faces_changed))

    def _ingest_removal(self, coords):
        with self._lock:
            if self.replica is None:
                return
            removed = [tuple(c) for c in coords if tuple(c) in self.replica]
            self.replica.remove_blocks(removed)
            for coord in removed:
                self._mc_cache.pop(coord, None)
                self._pending.discard((coord, True))
                self._pending.discard((coord, False))
                for d in _NEIGHBOR_DELTAS[1:]:
                    c = (coord[0] + d[0], coord[1] + d[1], coord[2] + d[2])
                    if c in self.replica:
                        self._pending.add((c, False))
            if removed:
                self._broadcast(P.PacketType.BLOCK_REMOVE,
                                P.serialize_block_remove(removed))

    def _flush_pending(self):
        with self._lock:
            if not self._pending:
                return
            affected = set()
            for coord, faces_changed in self._pending:
                if coord in self.replica:
                    affected.add(coord)
                if not faces_changed:
                    continue
                for d in _NEIGHBOR_DELTAS[1:]:
                    c = (coord[0] + d[0], coord[1] + d[1], coord[2] + d[2])
                    if c in self.replica:
                        affected.add(c)
            self._pending.clear()
            self._reextract_and_broadcast(affected)

    def _reextract_and_broadcast(self, coords):
        if not coords:
            return
        payloads = extract_payloads(self.replica, sorted(coords))
        updates = []
        removals = []
        for coord, payload in payloads.items():
            if not payload_is_empty(payload):
                if self._mc_cache.get(coord) != payload:
                    self._mc_cache[coord] = payload
                    updates.append((coord, payload))
            elif coord in self._mc_cache:
                del self._mc_cache[coord]
                removals.append(coord)
        if updates:
            self._broadcast(P.PacketType.MC_BLOCKS,
                            P.serialize_mc_payloads(updates, self._voxel_size))
        if removals:
            self._broadcast(P.PacketType.BLOCK_REMOVE,
                            P.serialize_block_remove(removals))

    def _finish_stream(self):
        """After the reconstruction stream ends, tell exploration clients."""
        self._flush_pending()
        with self._lock:
            eos = P.encode_packet(P.PacketType.METRICS,
                                  P.serialize_metrics({"event": "end_of_stream"}),
                                  self.codec, eos=True)
            for c in self._clients:
                if c.role != P.Hello.ROLE_RECONSTRUCTION:
                    c.offer(P.PacketType.METRICS, eos)
        self._recon_done.set()

    # -- exploration fan-out ----------------------------------------------------

    def _serve_exploration(self, conn: Connection, hello: P.Hello):
        client = _Client(conn, hello.role, hello.name or "exploration",
                         realtime_reliable=self.realtime_reliable)
        with self._lock:
            self._clients.append(client)
            client.start()
            self._queue_snapshot(client)
            if self._recon_done.is_set():
                client.offer(P.PacketType.METRICS, P.encode_packet(
                    P.PacketType.METRICS,
                    P.serialize_metrics({"event": "end_of_stream"}),
                    self.codec, eos=True))
        log.info("exploration client %r connected (snapshot %d blocks)",
                 hello.name, len(self._mc_cache))
        try:
            while client.alive:
                got = conn.recv_packet()
                if got is None:
                    break
                ptype, payload, _ = got
                if ptype == P.PacketType.TIME_SYNC:
                    self._answer_time_sync(conn, payload)
                elif ptype == P.PacketType.POSE:
                    # viewer/user poses are relayed to every exploration
                    # client (including the sender's own, harmlessly)
                    update = P.deserialize_pose(payload)
                    if update.source == 0:
                        update = P.PoseUpdate(self._assign_user(), update.frame,
                                              update.timestamp_us, update.pose)
                        payload = P.serialize_pose(update)
                    self._broadcast(P.PacketType.POSE, payload)
                elif ptype == P.PacketType.METRICS:
                    pass
        except P.ProtocolError as exc:
            log.warning("exploration stream error (%s): %s", client.name, exc)
        finally:
            with self._lock:
                if client in self._clients:
                    self._clients.remove(client)
            client.close()

    def _assign_user(self) -> int:
        self._next_user += 1
        return self._next_user

    def _queue_snapshot(self, client: _Client, chunk: int = 64):
        coords = sorted(self._mc_cache)
        for i in range(0, len(coords), chunk):
            group = [(c, self._mc_cache[c]) for c in coords[i:i + chunk]]
            payload = P.serialize_mc_payloads(group, self._voxel_size)
            client.offer(P.PacketType.MC_BLOCKS,
                         P.encode_packet(P.PacketType.MC_BLOCKS, payload,
                                         self.codec))

    def _broadcast(self, ptype: int, payload: bytes, exclude=None):
        framed = P.encode_packet(ptype, payload, self.codec)
        with self._lock:
            for c in self._clients:
                if c is exclude or c.role == P.Hello.ROLE_RECONSTRUCTION:
                    continue
                c.offer(ptype, framed)

    def _answer_time_sync(self, conn: Connection, payload: bytes):
        req = P.deserialize_time_sync(payload)
        if req.phase != 0:
            return
        t2 = now_us()
        resp = P.TimeSync(1, req.seq, req.t1, t2, now_us())
        conn.send_packet(P.PacketType.TIME_SYNC, P.serialize_time_sync(resp))
