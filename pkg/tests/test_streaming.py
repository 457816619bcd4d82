"""Integration tests for server relay, exploration state and the gateway.

These run everything in-process on deliberately tiny scenes; the heavier
multi-process runs live in the acceptance suite.
"""

import threading
import time

import numpy as np
import pytest

from dynfuse import protocol as P
from dynfuse.config import PipelineConfig
from dynfuse.core import Pose
from dynfuse.fusion import mesh_digest
from dynfuse.streaming import (
    ExplorationClient,
    ExplorationState,
    ReconstructionClient,
    RelayServer,
    ViewerGateway,
    connect,
    websocket_connect,
)
from dynfuse.synth import SyntheticSequence, moving_box, static_room


def _tiny_script(frames=6):
    import dataclasses
    script = moving_box(frames, onset=2, stop=frames - 2)
    return dataclasses.replace(script, width=160, height=120, fx=130.0, fy=130.0)


@pytest.fixture
def stack(tmp_path):
    """Server + one exploration client + reconstruction, in-process."""
    script = _tiny_script()
    seq = SyntheticSequence(script)
    cfg = PipelineConfig().with_overrides(script.config_overrides)
    server = RelayServer(realtime_reliable=True)
    server.start()
    try:
        yield server, seq, cfg, tmp_path
    finally:
        server.stop()


def _run_exploration(server, name, tmp_path, on_update=None):
    conn = connect(("127.0.0.1", server.port))
    client = ExplorationClient(conn, name, out_dir=tmp_path, on_update=on_update)
    client.handshake()
    result = {}
    thread = threading.Thread(target=lambda: result.update(client.run()),
                              daemon=True)
    thread.start()
    return client, thread, result


def _run_reconstruction(server, seq, cfg, tmp_path):
    conn = connect(("127.0.0.1", server.port))
    recon = ReconstructionClient(seq, cfg, conn, out_dir=tmp_path / "recon")
    recon.handshake()
    summary = recon.run()
    conn.close()
    return summary


class TestEndToEnd:
    def test_digests_match_across_all_parties(self, stack):
        server, seq, cfg, tmp_path = stack
        client, thread, result = _run_exploration(server, "e0", tmp_path)
        summary = _run_reconstruction(server, seq, cfg, tmp_path)
        thread.join(timeout=60)
        assert not thread.is_alive()
        assert result["eos"]
        assert result["digest"] == summary["digest"]
        assert server.mesh_digest() == summary["digest"]
        # every frame's dynamic image arrived (reliable realtime mode)
        assert result["dyn_frames"] == seq.frame_count

    def test_late_joiner_reaches_identical_digest(self, stack):
        server, seq, cfg, tmp_path = stack
        client, thread, result = _run_exploration(server, "e0", tmp_path)
        summary = _run_reconstruction(server, seq, cfg, tmp_path)
        thread.join(timeout=60)
        late, late_thread, late_result = _run_exploration(server, "late", tmp_path)
        late_thread.join(timeout=60)
        assert not late_thread.is_alive()
        assert late_result["digest"] == summary["digest"]

    def test_two_clients_identical_streams(self, stack):
        server, seq, cfg, tmp_path = stack
        c0, t0, r0 = _run_exploration(server, "a", tmp_path)
        c1, t1, r1 = _run_exploration(server, "b", tmp_path)
        summary = _run_reconstruction(server, seq, cfg, tmp_path)
        t0.join(timeout=60)
        t1.join(timeout=60)
        assert r0["digest"] == r1["digest"] == summary["digest"]
        for ptype in (P.PacketType.MC_BLOCKS, P.PacketType.DYN_FRAME):
            assert (c0.conn.rx_by_type.get(ptype, 0)
                    == c1.conn.rx_by_type.get(ptype, 0))

    def test_byte_counters_sum_to_totals(self, stack):
        server, seq, cfg, tmp_path = stack
        client, thread, result = _run_exploration(server, "e0", tmp_path)
        _run_reconstruction(server, seq, cfg, tmp_path)
        thread.join(timeout=60)
        conn = client.conn
        assert sum(conn.rx_by_type.values()) == conn.rx_total
        assert sum(conn.tx_by_type.values()) == conn.tx_total
        assert conn.rx_total > 0 and conn.tx_total > 0


class TestExplorationState:
    def _mc_payload(self):
        from dynfuse.fusion import BlockData, VoxelBlockMap, extract_payloads
        from dynfuse.fusion.tsdf import _CELLS
        vol = VoxelBlockMap()
        block, _ = vol.get_or_create((0, 0, 0))
        sdf = np.ones(_CELLS, np.float32)
        sdf[vol.voxel_index(4, 4, 4)] = -1.0
        block.data = BlockData(sdf, np.ones(_CELLS, np.float32),
                               np.zeros((_CELLS, 3), np.float32),
                               np.zeros(_CELLS, np.float32))
        payload = extract_payloads(vol, [(0, 0, 0)])[(0, 0, 0)]
        return P.serialize_mc_payloads([((0, 0, 0), payload)], 0.01)

    def test_duplicate_mesh_apply_idempotent(self):
        state = ExplorationState()
        payload = self._mc_payload()
        state.apply_packet(P.PacketType.MC_BLOCKS, payload)
        d1 = state.digest()
        state.apply_packet(P.PacketType.MC_BLOCKS, payload)
        assert state.digest() == d1

    def test_block_remove_deletes_and_ignores_unknown(self):
        state = ExplorationState()
        state.apply_packet(P.PacketType.MC_BLOCKS, self._mc_payload())
        state.apply_packet(P.PacketType.BLOCK_REMOVE,
                           P.serialize_block_remove([(0, 0, 0), (9, 9, 9)]))
        assert state.meshes == {}
        assert state.digest() == mesh_digest({})

    def test_stale_dyn_frame_ignored(self):
        state = ExplorationState()
        from dynfuse.core import CameraIntrinsics, RgbdFrame
        intr = CameraIntrinsics(10.0, 10.0, 3.5, 3.5, 8, 8)
        depth = np.ones((8, 8), np.float32)

        def dyn(index):
            frame = RgbdFrame(index, np.zeros((8, 8, 3), np.uint8), depth, index)
            return P.serialize_dyn_frame(frame, depth > 0, Pose.identity(), intr)

        state.apply_packet(P.PacketType.DYN_FRAME, dyn(5))
        event = state.apply_packet(P.PacketType.DYN_FRAME, dyn(3))
        assert event["kind"] == "stale_dyn"
        assert state.dyn.index == 5
        assert len(state.dynamic_points()) == 64

    def test_poses_tracked_by_source(self):
        state = ExplorationState()
        state.apply_packet(P.PacketType.POSE, P.serialize_pose(
            P.PoseUpdate(0, 1, 10, Pose.identity())))
        state.apply_packet(P.PacketType.POSE, P.serialize_pose(
            P.PoseUpdate(7, 1, 10, Pose.from_rt(np.eye(3), [1, 0, 0]))))
        assert state.sensor_pose.frame == 1
        assert 7 in state.user_poses


class TestGateway:
    def test_viewer_receives_snapshot_then_deltas_and_digest_matches(self, stack):
        server, seq, cfg, tmp_path = stack
        client, thread, result = _run_exploration(server, "e0", tmp_path)
        gateway = ViewerGateway(client)
        client.on_update = gateway.on_update
        gateway.start()
        try:
            viewer_state = ExplorationState()
            ws = websocket_connect("127.0.0.1", gateway.port)
            stop = threading.Event()

            def pump():
                while not stop.is_set():
                    got = ws.recv_message()
                    if got is None:
                        return
                    _, message = got
                    viewer_state.apply_packet(message[0], message[1:])

            pump_thread = threading.Thread(target=pump, daemon=True)
            pump_thread.start()

            # viewer-side pose input is forwarded upstream as a user pose
            # (sent while the stream is still live so clients are reading)
            ws.send_binary(bytes([int(P.PacketType.POSE)]) + P.serialize_pose(
                P.PoseUpdate(0, 0, 0, Pose.from_rt(np.eye(3), [0, 1.6, 0]))))

            summary = _run_reconstruction(server, seq, cfg, tmp_path)
            thread.join(timeout=60)
            deadline = time.time() + 30
            while time.time() < deadline:
                if viewer_state.digest() == summary["digest"]:
                    break
                time.sleep(0.1)
            assert viewer_state.digest() == summary["digest"]
            assert viewer_state.dyn is not None
            assert client.state.user_poses
            stop.set()
            ws.close()
            pump_thread.join(timeout=5)
        finally:
            gateway.stop()

    def test_viewer_joining_after_quiescence_gets_full_snapshot(self, stack):
        server, seq, cfg, tmp_path = stack
        client, thread, result = _run_exploration(server, "e0", tmp_path)
        gateway = ViewerGateway(client)
        client.on_update = gateway.on_update
        gateway.start()
        try:
            summary = _run_reconstruction(server, seq, cfg, tmp_path)
            thread.join(timeout=60)
            viewer_state = ExplorationState()
            ws = websocket_connect("127.0.0.1", gateway.port)
            deadline = time.time() + 20
            while time.time() < deadline:
                ws.sock.settimeout(2.0)
                try:
                    got = ws.recv_message()
                except OSError:
                    break
                if got is None:
                    break
                _, message = got
                viewer_state.apply_packet(message[0], message[1:])
                if viewer_state.digest() == summary["digest"]:
                    break
            assert viewer_state.digest() == summary["digest"]
            ws.close()
        finally:
            gateway.stop()
