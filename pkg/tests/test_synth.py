"""Tests for the synthetic renderer, scene scripts and the container."""

import numpy as np
import pytest

from dynfuse.core import Pose
from dynfuse.synth import (
    CameraPath,
    Primitive,
    SceneObject,
    SceneScript,
    SyntheticSequence,
    Trajectory,
    bundled_scripts,
    look_at,
    moving_box,
    read_container,
    static_room,
    write_container,
)


class TestLookAt:
    def test_orthonormal_and_forward(self):
        pose = look_at((0, 1, -1), (0, 0.2, 1.5))
        r = pose.rotation
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        forward = r[:, 2]
        target_dir = np.array([0, -0.8, 2.5])
        target_dir /= np.linalg.norm(target_dir)
        np.testing.assert_allclose(forward, target_dir, atol=1e-12)
        # image-down axis points below the horizon for a level-ish camera
        assert pose.rotation[1, 1] < 0


class TestRenderer:
    def _plane_script(self, dist=2.0):
        # a single fronto-parallel wall at z = dist from a camera at origin
        wall = SceneObject(
            "wall", Primitive("box", (4.0, 4.0, 0.05), (200, 200, 200)),
            Trajectory("fixed", (0.0, 0.0, dist + 0.025)))
        cam = CameraPath(eye=Trajectory("fixed", (0.0, 0.0, 0.0)),
                         target=(0.0, 0.0, dist))
        return SceneScript(name="plane", objects=(wall,), camera=cam,
                           frame_count=2)

    def test_frontal_plane_depth_is_camera_z(self):
        # depth stores camera-space z, so a fronto-parallel plane at 2 m
        # reads 2.0 at every pixel, not the ray length
        seq = SyntheticSequence(self._plane_script(2.0))
        frame = seq.frame(0)
        valid = frame.depth > 0
        assert valid.mean() > 0.99
        np.testing.assert_allclose(frame.depth[valid], 2.0, atol=1e-6)

    def test_depth_range_clipping(self):
        script = self._plane_script(2.0)
        script = SceneScript(name="clip", objects=script.objects,
                             camera=script.camera, frame_count=1,
                             depth_max=1.5)
        frame = SyntheticSequence(script).frame(0)
        assert not (frame.depth > 0).any()

    def test_instance_mask_is_exact_silhouette(self):
        seq = SyntheticSequence(moving_box(4))
        frame, pose, imap, _ = seq.render(0)
        box_id = next(i for i, v in imap.instances.items() if v.class_label == 1)
        mask = imap.mask_of(box_id)
        # a detected pixel's backprojected point must lie on the box
        obj = next(o for o in seq.script.objects if o.name == "runner")
        half = np.asarray(obj.primitive.size) / 2
        center = obj.trajectory.position_at(0)
        ys, xs = np.nonzero(mask)
        from dynfuse.core import backproject_grid
        pts = pose.apply(backproject_grid(frame.depth, seq.intrinsics)[ys, xs])
        assert np.all(np.abs(pts - center) <= half + 1e-5)

    def test_flow_of_moving_object_differs_from_static(self):
        seq = SyntheticSequence(moving_box(20, onset=5, stop=15))
        _, _, imap, flow = seq.render(6)
        box_id = next(i for i, v in imap.instances.items() if v.class_label == 1)
        box = imap.mask_of(box_id) & flow.valid
        off = (~imap.mask_of(box_id)) & flow.valid
        mag_box = np.linalg.norm(flow.vectors, axis=-1)[box]
        mag_off = np.linalg.norm(flow.vectors, axis=-1)[off]
        assert np.median(mag_box) > np.median(mag_off) + 3.0

    def test_depth_noise_flag(self):
        base = static_room(2)
        noisy = SceneScript(name="noisy", objects=base.objects,
                            camera=base.camera, frame_count=2,
                            depth_noise_std=0.01, seed=3)
        d0 = SyntheticSequence(base).frame(0).depth
        d1 = SyntheticSequence(noisy).frame(0).depth
        both = (d0 > 0) & (d1 > 0)
        spread = (d1 - d0)[both].std()
        assert 0.005 < spread < 0.02

    def test_script_json_roundtrip(self):
        script = moving_box(30)
        again = SceneScript.from_json(script.to_json())
        assert again == script

    def test_bundled_scripts_cover_taxonomy(self):
        scripts = bundled_scripts()
        assert len(scripts) == 10
        kinds = {name: any(o.trajectory.kind != "fixed" for o in s.objects)
                 for name, s in scripts.items()}
        assert any(kinds.values()) and not all(kinds.values())


class TestContainer:
    def test_roundtrip_and_mm_quantization(self, tmp_path):
        seq = SyntheticSequence(moving_box(5, onset=1, stop=4))
        path = tmp_path / "seq.bin"
        write_container(path, seq)
        replay = read_container(path)
        assert replay.frame_count == 5
        assert replay.intrinsics == seq.intrinsics
        for k in (0, 3, 4):
            frame, pose, imap, flow = seq.render(k)
            r_frame, r_pose, r_imap, r_flow = replay.render(k)
            assert r_frame.index == frame.index
            assert r_frame.timestamp_us == frame.timestamp_us
            np.testing.assert_array_equal(r_frame.color, frame.color)
            # depth quantized to millimeters, the only lossy step
            np.testing.assert_allclose(r_frame.depth, frame.depth, atol=5.1e-4)
            assert r_pose.allclose(pose, atol=1e-12)
            np.testing.assert_array_equal(r_imap.ids, imap.ids)
            np.testing.assert_array_equal(r_imap.labels, imap.labels)
            assert r_imap.instances == imap.instances
            np.testing.assert_array_equal(r_flow.vectors, flow.vectors)
            np.testing.assert_array_equal(r_flow.valid, flow.valid)

    def test_bit_identical_rewrite(self, tmp_path):
        script = moving_box(4, onset=1, stop=3)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        write_container(a, SyntheticSequence(script))
        write_container(b, SyntheticSequence(script))
        assert a.read_bytes() == b.read_bytes()

    def test_version_rejected(self, tmp_path):
        seq = SyntheticSequence(static_room(2))
        path = tmp_path / "seq.bin"
        write_container(path, seq, frame_count=1)
        data = bytearray(path.read_bytes())
        data[4] = 99  # version field
        path.write_bytes(bytes(data))
        from dynfuse.synth.container import ContainerError
        with pytest.raises(ContainerError):
            read_container(path)

    def test_truncation_rejected(self, tmp_path):
        seq = SyntheticSequence(static_room(2))
        path = tmp_path / "seq.bin"
        write_container(path, seq, frame_count=2)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        from dynfuse.synth.container import ContainerError
        with pytest.raises(ContainerError):
            read_container(path)
