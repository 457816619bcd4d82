"""Recorded-sequence container: frames plus ground truth in one file.

Layout (all little-endian):

    header:  magic 'DYNS' | version u16 | width u16 | height u16
             fx f32 | fy f32 | cx f32 | cy f32 | fps f32 | frame_count u32
    frame:   index u32 | timestamp u64 | pose 16 x f64
             4 sections, each: raw_len u32 | zlib_len u32 | zlib bytes
               color     (H*W*3 u8)
               depth     (H*W u16, millimeters, 0 = invalid)
               instances (ids H*W u16 | labels H*W u16 | n u16 |
                          n x (id u16, class u16, track u32))
               flow      (vectors H*W*2 f32 | valid H*W u8)

Depth is quantized to millimeters (the only lossy step); flow and poses are
stored exactly.  zlib output is deterministic for a fixed input and level, so
identical scripts produce bit-identical containers.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..core import CameraIntrinsics, FlowField, InstanceInfo, InstanceMap, Pose, RgbdFrame

MAGIC = b"DYNS"
VERSION = 1
_HEADER = struct.Struct("<4sHHHfffffI")
_FRAME_HEAD = struct.Struct("<IQ" + "d" * 16)
_SECTION = struct.Struct("<II")


class ContainerError(RuntimeError):
    pass


def _pack_section(out, raw: bytes, level: int = 1):
    comp = zlib.compress(raw, level)
    out.write(_SECTION.pack(len(raw), len(comp)))
    out.write(comp)


def _read_section(buf: memoryview, off: int) -> tuple[bytes, int]:
    raw_len, comp_len = _SECTION.unpack_from(buf, off)
    off += _SECTION.size
    raw = zlib.decompress(bytes(buf[off:off + comp_len]))
    if len(raw) != raw_len:
        raise ContainerError("section length mismatch")
    return raw, off + comp_len


def write_container(path: str | Path, source, frame_count: int | None = None):
    """Writes frames [0, frame_count) of a sequence source to `path`.

    The source must expose intrinsics, frame_count, frame(k), pose(k),
    instance_map(k) and flow(k) (see SyntheticSequence).
    """
    intr = source.intrinsics
    count = source.frame_count if frame_count is None else frame_count
    fps = getattr(source, "script", None).fps if hasattr(source, "script") else 30.0
    with open(path, "wb") as out:
        out.write(_HEADER.pack(MAGIC, VERSION, intr.width, intr.height,
                               intr.fx, intr.fy, intr.cx, intr.cy, fps, count))
        for k in range(count):
            frame, pose, imap, flow = _frame_tuple(source, k)
            out.write(_FRAME_HEAD.pack(frame.index, frame.timestamp_us,
                                       *pose.matrix.ravel().tolist()))
            _pack_section(out, frame.color.tobytes())
            depth_mm = np.clip(np.rint(frame.depth * 1000.0), 0, 65535).astype("<u2")
            _pack_section(out, depth_mm.tobytes())
            _pack_section(out, _pack_instances(imap))
            _pack_section(out, _pack_flow(flow))


def _frame_tuple(source, k):
    if hasattr(source, "render"):
        return source.render(k)
    return source.frame(k), source.pose(k), source.instance_map(k), source.flow(k)


def _pack_instances(imap: InstanceMap) -> bytes:
    ids = imap.ids.astype("<u2").tobytes()
    labels = imap.labels.astype("<u2").tobytes()
    metas = sorted(imap.instances.items())
    table = struct.pack("<H", len(metas))
    for iid, info in metas:
        table += struct.pack("<HHI", iid, info.class_label, info.track_id)
    return ids + labels + table


def _pack_flow(flow: FlowField) -> bytes:
    return (flow.vectors.astype("<f4").tobytes()
            + flow.valid.astype(np.uint8).tobytes())


class ContainerSequence:
    """Reads a container; exposes the same API as SyntheticSequence."""

    def __init__(self, path: str | Path):
        self._data = memoryview(Path(path).read_bytes())
        if len(self._data) < _HEADER.size:
            raise ContainerError("truncated header")
        (magic, version, w, h, fx, fy, cx, cy, fps, count) = _HEADER.unpack_from(self._data, 0)
        if magic != MAGIC:
            raise ContainerError("bad magic")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        self.intrinsics = CameraIntrinsics(fx, fy, cx, cy, w, h)
        self.fps = fps
        self.frame_count = count
        self._offsets = self._index(count)
        self._cache: dict[int, tuple] = {}

    def _index(self, count: int) -> list[int]:
        offsets = []
        off = _HEADER.size
        for _ in range(count):
            if off + _FRAME_HEAD.size > len(self._data):
                raise ContainerError("truncated frame header")
            offsets.append(off)
            off += _FRAME_HEAD.size
            for _ in range(4):
                if off + _SECTION.size > len(self._data):
                    raise ContainerError("truncated frame record")
                _, comp_len = _SECTION.unpack_from(self._data, off)
                off += _SECTION.size + comp_len
        if off > len(self._data):
            raise ContainerError("truncated frame record")
        return offsets

    def _load(self, k: int):
        if k in self._cache:
            return self._cache[k]
        if not 0 <= k < self.frame_count:
            raise IndexError(f"frame {k} out of range")
        intr = self.intrinsics
        h, w = intr.height, intr.width
        off = self._offsets[k]
        head = _FRAME_HEAD.unpack_from(self._data, off)
        index, timestamp = head[0], head[1]
        pose = Pose(np.array(head[2:], float).reshape(4, 4))
        off += _FRAME_HEAD.size
        color_raw, off = _read_section(self._data, off)
        depth_raw, off = _read_section(self._data, off)
        inst_raw, off = _read_section(self._data, off)
        flow_raw, off = _read_section(self._data, off)

        color = np.frombuffer(color_raw, np.uint8).reshape(h, w, 3)
        depth = (np.frombuffer(depth_raw, "<u2").reshape(h, w).astype(np.float32)
                 / 1000.0)
        frame = RgbdFrame(index, color, depth, timestamp)

        px = h * w
        ids = np.frombuffer(inst_raw, "<u2", count=px).reshape(h, w).astype(np.int32)
        labels = np.frombuffer(inst_raw, "<u2", count=px, offset=2 * px)
        labels = labels.reshape(h, w).astype(np.int32)
        (n,) = struct.unpack_from("<H", inst_raw, 4 * px)
        instances = {}
        pos = 4 * px + 2
        for _ in range(n):
            iid, cls, track = struct.unpack_from("<HHI", inst_raw, pos)
            pos += 8
            instances[iid] = InstanceInfo(cls, int(np.count_nonzero(ids == iid)), track)
        imap = InstanceMap(labels, ids, instances)

        vectors = np.frombuffer(flow_raw, "<f4", count=px * 2).reshape(h, w, 2)
        valid = np.frombuffer(flow_raw, np.uint8, offset=px * 8).reshape(h, w) > 0
        flow = FlowField(vectors.copy(), valid.copy(),
                         np.ones((h, w), np.float32), np.zeros((h, w), np.float32))

        result = (frame, pose, imap, flow)
        self._cache = {k: result}  # keep only the latest frame resident
        return result

    def frame(self, k: int) -> RgbdFrame:
        return self._load(k)[0]

    def pose(self, k: int) -> Pose:
        return self._load(k)[1]

    def instance_map(self, k: int) -> InstanceMap:
        return self._load(k)[2]

    def flow(self, k: int) -> FlowField:
        return self._load(k)[3]

    def render(self, k: int):
        return self._load(k)


def read_container(path: str | Path) -> ContainerSequence:
    return ContainerSequence(path)
