"""Binary wire protocol: packet framing, codecs and payload serializers.

Frame layout (little-endian):

    magic 'DYNF' | version u8 (=1) | type u8 | flags u8 | reserved u8
    payload_len u32 | uncompressed_len u32 | payload bytes

flags bit 0 selects the codec (0 = identity, 1 = deflate/zlib); bit 1 marks
end-of-stream.  Every serializer round-trips bit-exactly; malformed input
raises ProtocolError subclasses, never anything else.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .core import CameraIntrinsics, Pose, RgbdFrame
from .fusion import (
    BLOCK,
    BlockData,
    McBlock,
    VoxelBlock,
    cell_payload,
    parse_cell_payload,
    skip_cell_payload,
)

MAGIC = b"DYNF"
VERSION = 1
HEADER = struct.Struct("<4sBBBBII")
FLAG_DEFLATE = 0x01
FLAG_EOS = 0x02

CELLS = BLOCK ** 3


class PacketType(IntEnum):
    HELLO = 0x01
    TSDF_BLOCKS = 0x02
    MC_BLOCKS = 0x03
    DYN_FRAME = 0x04
    POSE = 0x05
    BLOCK_REMOVE = 0x06
    TIME_SYNC = 0x07
    METRICS = 0x08


class ProtocolError(RuntimeError):
    """Base class of every decode failure."""


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class CorruptPayload(ProtocolError):
    pass


class Codec:
    """Lossless payload codec; `identity` exists for deterministic tests."""

    def __init__(self, name: str = "deflate"):
        if name == "default":
            name = "deflate"
        if name not in ("identity", "deflate"):
            raise ValueError(f"unknown codec {name!r}")
        self.name = name

    def encode(self, payload: bytes) -> tuple[bytes, int]:
        if self.name == "identity":
            return payload, 0
        return zlib.compress(payload, 1), FLAG_DEFLATE


IDENTITY = Codec("identity")
DEFLATE = Codec("deflate")


def encode_packet(ptype: int, payload: bytes, codec: Codec = DEFLATE,
                  eos: bool = False) -> bytes:
    if len(payload) >= 1 << 32:
        raise ValueError("payload too large")
    body, flags = codec.encode(payload)
    if eos:
        flags |= FLAG_EOS
    return HEADER.pack(MAGIC, VERSION, int(ptype), flags, 0,
                       len(body), len(payload)) + body


def _inflate(flags: int, body: bytes, uncomp_len: int) -> bytes:
    if flags & FLAG_DEFLATE:
        try:
            payload = zlib.decompress(body)
        except zlib.error as exc:
            raise CorruptPayload(f"decompression failed: {exc}") from exc
    else:
        payload = body
    if len(payload) != uncomp_len:
        raise CorruptPayload("uncompressed length mismatch")
    return payload


def decode_packet(data: bytes) -> tuple[int, bytes, bool]:
    """Decodes one framed packet; returns (type, payload, eos)."""
    if len(data) < HEADER.size:
        raise Truncated("short header")
    magic, version, ptype, flags, _, body_len, uncomp_len = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    try:
        PacketType(ptype)
    except ValueError as exc:
        raise CorruptPayload(f"unknown packet type 0x{ptype:02x}") from exc
    if len(data) != HEADER.size + body_len:
        raise Truncated("frame length mismatch")
    payload = _inflate(flags, data[HEADER.size:], uncomp_len)
    return ptype, payload, bool(flags & FLAG_EOS)


# ---------------------------------------------------------------------------
# Payloads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hello:
    role: int                     # 0 reconstruction, 1 exploration, 2 viewer
    name: str

    ROLE_RECONSTRUCTION = 0
    ROLE_EXPLORATION = 1
    ROLE_VIEWER = 2


def serialize_hello(h: Hello) -> bytes:
    raw = h.name.encode()
    return struct.pack("<HBB", VERSION, h.role, len(raw)) + raw


def deserialize_hello(buf: bytes) -> Hello:
    try:
        _, role, n = struct.unpack_from("<HBB", buf)
    except struct.error as exc:
        raise CorruptPayload("short hello") from exc
    if len(buf) != 4 + n:
        raise CorruptPayload("hello length mismatch")
    return Hello(role, buf[4:4 + n].decode(errors="replace"))


_TSDF_HEAD = struct.Struct("<ffI")
_COORD = struct.Struct("<3i")
# sdf f32 | weight f32 | color 3xf32 | motion f32 per voxel: color must stay
# float so the server replica's mesh extraction is bit-identical
_BLOCK_BYTES = CELLS * (4 + 4 + 12 + 4)


def serialize_tsdf_blocks(blocks: list[VoxelBlock], voxel_size: float,
                          trunc: float) -> bytes:
    out = bytearray(_TSDF_HEAD.pack(voxel_size, trunc, len(blocks)))
    le = np.dtype("<f4")
    for b in blocks:
        data = b.data
        out += _COORD.pack(*b.coord)
        for arr in (data.sdf, data.weight, data.color, data.motion):
            out += arr.tobytes() if arr.dtype == le else arr.astype(le).tobytes()
    return bytes(out)


def deserialize_tsdf_blocks(buf: bytes):
    """Returns (voxel_size, trunc, [(coord, BlockData), ...])."""
    try:
        voxel_size, trunc, count = _TSDF_HEAD.unpack_from(buf)
    except struct.error as exc:
        raise CorruptPayload("short tsdf header") from exc
    expect = _TSDF_HEAD.size + count * (_COORD.size + _BLOCK_BYTES)
    if len(buf) != expect:
        raise CorruptPayload("tsdf payload length mismatch")
    off = _TSDF_HEAD.size
    blocks = []
    for _ in range(count):
        coord = _COORD.unpack_from(buf, off)
        off += _COORD.size
        sdf = np.frombuffer(buf, "<f4", CELLS, off).copy()
        off += CELLS * 4
        weight = np.frombuffer(buf, "<f4", CELLS, off).copy()
        off += CELLS * 4
        color = np.frombuffer(buf, "<f4", CELLS * 3, off).reshape(CELLS, 3).copy()
        off += CELLS * 12
        motion = np.frombuffer(buf, "<f4", CELLS, off).copy()
        off += CELLS * 4
        blocks.append((coord, BlockData(sdf, weight, color, motion)))
    return float(voxel_size), float(trunc), blocks


_MC_HEAD = struct.Struct("<fI")


def serialize_mc_blocks(blocks: list[McBlock], voxel_size: float) -> bytes:
    out = bytearray(_MC_HEAD.pack(voxel_size, len(blocks)))
    for b in blocks:
        out += _COORD.pack(*b.coord)
        out += cell_payload(b.cells)
    return bytes(out)


def serialize_mc_payloads(items, voxel_size: float) -> bytes:
    """Like serialize_mc_blocks but over (coord, packed cell bytes) pairs."""
    items = list(items)
    out = bytearray(_MC_HEAD.pack(voxel_size, len(items)))
    for coord, payload in items:
        out += _COORD.pack(*coord)
        out += payload
    return bytes(out)


def deserialize_mc_payloads(buf: bytes):
    """Validates and splits an MC payload into (coord, cell bytes) pairs."""
    try:
        voxel_size, count = _MC_HEAD.unpack_from(buf)
    except struct.error as exc:
        raise CorruptPayload("short mc header") from exc
    off = _MC_HEAD.size
    items = []
    for _ in range(count):
        if off + _COORD.size > len(buf):
            raise CorruptPayload("truncated mc block")
        coord = _COORD.unpack_from(buf, off)
        off += _COORD.size
        try:
            end = skip_cell_payload(buf, off)
        except ValueError as exc:
            raise CorruptPayload(str(exc)) from exc
        items.append((coord, bytes(buf[off:end])))
        off = end
    if off != len(buf):
        raise CorruptPayload("trailing bytes in mc payload")
    return float(voxel_size), items


def deserialize_mc_blocks(buf: bytes) -> tuple[float, list[McBlock]]:
    voxel_size, items = deserialize_mc_payloads(buf)
    blocks = []
    for coord, payload in items:
        cells, _ = parse_cell_payload(payload)
        blocks.append(McBlock(coord, cells))
    return voxel_size, blocks


_DYN_HEAD = struct.Struct("<IQ16f4fHHI")
_DYN_PIXEL = struct.Struct("<HHHBBB")


def serialize_dyn_frame(frame: RgbdFrame, mask: np.ndarray, pose: Pose,
                        intr: CameraIntrinsics) -> bytes:
    """Masked RGB-D pixels with pose and intrinsics, row-major order.

    Only masked pixels with valid depth are written; depth is quantized to
    millimeters (the single lossy step of the wire format).
    """
    if mask.shape != frame.depth.shape:
        raise ValueError("mask dimensions differ from frame")
    sel = mask & (frame.depth > 0)
    ys, xs = np.nonzero(sel)
    depth_mm = np.clip(np.rint(frame.depth[ys, xs] * 1000.0), 1, 65535)
    out = bytearray(_DYN_HEAD.pack(
        frame.index, frame.timestamp_us,
        *np.asarray(pose.matrix, np.float32).ravel().tolist(),
        intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height,
        len(ys)))
    rgb = frame.color[ys, xs]
    rec = np.zeros(len(ys), dtype=np.dtype("<u2, <u2, <u2, u1, u1, u1"))
    rec["f0"] = xs
    rec["f1"] = ys
    rec["f2"] = depth_mm.astype("<u2")
    rec["f3"] = rgb[:, 0]
    rec["f4"] = rgb[:, 1]
    rec["f5"] = rgb[:, 2]
    out += rec.tobytes()
    return bytes(out)


@dataclass(frozen=True)
class DynFrame:
    index: int
    timestamp_us: int
    pose: Pose
    intrinsics: CameraIntrinsics
    xs: np.ndarray
    ys: np.ndarray
    depth_mm: np.ndarray
    rgb: np.ndarray

    @property
    def count(self) -> int:
        return len(self.xs)

    def backproject(self) -> np.ndarray:
        """World-space points of the masked pixels (meters)."""
        d = self.depth_mm.astype(np.float64) / 1000.0
        intr = self.intrinsics
        cam = np.stack([(self.xs - intr.cx) * d / intr.fx,
                        (self.ys - intr.cy) * d / intr.fy, d], axis=1)
        return self.pose.apply(cam)


def deserialize_dyn_frame(buf: bytes) -> DynFrame:
    try:
        fields = _DYN_HEAD.unpack_from(buf)
    except struct.error as exc:
        raise CorruptPayload("short dyn header") from exc
    index, timestamp = fields[0], fields[1]
    pose_vals = fields[2:18]
    fx, fy, cx, cy, width, height, count = fields[18:]
    if len(buf) != _DYN_HEAD.size + count * _DYN_PIXEL.size:
        raise CorruptPayload("dyn payload length mismatch")
    try:
        pose = Pose(np.array(pose_vals, np.float64).reshape(4, 4))
        intr = CameraIntrinsics(fx, fy, cx, cy, width, height)
    except ValueError as exc:
        raise CorruptPayload(f"bad dyn frame metadata: {exc}") from exc
    rec = np.frombuffer(buf, dtype=np.dtype("<u2, <u2, <u2, u1, u1, u1"),
                        count=count, offset=_DYN_HEAD.size)
    xs = rec["f0"].astype(np.int64)
    ys = rec["f1"].astype(np.int64)
    depth_mm = rec["f2"].astype(np.int64)
    if np.any(depth_mm == 0):
        raise CorruptPayload("dyn frame contains zero depth")
    if count:
        if np.any(xs >= width) or np.any(ys >= height):
            raise CorruptPayload("dyn pixel out of image bounds")
        order = ys.astype(np.int64) * width + xs
        if np.any(np.diff(order) <= 0):
            raise CorruptPayload("dyn pixels not strictly row-major")
    rgb = np.stack([rec["f3"], rec["f4"], rec["f5"]], axis=1)
    return DynFrame(index, timestamp, pose, intr, xs, ys, depth_mm, rgb)


_POSE_HEAD = struct.Struct("<IIQ16f")


@dataclass(frozen=True)
class PoseUpdate:
    source: int                   # 0 = the RGB-D sensor, else a user id
    frame: int
    timestamp_us: int
    pose: Pose


def serialize_pose(p: PoseUpdate) -> bytes:
    return _POSE_HEAD.pack(p.source, p.frame, p.timestamp_us,
                           *np.asarray(p.pose.matrix, np.float32).ravel().tolist())


def deserialize_pose(buf: bytes) -> PoseUpdate:
    if len(buf) != _POSE_HEAD.size:
        raise CorruptPayload("pose payload length mismatch")
    vals = _POSE_HEAD.unpack(buf)
    try:
        pose = Pose(np.array(vals[3:], np.float64).reshape(4, 4))
    except ValueError as exc:
        raise CorruptPayload(f"bad pose matrix: {exc}") from exc
    return PoseUpdate(vals[0], vals[1], vals[2], pose)


def serialize_block_remove(coords) -> bytes:
    out = bytearray(struct.pack("<I", len(coords)))
    for c in coords:
        out += _COORD.pack(*c)
    return bytes(out)


def deserialize_block_remove(buf: bytes) -> list[tuple[int, int, int]]:
    try:
        (count,) = struct.unpack_from("<I", buf)
    except struct.error as exc:
        raise CorruptPayload("short remove payload") from exc
    if len(buf) != 4 + count * _COORD.size:
        raise CorruptPayload("remove payload length mismatch")
    return [_COORD.unpack_from(buf, 4 + i * _COORD.size) for i in range(count)]


_SYNC = struct.Struct("<BIQQQ")


@dataclass(frozen=True)
class TimeSync:
    phase: int                    # 0 request, 1 response
    seq: int
    t1: int
    t2: int = 0
    t3: int = 0


def serialize_time_sync(ts: TimeSync) -> bytes:
    return _SYNC.pack(ts.phase, ts.seq, ts.t1, ts.t2, ts.t3)


def deserialize_time_sync(buf: bytes) -> TimeSync:
    if len(buf) != _SYNC.size:
        raise CorruptPayload("time sync length mismatch")
    return TimeSync(*_SYNC.unpack(buf))


def serialize_metrics(payload: dict) -> bytes:
    import json
    return json.dumps(payload, sort_keys=True).encode()


def deserialize_metrics(buf: bytes) -> dict:
    import json
    try:
        out = json.loads(buf.decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptPayload(f"bad metrics payload: {exc}") from exc
    if not isinstance(out, dict):
        raise CorruptPayload("metrics payload must be an object")
    return out
