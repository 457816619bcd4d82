"""Marching cubes over voxel blocks: case tables, extraction, rebuild.

The 256-entry triangulation table is generated at import time by walking
edge crossings around each cube face (marching squares per face) and sewing
the directed segments into loops.  Ambiguous faces always separate the
inside corners; since both cells adjacent to a face apply the same rule to
the same corner signs, extracted surfaces are seam-consistent across cells
and blocks by construction.

Cell vertices live on the 12 cube edges; a cell record stores, per active
edge, an 8-bit interpolation offset plus interpolated color and motion.
Extraction emits the canonical packed byte form directly (it is what the
wire, the block cache and the state digest all consume); `parse_cell_payload`
recovers structured records when needed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .tsdf import BLOCK, VoxelBlockMap

CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], np.int64)

EDGES = np.array([
    [0, 1], [1, 2], [2, 3], [3, 0],
    [4, 5], [5, 6], [6, 7], [7, 4],
    [0, 4], [1, 5], [2, 6], [3, 7],
], np.int64)

# faces as cyclic corner quads with outward normals
_FACES = (
    ((0, 1, 2, 3), (0, 0, -1)),
    ((4, 5, 6, 7), (0, 0, 1)),
    ((0, 1, 5, 4), (0, -1, 0)),
    ((3, 2, 6, 7), (0, 1, 0)),
    ((0, 3, 7, 4), (-1, 0, 0)),
    ((1, 2, 6, 5), (1, 0, 0)),
)

_EDGE_OF_PAIR = {}
for _ei, (_a, _b) in enumerate(EDGES):
    _EDGE_OF_PAIR[frozenset((int(_a), int(_b)))] = _ei


def _face_segments(case: int, quad, normal):
    """Directed crossing segments on one face, inside kept to the left."""
    inside = [(case >> c) & 1 == 1 for c in quad]
    crossings = []
    for i in range(4):
        a, b = quad[i], quad[(i + 1) % 4]
        if inside[i] != inside[(i + 1) % 4]:
            crossings.append((i, _EDGE_OF_PAIR[frozenset((a, b))]))
    if not crossings:
        return []
    pos = {e: (CORNERS[EDGES[e][0]] + CORNERS[EDGES[e][1]]) / 2.0
           for _, e in crossings}
    n = np.asarray(normal, float)

    def orient(e_from, e_to, ref_corner):
        d = pos[e_to] - pos[e_from]
        left = np.cross(n, d)
        mid = (pos[e_from] + pos[e_to]) / 2.0
        if np.dot(CORNERS[ref_corner] - mid, left) >= 0:
            return (e_from, e_to)
        return (e_to, e_from)

    if len(crossings) == 2:
        ref = quad[[i for i in range(4) if inside[i]][0]]
        (_, e1), (_, e2) = crossings
        return [orient(e1, e2, ref)]
    # ambiguous face: two diagonal inside corners; cut each one off separately
    segments = []
    for i in range(4):
        if not inside[i]:
            continue
        prev_edge = _EDGE_OF_PAIR[frozenset((quad[i], quad[(i - 1) % 4]))]
        next_edge = _EDGE_OF_PAIR[frozenset((quad[i], quad[(i + 1) % 4]))]
        segments.append(orient(prev_edge, next_edge, quad[i]))
    return segments


def _triangulate_case(case: int) -> list[tuple[int, int, int]]:
    segments = []
    for quad, normal in _FACES:
        segments.extend(_face_segments(case, quad, normal))
    if not segments:
        return []
    nxt = {}
    for a, b in segments:
        if a in nxt:
            raise AssertionError(f"case {case}: inconsistent orientation")
        nxt[a] = b
    loops = []
    remaining = set(nxt)
    while remaining:
        start = min(remaining)
        loop = [start]
        remaining.discard(start)
        cur = nxt[start]
        while cur != start:
            loop.append(cur)
            remaining.discard(cur)
            cur = nxt[cur]
        loops.append(loop)
    tris = []
    for loop in loops:
        for i in range(1, len(loop) - 1):
            tris.append((loop[0], loop[i], loop[i + 1]))
    return tris


def _build_tables():
    tri: list[list[tuple[int, int, int]]] = []
    edge = np.zeros(256, np.int32)
    for case in range(256):
        tris = _triangulate_case(case)
        tri.append(tris)
        mask = 0
        for t in tris:
            for e in t:
                mask |= 1 << e
        edge[case] = mask

    # fix the global winding so triangle normals point toward positive sdf:
    # case 1 has corner 0 inside; its triangle must face away from corner 0
    t0 = tri[1][0]
    p = [(CORNERS[EDGES[e][0]] + CORNERS[EDGES[e][1]]) / 2.0 for e in t0]
    normal = np.cross(p[1] - p[0], p[2] - p[0])
    if np.dot(normal, np.array([0.5, 0.5, 0.5]) - CORNERS[0]) < 0:
        tri = [[(a, c, b) for a, b, c in tris] for tris in tri]
    return edge, tri


EDGE_TABLE, TRI_TABLE = _build_tables()

_EDGE_BITS = [[e for e in range(12) if EDGE_TABLE[c] >> e & 1]
              for c in range(256)]


@dataclass(frozen=True)
class EdgeVertex:
    edge: int
    offset8: int            # interpolation parameter quantized to 8 bits
    rgb: tuple[int, int, int]
    motion: float


@dataclass(frozen=True)
class McCell:
    index: int              # 0..511 within the block
    case: int               # 0..255
    edges: tuple[EdgeVertex, ...]


@dataclass(frozen=True)
class McBlock:
    coord: tuple[int, int, int]
    cells: tuple[McCell, ...]


class MissingBlockError(KeyError):
    pass


_NEIGHBOR_OFFSETS = ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
                     (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1))
_CELL_HEAD = struct.Struct("<HBB")
_EDGE_REC = struct.Struct("<BB3Bf")
_EMPTY_CELLS = struct.pack("<H", 0)


def extract_payloads(volume: VoxelBlockMap, coords,
                     chunk: int = 256) -> dict[tuple[int, int, int], bytes]:
    """Batched extraction; returns coord -> canonical cell payload bytes.

    Boundary cells read corner voxels from the +1 neighbor blocks; corners
    with zero weight deactivate their cells.  Blocks without active cells map
    to the empty payload.  Missing blocks raise MissingBlockError.
    """
    coords = [tuple(int(v) for v in c) for c in coords]
    out: dict[tuple[int, int, int], bytes] = {}
    for start in range(0, len(coords), chunk):
        _extract_chunk(volume, coords[start:start + chunk], out)
    return out


def _extract_chunk(volume, coords, out):
    n = len(coords)
    if n == 0:
        return
    pad = BLOCK + 1
    sdf = np.zeros((n, pad, pad, pad), np.float32)
    weight = np.zeros((n, pad, pad, pad), np.float32)
    color = np.zeros((n, pad, pad, pad, 3), np.float32)
    motion = np.zeros((n, pad, pad, pad), np.float32)

    for dx, dy, dz in _NEIGHBOR_OFFSETS:
        rows, datas = [], []
        for i, (cx, cy, cz) in enumerate(coords):
            block = volume.get((cx + dx, cy + dy, cz + dz))
            if block is None:
                if (dx, dy, dz) == (0, 0, 0):
                    raise MissingBlockError((cx, cy, cz))
                continue
            rows.append(i)
            datas.append(block.data)
        if not rows:
            continue
        rows = np.asarray(rows)
        sx = slice(8, 9) if dx else slice(0, 8)
        sy = slice(8, 9) if dy else slice(0, 8)
        sz = slice(8, 9) if dz else slice(0, 8)
        gx = slice(0, 1) if dx else slice(0, 8)
        gy = slice(0, 1) if dy else slice(0, 8)
        gz = slice(0, 1) if dz else slice(0, 8)
        sdf[rows, sx, sy, sz] = np.stack(
            [d.sdf.reshape(8, 8, 8)[gx, gy, gz] for d in datas])
        weight[rows, sx, sy, sz] = np.stack(
            [d.weight.reshape(8, 8, 8)[gx, gy, gz] for d in datas])
        color[rows, sx, sy, sz] = np.stack(
            [d.color.reshape(8, 8, 8, 3)[gx, gy, gz] for d in datas])
        motion[rows, sx, sy, sz] = np.stack(
            [d.motion.reshape(8, 8, 8)[gx, gy, gz] for d in datas])

    case = np.zeros((n, BLOCK, BLOCK, BLOCK), np.int32)
    all_active = np.ones((n, BLOCK, BLOCK, BLOCK), bool)
    corner_sdf = []
    for ci, (dx, dy, dz) in enumerate(CORNERS):
        cs = sdf[:, dx:dx + 8, dy:dy + 8, dz:dz + 8]
        corner_sdf.append(cs)
        case |= (cs < 0).astype(np.int32) << ci
        all_active &= weight[:, dx:dx + 8, dy:dy + 8, dz:dz + 8] > 0
    active = all_active & (case != 0) & (case != 255)

    # per-edge interpolation data, computed only where the edge is active
    edge_active = np.zeros((12,) + case.shape, bool)
    for e in range(12):
        edge_active[e] = active & ((EDGE_TABLE[case] >> e) & 1).astype(bool)
    t_val = np.zeros((12,) + case.shape, np.float32)
    q_val = np.zeros((12,) + case.shape, np.int16)
    rgb_val = np.zeros((12,) + case.shape + (3,), np.uint8)
    mo_val = np.zeros((12,) + case.shape, np.float32)
    for e, (a, b) in enumerate(EDGES):
        mask = edge_active[e]
        if not mask.any():
            continue
        ax, ay, az = CORNERS[a]
        bx, by, bz = CORNERS[b]
        sa = corner_sdf[a][mask]
        sb = corner_sdf[b][mask]
        t = sa / (sa - sb)
        q = np.rint(t * 255.0).astype(np.int16)
        t_val[e][mask] = t
        q_val[e][mask] = q
        idx = np.nonzero(mask)
        ca = color[idx[0], idx[1] + ax, idx[2] + ay, idx[3] + az]
        cb = color[idx[0], idx[1] + bx, idx[2] + by, idx[3] + bz]
        rgb = np.clip(np.rint(ca + t[:, None] * (cb - ca)), 0, 255)
        rgb_val[e][mask] = rgb.astype(np.uint8)
        ma = motion[idx[0], idx[1] + ax, idx[2] + ay, idx[3] + az]
        mb = motion[idx[0], idx[1] + bx, idx[2] + by, idx[3] + bz]
        mo_val[e][mask] = (ma + t * (mb - ma)).astype(np.float32)

    bodies = [bytearray() for _ in range(n)]
    counts = [0] * n
    for bi, ix, iy, iz in zip(*np.nonzero(active)):
        c = int(case[bi, ix, iy, iz])
        body = bodies[bi]
        edges = _EDGE_BITS[c]
        body += _CELL_HEAD.pack(int((ix * BLOCK + iy) * BLOCK + iz), c,
                                len(edges))
        for e in edges:
            body += _EDGE_REC.pack(e, int(q_val[e, bi, ix, iy, iz]),
                                   *rgb_val[e, bi, ix, iy, iz],
                                   float(mo_val[e, bi, ix, iy, iz]))
        counts[bi] += 1
    for i, coord in enumerate(coords):
        out[coord] = struct.pack("<H", counts[i]) + bytes(bodies[i])


def extract_mc_block(volume: VoxelBlockMap, coord) -> McBlock:
    """Structured extraction of one block (see extract_payloads)."""
    coord = tuple(int(c) for c in coord)
    payload = extract_payloads(volume, [coord])[coord]
    cells, _ = parse_cell_payload(payload)
    return McBlock(coord, cells)


def mc_block_to_triangles(block: McBlock, voxel_size: float):
    """Rebuilds the triangle soup of one extracted block.

    Returns (positions (N,3) float64 meters, colors (N,3) uint8,
    motion (N,) float32) with N = 3 * triangle count.
    """
    positions = []
    colors = []
    motions = []
    bx, by, bz = block.coord
    base = np.array([bx, by, bz], float) * BLOCK
    for cell in block.cells:
        ix = cell.index // (BLOCK * BLOCK)
        iy = (cell.index // BLOCK) % BLOCK
        iz = cell.index % BLOCK
        verts = {}
        for ev in cell.edges:
            a, b = EDGES[ev.edge]
            t = ev.offset8 / 255.0
            # voxel centers sit at +0.5: cell corners are center positions
            pos = (base + np.array([ix, iy, iz]) + 0.5
                   + CORNERS[a] + t * (CORNERS[b] - CORNERS[a])) * voxel_size
            verts[ev.edge] = (pos, ev.rgb, ev.motion)
        for tri in TRI_TABLE[cell.case]:
            if any(e not in verts for e in tri):
                continue
            for e in tri:
                pos, rgb, mo = verts[e]
                positions.append(pos)
                colors.append(rgb)
                motions.append(mo)
    if not positions:
        return (np.zeros((0, 3)), np.zeros((0, 3), np.uint8),
                np.zeros(0, np.float32))
    return (np.asarray(positions), np.asarray(colors, np.uint8),
            np.asarray(motions, np.float32))


# -- canonical byte form (shared by the wire format and state digests) -------

def cell_payload(cells) -> bytes:
    out = bytearray()
    out += struct.pack("<H", len(cells))
    for cell in cells:
        out += _CELL_HEAD.pack(cell.index, cell.case, len(cell.edges))
        for ev in cell.edges:
            out += _EDGE_REC.pack(ev.edge, ev.offset8, *ev.rgb, ev.motion)
    return bytes(out)


def parse_cell_payload(buf: bytes, offset: int = 0):
    """Inverse of cell_payload; returns (cells, new_offset).

    Raises ValueError on malformed input.
    """
    if offset + 2 > len(buf):
        raise ValueError("truncated cell payload")
    (count,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    cells = []
    for _ in range(count):
        if offset + 4 > len(buf):
            raise ValueError("truncated cell header")
        index, case, n_edges = _CELL_HEAD.unpack_from(buf, offset)
        offset += 4
        if index >= BLOCK ** 3:
            raise ValueError("cell index out of range")
        expected = _EDGE_BITS[case]
        if n_edges != len(expected):
            raise ValueError("edge count inconsistent with case")
        edges = []
        for _ in range(n_edges):
            if offset + 9 > len(buf):
                raise ValueError("truncated edge record")
            e, q, r, g, b, mo = _EDGE_REC.unpack_from(buf, offset)
            offset += 9
            edges.append(EdgeVertex(e, q, (r, g, b), mo))
        got = [ev.edge for ev in edges]
        if got != expected:
            raise ValueError("active edges do not match the case table")
        cells.append(McCell(index, case, tuple(edges)))
    return tuple(cells), offset


def skip_cell_payload(buf: bytes, offset: int = 0) -> int:
    """Returns the offset just past one cell payload, validating structure
    without building record objects."""
    if offset + 2 > len(buf):
        raise ValueError("truncated cell payload")
    (count,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    for _ in range(count):
        if offset + 4 > len(buf):
            raise ValueError("truncated cell header")
        index, case, n_edges = _CELL_HEAD.unpack_from(buf, offset)
        offset += 4
        if index >= BLOCK ** 3:
            raise ValueError("cell index out of range")
        expected = _EDGE_BITS[case]
        if n_edges != len(expected):
            raise ValueError("edge count inconsistent with case")
        for e in expected:
            if offset + 9 > len(buf):
                raise ValueError("truncated edge record")
            if buf[offset] != e:
                raise ValueError("active edges do not match the case table")
            offset += 9
    return offset


def payload_is_empty(payload: bytes) -> bool:
    return payload == _EMPTY_CELLS


def mesh_digest(blocks: dict[tuple[int, int, int], "bytes | tuple"]) -> str:
    """Canonical digest of a per-block mesh store.

    Values may be packed payload bytes or structured cell tuples; only
    blocks with at least one cell participate, order-independently.
    """
    h = hashlib.sha256()
    for coord in sorted(blocks):
        body = blocks[coord]
        if not isinstance(body, (bytes, bytearray)):
            body = cell_payload(body)
        if payload_is_empty(body) or len(body) == 0:
            continue
        h.update(struct.pack("<3i", *coord))
        h.update(struct.pack("<I", len(body)))
        h.update(body)
    return h.hexdigest()


def extract_all_digest(volume: VoxelBlockMap) -> str:
    """Digest of a full extraction of the volume (reconstruction side)."""
    return mesh_digest(extract_payloads(volume, volume.coords()))
