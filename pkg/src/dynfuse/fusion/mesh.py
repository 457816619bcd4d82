"""Mesh snapshot export and evaluation helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .mc import (McBlock, extract_payloads, mc_block_to_triangles,
                 parse_cell_payload, payload_is_empty)
from .tsdf import VoxelBlockMap


def volume_triangles(volume: VoxelBlockMap):
    """Triangle soup of the whole volume: (positions, colors, motion)."""
    pos, col, mot = [], [], []
    payloads = extract_payloads(volume, volume.coords())
    for coord, payload in payloads.items():
        if payload_is_empty(payload):
            continue
        cells, _ = parse_cell_payload(payload)
        p, c, m = mc_block_to_triangles(McBlock(coord, cells),
                                        volume.params.voxel_size)
        if len(p):
            pos.append(p)
            col.append(c)
            mot.append(m)
    if not pos:
        return (np.zeros((0, 3)), np.zeros((0, 3), np.uint8),
                np.zeros(0, np.float32))
    return np.concatenate(pos), np.concatenate(col), np.concatenate(mot)


def save_mesh_ply(path: str | Path, positions: np.ndarray,
                  colors: np.ndarray, motion: np.ndarray) -> None:
    """ASCII PLY with per-vertex color and a scalar `motion` property.

    Vertices come in triangle order (3 per face), so faces are implicit
    triples; they are still written for standard viewers.
    """
    n = len(positions)
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "property float motion",
        f"element face {n // 3}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    import io
    buf = io.StringIO()
    buf.write("\n".join(lines) + "\n")
    if n:
        table = np.concatenate([
            np.asarray(positions, np.float64).round(6),
            np.asarray(colors, np.int64),
            np.asarray(motion, np.float64).round(6)[:, None],
        ], axis=1)
        np.savetxt(buf, table,
                   fmt=["%.6f", "%.6f", "%.6f", "%d", "%d", "%d", "%.6f"])
        faces = np.arange(n, dtype=np.int64).reshape(-1, 3)
        np.savetxt(buf, np.concatenate(
            [np.full((len(faces), 1), 3, np.int64), faces], axis=1), fmt="%d")
    Path(path).write_text(buf.getvalue())


def load_mesh_ply(path: str | Path):
    """Reads meshes written by save_mesh_ply."""
    lines = Path(path).read_text().splitlines()
    n = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            start = i + 1
            break
    else:
        raise ValueError("not a PLY file")
    pos = np.zeros((n, 3))
    col = np.zeros((n, 3), np.uint8)
    mot = np.zeros(n, np.float32)
    for j in range(n):
        parts = lines[start + j].split()
        pos[j] = [float(v) for v in parts[:3]]
        col[j] = [int(v) for v in parts[3:6]]
        mot[j] = float(parts[6])
    return pos, col, mot


def mesh_rms_to_sdf(positions: np.ndarray, sdf_fn) -> float:
    """RMS of an analytic signed-distance function over mesh vertices."""
    if len(positions) == 0:
        return float("nan")
    d = np.asarray(sdf_fn(positions), float)
    return float(np.sqrt(np.mean(d * d)))
