"""Latency, frame-rate and bandwidth metrics over synchronized logs.

Definitions:
  latency    mean/std of (offset-corrected arrival - emission) per frame;
  frame rate 1 / mean(arrival deltas of consecutive dynamic frames), std
             propagated first-order from the delta distribution;
  bandwidth  per packet type, bits over 1-second windows reported in MBit/s.

All standard deviations are population deviations (ddof = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float
    n: int

    def as_dict(self):
        return {"mean": self.mean, "std": self.std, "n": self.n}


@dataclass
class MetricsReport:
    latency: Stat | None
    fps: Stat | None
    bandwidth: dict[str, Stat] = field(default_factory=dict)
    unmatched_frames: int = 0
    sync_reliable: bool = True

    def as_dict(self):
        return {
            "latency_s": self.latency.as_dict() if self.latency else None,
            "fps": self.fps.as_dict() if self.fps else None,
            "bandwidth_mbit_s": {k: v.as_dict() for k, v in self.bandwidth.items()},
            "unmatched_frames": self.unmatched_frames,
            "sync_reliable": self.sync_reliable,
        }


def latency_metric(emissions: dict[int, int], arrivals: dict[int, int],
                   emission_offset_us: int = 0,
                   arrival_offset_us: int = 0) -> tuple[Stat | None, int]:
    """Mean/std end-to-end latency in seconds over matching frame indices.

    Timestamps are corrected into the common (server) clock by adding each
    side's estimated offset.  Unmatched frames are excluded and counted.
    """
    common = sorted(set(emissions) & set(arrivals))
    unmatched = len(set(emissions) ^ set(arrivals))
    if not common:
        return None, unmatched
    lat = np.array([
        (arrivals[k] + arrival_offset_us) - (emissions[k] + emission_offset_us)
        for k in common
    ], np.float64) / 1e6
    return Stat(float(lat.mean()), float(lat.std()), len(common)), unmatched


def fps_metric(arrival_times_us) -> Stat | None:
    """Frame rate from consecutive dynamic-frame arrival deltas."""
    t = np.asarray(sorted(arrival_times_us), np.float64)
    if len(t) < 2:
        return None
    deltas = np.diff(t) / 1e6
    mean_delta = float(deltas.mean())
    if mean_delta <= 0:
        return None
    fps = 1.0 / mean_delta
    # first-order error propagation of f = 1/d
    std = float(deltas.std()) / (mean_delta ** 2)
    return Stat(fps, std, len(deltas))


def bandwidth_metric(records, wall_time_s: float | None = None,
                     window_s: float = 1.0) -> dict[str, Stat]:
    """Per-type MBit/s over fixed windows.

    `records` is an iterable of (timestamp_us, type_name, nbytes).  Windows
    start at the first record; `wall_time_s` extends the span so idle tails
    count as zero-traffic windows.
    """
    rows = sorted(records)
    if not rows:
        return {}
    t0 = rows[0][0]
    t_end = rows[-1][0]
    if wall_time_s is not None:
        t_end = max(t_end, t0 + int(wall_time_s * 1e6))
    n_windows = max(1, math.ceil((t_end - t0) / (window_s * 1e6)))
    by_type: dict[str, np.ndarray] = {}
    for ts, name, nbytes in rows:
        if name not in by_type:
            by_type[name] = np.zeros(n_windows)
        w = min(int((ts - t0) / (window_s * 1e6)), n_windows - 1)
        by_type[name][w] += nbytes * 8
    return {
        name: Stat(float(bits.mean() / 1e6), float(bits.std() / 1e6), n_windows)
        for name, bits in by_type.items()
    }


# -- log file parsing ---------------------------------------------------------

def read_emission_log(path: str | Path) -> dict[int, int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        frame, ts = line.split()
        out[int(frame)] = int(ts)
    return out


def read_arrival_log(path: str | Path):
    """Returns (frame -> timestamp_us, frame -> dynamic pixel count)."""
    times, pixels = {}, {}
    for line in Path(path).read_text().splitlines():
        frame, ts, px = line.split()
        times[int(frame)] = int(ts)
        pixels[int(frame)] = int(px)
    return times, pixels


def read_netlog(path: str | Path, direction: str | None = None):
    """Yields (timestamp_us, type_name, nbytes) rows."""
    out = []
    for line in Path(path).read_text().splitlines():
        ts, d, name, nbytes = line.split()
        if direction is None or d == direction:
            out.append((int(ts), name, int(nbytes)))
    return out


TYPE_GROUPS = {"TSDF": "TSDF_BLOCKS", "MC": "MC_BLOCKS", "Dyn": "DYN_FRAME"}


def grouped_bandwidth(tsdf_rows, mc_dyn_rows, wall_time_s=None):
    """Headline bandwidth groups: TSDF (uplink) and MC/Dyn (downlink)."""
    out: dict[str, Stat] = {}
    up = bandwidth_metric(tsdf_rows, wall_time_s)
    down = bandwidth_metric(mc_dyn_rows, wall_time_s)
    for label, type_name in TYPE_GROUPS.items():
        source = up if label == "TSDF" else down
        if type_name in source:
            out[label] = source[type_name]
        else:
            out[label] = Stat(0.0, 0.0, 0)
    return out
