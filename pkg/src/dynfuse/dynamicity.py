"""Dynamicity scoring: per-pixel flow error, per-instance histogram modes,
normalization, temporal smoothing, classification and motion accumulation.

The chain turns the measured backward flow and the camera-induced flow into a
normalized score map where <= 1 means static, >= the dynamic threshold means
dynamic, and the band in between keeps an instance's previous label.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import DynParams, FlowField, InstanceMap, ScoreMap, warp_image


class Classification(Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class InstanceScore:
    track_id: int
    raw_mode: float
    normalized_mode: float
    smoothed: float
    classification: Classification


def end_point_error(flow: FlowField, cam_vectors: np.ndarray,
                    cam_valid: np.ndarray,
                    weight: np.ndarray | None = None):
    """Confidence-weighted distance between measured and camera-induced flow.

    error(u) = weight(u) * ||flow(u) - cam_flow(u)||; pixels where either
    field is invalid get error 0 and are excluded from histograms via the
    returned validity mask.
    """
    w = flow.weight if weight is None else weight
    diff = flow.vectors.astype(np.float64) - cam_vectors.astype(np.float64)
    err = w.astype(np.float64) * np.sqrt((diff * diff).sum(axis=-1))
    valid = flow.valid & cam_valid
    return np.where(valid, err, 0.0), valid


def _modes_from_counts(counts: np.ndarray, min_size: int, bin_width: float) -> float:
    """Rightmost qualifying local maximum; plateaus collapse to their right end.

    Falls back to the (rightmost) globally largest bin when no local maximum
    reaches `min_size`.  Returns the bin center.
    """
    n = len(counts)
    modes = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and counts[j + 1] == counts[i]:
            j += 1
        left_ok = i == 0 or counts[i - 1] < counts[i]
        right_ok = j == n - 1 or counts[j + 1] < counts[i]
        if counts[i] > 0 and left_ok and right_ok:
            modes.append(j)
        i = j + 1
    qualifying = [m for m in modes if counts[m] >= min_size]
    if qualifying:
        best = qualifying[-1]
    else:
        best = int(np.flatnonzero(counts == counts.max())[-1])
    return (best + 0.5) * bin_width


def instance_modes(error: np.ndarray, valid: np.ndarray, imap: InstanceMap,
                   params: DynParams) -> dict[int, float]:
    """Histogram mode of the flow error per instance.

    Instances without a single valid pixel are left out of the result.
    """
    out: dict[int, float] = {}
    for iid, info in imap.instances.items():
        values = error[(imap.ids == iid) & valid]
        if values.size == 0:
            continue
        nbins = int(np.floor(values.max() / params.bin_width)) + 1
        bins = np.floor(values / params.bin_width).astype(np.int64)
        counts = np.bincount(bins, minlength=nbins)
        out[iid] = _modes_from_counts(counts, params.min_mode_size(values.size),
                                      params.bin_width)
    return out


def normalize_scores(error: np.ndarray, modes: dict[int, float],
                     rescale: float):
    """Shifts by the smallest instance mode and rescales, clamped at 0.

    With no instances the frame is treated as all-static (zero everywhere).
    """
    if not modes:
        return np.zeros_like(error), {}
    base = min(modes.values())
    norm_error = np.maximum(rescale * (error - base), 0.0)
    norm_modes = {i: max(rescale * (m - base), 0.0) for i, m in modes.items()}
    return norm_error, norm_modes


def smooth_scores(previous: dict[int, float], normalized: dict[int, float],
                  alpha: float, drop_below: float = 1e-4) -> dict[int, float]:
    """Exponential moving average per track id.

    Unseen tracks start at their first value; tracks absent this frame decay
    by (1 - alpha) and are dropped once negligible.
    """
    out: dict[int, float] = {}
    for track, value in normalized.items():
        if track in previous:
            out[track] = alpha * value + (1.0 - alpha) * previous[track]
        else:
            out[track] = value
    for track, value in previous.items():
        if track not in normalized:
            decayed = (1.0 - alpha) * value
            if decayed >= drop_below:
                out[track] = decayed
    return out


def classify_and_propagate(smoothed: dict[int, float], imap: InstanceMap,
                           norm_error: np.ndarray, params: DynParams,
                           previous: dict[int, Classification]):
    """Builds the per-pixel score map and per-instance classification.

    Instance pixels carry their instance's smoothed score exactly; background
    pixels carry the normalized per-pixel error (they feed fusion weighting
    but never the dynamic mask).  Scores >= the dynamic threshold classify as
    dynamic, <= 1 as static, and the band in between keeps the previous label
    (static for unseen tracks).
    """
    scores = norm_error.astype(np.float64).copy()
    classes: dict[int, Classification] = {}
    for iid in imap.instances:
        s = smoothed.get(iid, 0.0)
        scores[imap.ids == iid] = s
        if s >= params.dynamic_threshold:
            cls = Classification.DYNAMIC
        elif s <= 1.0:
            cls = Classification.STATIC
        else:
            cls = previous.get(iid, Classification.STATIC)
            if cls is Classification.UNCERTAIN:
                cls = Classification.STATIC
        classes[iid] = cls
    return scores, classes


def dynamic_mask(imap: InstanceMap,
                 classes: dict[int, Classification]) -> np.ndarray:
    """True exactly on pixels of dynamically classified instances.

    Background pixels are never dynamic: without a detection, even strong
    flow evidence cannot mark a region dynamic.
    """
    mask = np.zeros(imap.shape, bool)
    for iid, cls in classes.items():
        if cls is Classification.DYNAMIC:
            mask |= imap.ids == iid
    return mask


def accumulate_motion(prev_accum: np.ndarray, flow: FlowField,
                      motion_3d: np.ndarray) -> np.ndarray:
    """Warps the running motion total and adds this frame's 3D displacement.

    Disoccluded or out-of-bounds pixels restart from the current magnitude.
    """
    warped = warp_image(prev_accum.astype(np.float64), flow)
    step = np.linalg.norm(motion_3d.astype(np.float64), axis=-1)
    return (warped + step).astype(np.float32)


class DynamicityScorer:
    """Orderly per-frame driver owning the smoothing and accumulation state.

    Frames must be fed in index order; the output ScoreMap, mask and
    per-instance records are deterministic functions of the input sequence.
    """

    def __init__(self, params: DynParams, shape: tuple[int, int]):
        self.params = params
        self._smoothed: dict[int, float] = {}
        self._classes: dict[int, Classification] = {}
        self._accum = np.zeros(shape, np.float32)

    def step(self, flow: FlowField, cam_vectors: np.ndarray,
             cam_valid: np.ndarray, imap: InstanceMap,
             motion_3d: np.ndarray):
        """Scores one frame.

        Returns (ScoreMap, mask, dict track -> InstanceScore).
        """
        error, valid = end_point_error(flow, cam_vectors, cam_valid)
        modes = instance_modes(error, valid, imap, self.params)
        norm_error, norm_modes = normalize_scores(error, modes, self.params.rescale)
        self._smoothed = smooth_scores(self._smoothed, norm_modes,
                                       self.params.smoothing)
        scores, classes = classify_and_propagate(
            self._smoothed, imap, norm_error, self.params, self._classes)
        self._classes = {**{k: v for k, v in self._classes.items()
                            if k in self._smoothed}, **classes}
        mask = dynamic_mask(imap, classes)
        self._accum = accumulate_motion(self._accum, flow, motion_3d)

        records = {
            iid: InstanceScore(
                track_id=iid,
                raw_mode=modes.get(iid, 0.0),
                normalized_mode=norm_modes.get(iid, 0.0),
                smoothed=self._smoothed.get(iid, 0.0),
                classification=classes[iid],
            )
            for iid in imap.instances
        }
        score_map = ScoreMap(scores.astype(np.float32), self._accum.copy())
        return score_map, mask, records
