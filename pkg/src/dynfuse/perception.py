"""Pluggable segmentation/flow providers and proposal post-processing.

Providers come in three flavours: ground-truth (served from a rendered or
recorded sequence), a naive block-matching flow baseline, and replay from a
sequence container.  Neural providers are deliberately out of scope; anything
conforming to the same two call signatures can be dropped in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import FlowField, InstanceInfo, InstanceMap, RgbdFrame, warp_image

log = logging.getLogger(__name__)


class ProviderUnavailable(RuntimeError):
    """Raised by a provider that cannot serve the requested frame."""


class ProviderKind(Enum):
    GROUND_TRUTH = "ground_truth"
    NAIVE_FLOW = "naive_flow"
    REPLAY = "replay"


@dataclass(frozen=True)
class RegionProposal:
    """A binary mask with a class label and a confidence in [0, 1]."""

    mask: np.ndarray
    class_label: int
    score: float

    def __post_init__(self):
        if not np.any(self.mask):
            raise ValueError("proposal mask must be nonempty")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("proposal score must be in [0, 1]")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


def resolve_proposals(proposals: list[RegionProposal], shape: tuple[int, int],
                      nms_iou: float = 0.5) -> InstanceMap:
    """Non-maximum suppression followed by per-frame id assignment.

    Proposals are visited in descending confidence; one is suppressed when its
    IoU with any already accepted mask exceeds `nms_iou`.  Survivors get fresh
    ids 1..n and pixel conflicts go to the higher-confidence mask.
    """
    labels = np.zeros(shape, np.int32)
    ids = np.zeros(shape, np.int32)
    instances: dict[int, InstanceInfo] = {}
    accepted: list[RegionProposal] = []
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].score)
    next_id = 1
    for idx in order:
        prop = proposals[idx]
        if prop.mask.shape != shape:
            raise ValueError("proposal mask shape mismatch")
        if any(mask_iou(prop.mask, a.mask) > nms_iou for a in accepted):
            continue
        accepted.append(prop)
        paint = prop.mask & (ids == 0)
        if not np.any(paint):
            continue
        ids[paint] = next_id
        labels[paint] = prop.class_label
        instances[next_id] = InstanceInfo(prop.class_label,
                                          int(np.count_nonzero(paint)), next_id)
        next_id += 1
    return InstanceMap(labels, ids, instances)


class TrackAssociator:
    """Greedy IoU matching of per-frame instances to persistent track ids.

    Current-frame masks are warped into the previous frame via the backward
    flow, matched greedily by descending IoU against the previous instance
    map, and matched instances inherit the track id.  Unmatched instances get
    fresh, monotonically increasing ids that are never recycled.
    """

    def __init__(self, assoc_iou: float = 0.3):
        self.assoc_iou = assoc_iou
        self._next_track = 1
        self._prev: InstanceMap | None = None

    def associate(self, cur: InstanceMap, flow: FlowField) -> InstanceMap:
        prev = self._prev
        mapping: dict[int, int] = {}
        if prev is not None and prev.instances and cur.instances:
            warped = self._warp_ids(cur, flow)
            pairs = []
            for cid in cur.instances:
                wmask = warped == cid
                if not np.any(wmask):
                    continue
                for pid in prev.instances:
                    iou = mask_iou(wmask, prev.ids == pid)
                    if iou > self.assoc_iou:
                        pairs.append((iou, cid, pid))
            pairs.sort(key=lambda t: -t[0])
            used_prev: set[int] = set()
            for iou, cid, pid in pairs:
                if cid in mapping or pid in used_prev:
                    continue
                mapping[cid] = prev.instances[pid].track_id
                used_prev.add(pid)
        for cid in cur.instances:
            if cid not in mapping:
                mapping[cid] = self._next_track
                self._next_track += 1
        self._next_track = max(self._next_track, max(mapping.values(), default=0) + 1)

        ids = np.zeros_like(cur.ids)
        instances: dict[int, InstanceInfo] = {}
        for cid, info in cur.instances.items():
            track = mapping[cid]
            ids[cur.ids == cid] = track
            instances[track] = InstanceInfo(info.class_label, info.pixel_count, track)
        result = InstanceMap(cur.labels.copy(), ids, instances)
        self._prev = result
        return result

    @staticmethod
    def _warp_ids(cur: InstanceMap, flow: FlowField) -> np.ndarray:
        """Scatter current ids to their previous-frame positions (nearest px)."""
        h, w = cur.shape
        out = np.zeros((h, w), np.int32)
        ys, xs = np.nonzero(cur.ids)
        if len(ys) == 0:
            return out
        tx = np.rint(xs + flow.vectors[ys, xs, 0]).astype(np.int64)
        ty = np.rint(ys + flow.vectors[ys, xs, 1]).astype(np.int64)
        ok = flow.valid[ys, xs] & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        out[ty[ok], tx[ok]] = cur.ids[ys[ok], xs[ok]]
        return out


def confidence_weights(flow: FlowField, inverse: FlowField, cost: np.ndarray,
                       fb_max: float = 2.0, cost_max: float = 1.0) -> np.ndarray:
    """Forward-backward-consistency confidence in [0, 1].

    weight(u) = clamp(1 - fb_err/fb_max) * clamp(1 - cost/cost_max) with
    fb_err(u) = ||flow(u) + inverse(u + flow(u))||, inverse sampled
    bilinearly.  Pixels with invalid flow get weight 0.
    """
    sampled = warp_image(inverse.vectors.astype(np.float64), flow)
    fb_err = np.linalg.norm(flow.vectors.astype(np.float64) + sampled, axis=-1)
    w = np.clip(1.0 - fb_err / fb_max, 0.0, 1.0)
    w *= np.clip(1.0 - cost.astype(np.float64) / cost_max, 0.0, 1.0)
    return np.where(flow.valid, w, 0.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class GroundTruthProvider:
    """Serves exact masks and backward flow recorded alongside a sequence.

    `source` must expose instance_map(index) -> InstanceMap and
    flow(index) -> FlowField (see synth.render and synth.container).
    """

    kind = ProviderKind.GROUND_TRUTH

    def __init__(self, source):
        self._source = source

    def segment(self, frame: RgbdFrame) -> list[RegionProposal]:
        imap = self._source.instance_map(frame.index)
        return [
            RegionProposal(imap.ids == iid, info.class_label, 1.0)
            for iid, info in sorted(imap.instances.items())
        ]

    def flow(self, frame: RgbdFrame, prev: RgbdFrame) -> FlowField:
        return self._source.flow(frame.index)


# Replay shares the implementation; the distinction is where the source reads
# from (in-memory render vs sequence container).
class ReplayProvider(GroundTruthProvider):
    kind = ProviderKind.REPLAY


class NaiveFlowProvider:
    """Integer block-matching flow, baseline quality only.

    Backward flow by exhaustive SAD search over +-radius displacements on the
    grayscale image, patch-summed with a box filter.  Cost is the SAD of the
    winning displacement normalized to [0, 1].
    """

    kind = ProviderKind.NAIVE_FLOW

    def __init__(self, radius: int = 3, patch: int = 5):
        self.radius = radius
        self.patch = patch

    def flow(self, frame: RgbdFrame, prev: RgbdFrame) -> FlowField:
        cur = frame.color.astype(np.float64).mean(axis=2)
        ref = prev.color.astype(np.float64).mean(axis=2)
        h, w = cur.shape
        best_cost = np.full((h, w), np.inf)
        best_dx = np.zeros((h, w), np.float32)
        best_dy = np.zeros((h, w), np.float32)
        # (0, 0) first so exact ties prefer zero motion
        offsets = sorted(
            ((dy, dx) for dy in range(-self.radius, self.radius + 1)
             for dx in range(-self.radius, self.radius + 1)),
            key=lambda o: (abs(o[0]) + abs(o[1]), o),
        )
        for dy, dx in offsets:
            shifted = self._shift(ref, dy, dx)
            sad = self._box(np.abs(cur - shifted), self.patch)
            better = sad < best_cost - 1e-12
            best_cost[better] = sad[better]
            best_dx[better] = dx
            best_dy[better] = dy
        vectors = np.stack([best_dx, best_dy], axis=-1)
        norm = self.patch * self.patch * 255.0
        cost = (best_cost / norm).astype(np.float32)
        valid = np.ones((h, w), bool)
        return FlowField(vectors, valid, np.ones((h, w), np.float32), cost)

    @staticmethod
    def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
        out = np.full_like(img, 1e6)
        h, w = img.shape
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        yd = slice(max(0, dy), min(h, h + dy))
        xd = slice(max(0, dx), min(w, w + dx))
        out[ys, xs] = img[yd, xd]
        return out

    @staticmethod
    def _box(img: np.ndarray, size: int) -> np.ndarray:
        # summed-area table with edge padding
        r = size // 2
        padded = np.pad(img, r, mode="edge")
        integ = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
        np.cumsum(np.cumsum(padded, axis=0), axis=1, out=integ[1:, 1:])
        h, w = img.shape
        return (
            integ[size:size + h, size:size + w]
            - integ[:h, size:size + w]
            - integ[size:size + h, :w]
            + integ[:h, :w]
        )


def segment_or_empty(provider, frame: RgbdFrame) -> list[RegionProposal]:
    """Wraps provider.segment; unavailability degrades to an all-static frame."""
    try:
        return provider.segment(frame)
    except ProviderUnavailable as exc:
        log.warning("segmentation unavailable for frame %d: %s", frame.index, exc)
        return []
