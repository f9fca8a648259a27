"""Geometric primitives shared by the detector, trainer and evaluation stack.

Boxes are continuous (sub-pixel) ``[x1, y1, x2, y2]`` corners; area is
``(x2 - x1) * (y2 - y1)`` with no +1 pixel convention. All operations here
are pure and stateless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_DELTA_EPS = 1e-8


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with strictly positive width and height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return BoundingBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    """A scored per-frame box prediction."""

    frame_index: int
    box: BoundingBox
    class_id: int
    score: float
    video_id: str = ""

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthInstance:
    """An annotated actor box; ``instance_id`` links one actor across frames."""

    frame_index: int
    box: BoundingBox
    class_id: int
    instance_id: int
    video_id: str = ""


@dataclass(frozen=True)
class ActionTube:
    """Temporally contiguous sequence of linked per-frame boxes of one class.

    ``frames`` must be strictly consecutive integers; ``boxes`` and ``scores``
    run parallel to it. ``tube_score`` is the mean per-frame score along the
    tube (pinned convention for ranking in video-level evaluation).
    """

    class_id: int
    frames: tuple[int, ...]
    boxes: tuple[BoundingBox, ...]
    scores: tuple[float, ...]
    tube_score: float
    video_id: str = ""

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("tube must contain at least one frame")
        if not (len(self.frames) == len(self.boxes) == len(self.scores)):
            raise ValueError("frames, boxes and scores must have equal length")
        for a, b in zip(self.frames, self.frames[1:]):
            if b != a + 1:
                raise ValueError(f"tube frames must be consecutive, got {self.frames}")

    @property
    def start_frame(self) -> int:
        return self.frames[0]

    @property
    def end_frame(self) -> int:
        return self.frames[-1]

    def __len__(self) -> int:
        return len(self.frames)


def iou_2d(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes in continuous area."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``[N, 4]`` / ``[M, 4]`` box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    if boxes_a.size == 0 or boxes_b.size == 0:
        return np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    ix1 = np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    iy1 = np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    ix2 = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2])
    iy2 = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def iou_3d(t1: ActionTube, t2: ActionTube) -> float:
    """Tube overlap: temporal IoU of frame spans times the mean spatial IoU
    over the frames both tubes cover.

    Frame spans are inclusive and counted in whole frames. Disjoint spans
    give 0. Class agreement is the caller's responsibility.
    """
    lo = max(t1.start_frame, t2.start_frame)
    hi = min(t1.end_frame, t2.end_frame)
    inter_t = hi - lo + 1
    if inter_t <= 0:
        return 0.0
    union_t = len(t1) + len(t2) - inter_t
    spatial = 0.0
    for f in range(lo, hi + 1):
        b1 = t1.boxes[f - t1.start_frame]
        b2 = t2.boxes[f - t2.start_frame]
        spatial += iou_2d(b1, b2)
    spatial /= inter_t
    return (inter_t / union_t) * spatial


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Center/size deltas of ``targets`` relative to ``anchors``, both ``[N, 4]``.

    Parametrization: ``dx = (tcx - acx) / aw``, ``dy = (tcy - acy) / ah``,
    ``dw = log(tw / aw)``, ``dh = log(th / ah)``.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    aw = np.maximum(anchors[..., 2] - anchors[..., 0], _DELTA_EPS)
    ah = np.maximum(anchors[..., 3] - anchors[..., 1], _DELTA_EPS)
    acx = anchors[..., 0] + 0.5 * aw
    acy = anchors[..., 1] + 0.5 * ah
    tw = np.maximum(targets[..., 2] - targets[..., 0], _DELTA_EPS)
    th = np.maximum(targets[..., 3] - targets[..., 1], _DELTA_EPS)
    tcx = targets[..., 0] + 0.5 * tw
    tcy = targets[..., 1] + 0.5 * th
    dx = (tcx - acx) / aw
    dy = (tcy - acy) / ah
    dw = np.log(tw / aw)
    dh = np.log(th / ah)
    return np.stack([dx, dy, dw, dh], axis=-1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_deltas`; returns ``[N, 4]`` corner boxes."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    acx = anchors[..., 0] + 0.5 * aw
    acy = anchors[..., 1] + 0.5 * ah
    cx = deltas[..., 0] * aw + acx
    cy = deltas[..., 1] * ah + acy
    w = np.exp(deltas[..., 2]) * aw
    h = np.exp(deltas[..., 3]) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_box_delta(anchor: BoundingBox, gt: BoundingBox) -> np.ndarray:
    """Regression target for a single anchor/ground-truth pair."""
    return encode_deltas(anchor.as_array()[None], gt.as_array()[None])[0]


def decode_box_delta(anchor: BoundingBox, delta) -> BoundingBox:
    """Apply a 4-vector delta to an anchor. Non-finite deltas are an error."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (4,):
        raise ValueError(f"delta must be a 4-vector, got shape {delta.shape}")
    if not np.all(np.isfinite(delta)):
        raise ValueError(f"delta must be finite, got {delta}")
    box = decode_deltas(anchor.as_array()[None], delta[None])[0]
    return BoundingBox.from_array(box)
