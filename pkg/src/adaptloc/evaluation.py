"""Localization metrics: frame-mAP under the VOC all-point protocol, action
tube linking by dynamic programming, video-mAP over 3D IoU, and a four-way
error decomposition of the top-ranked detections.

Everything here is a pure function over Detection / GroundTruthInstance /
ActionTube values; the only I/O is the detection dump and the metrics
report, both flat text.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import format_kv, parse_kv_text
from .core import ActionTube, BoundingBox, Detection, GroundTruthInstance, iou_2d, iou_3d

ERROR_IOU_CORRECT = 0.5  # bucket boundaries of the error decomposition
ERROR_IOU_LOCALIZED = 0.3


@dataclass(frozen=True)
class EvalConfig:
    """Metric knobs. Interpolation is fixed to the all-point protocol so
    numbers stay comparable across runs."""

    iou_threshold: float = 0.5
    ap_interpolation: str = "all-point"
    link_alpha: float = 1.0
    top_k_error_analysis: int = 1000

    def __post_init__(self):
        if not (0.0 < self.iou_threshold < 1.0):
            raise ValueError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if self.ap_interpolation != "all-point":
            raise ValueError(f"only all-point interpolation is supported, got {self.ap_interpolation!r}")
        if self.link_alpha < 0:
            raise ValueError(f"link_alpha must be >= 0, got {self.link_alpha}")
        if self.top_k_error_analysis < 1:
            raise ValueError(f"top_k_error_analysis must be >= 1, got {self.top_k_error_analysis}")


@dataclass(frozen=True)
class ErrorBreakdown:
    """Fractions of analyzed detections per error bucket; they sum to 1."""

    correct: float
    mislocalized: float
    background: float
    incorrect: float
    analyzed: int

    def __post_init__(self):
        total = self.correct + self.mislocalized + self.background + self.incorrect
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"error fractions must sum to 1, got {total!r}")


def _score_order(scores: Sequence[float]) -> list[int]:
    """Indices in descending-score order; ties keep input order so the
    ranking is deterministic."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def _interpolated_ap(tp_flags: np.ndarray, num_positive: int) -> float:
    """All-point interpolated AP from rank-ordered TP flags."""
    if num_positive <= 0:
        raise ValueError("AP undefined without positives")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags.astype(np.float64))
    fp = np.cumsum((~tp_flags).astype(np.float64))
    recall = tp / num_positive
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _greedy_tp_flags(groups, overlaps, candidates, order, iou_threshold):
    """Shared greedy matcher: walk detections by rank, match each to the
    highest-overlap unmatched ground truth in its group."""
    matched = {g: [False] * len(candidates[g]) for g in candidates}
    flags = np.zeros(len(order), dtype=bool)
    for rank, det_idx in enumerate(order):
        group = groups[det_idx]
        if group not in candidates:
            continue
        best_iou, best = 0.0, -1
        for slot, _ in enumerate(candidates[group]):
            if matched[group][slot]:
                continue
            v = overlaps(det_idx, group, slot)
            if v > best_iou:
                best_iou, best = v, slot
        if best >= 0 and best_iou >= iou_threshold:
            matched[group][best] = True
            flags[rank] = True
    return flags


def frame_ap(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthInstance],
    class_id: int,
    iou_threshold: float = 0.5,
) -> float:
    """Per-class frame-level AP: greedy matching at ``iou_threshold`` within
    each (video, frame), then all-point interpolation.

    Raises ValueError when the class has no ground truth (AP undefined).
    """
    gts = [g for g in ground_truth if g.class_id == class_id]
    if not gts:
        raise ValueError(f"no ground truth for class {class_id}; AP undefined")
    dets = [d for d in detections if d.class_id == class_id]
    order = _score_order([d.score for d in dets])

    candidates: dict[tuple[str, int], list[GroundTruthInstance]] = {}
    for g in gts:
        candidates.setdefault((g.video_id, g.frame_index), []).append(g)
    groups = {i: (d.video_id, d.frame_index) for i, d in enumerate(dets)}

    def overlap(det_idx, group, slot):
        return iou_2d(dets[det_idx].box, candidates[group][slot].box)

    flags = _greedy_tp_flags(groups, overlap, candidates, order, iou_threshold)
    return _interpolated_ap(flags, len(gts))


def video_ap(
    tubes: Sequence[ActionTube],
    gt_tubes: Sequence[ActionTube],
    class_id: int,
    iou_threshold: float = 0.5,
) -> float:
    """Per-class video-level AP: the frame-AP machinery with 3D IoU as the
    overlap function and tubes ranked by ``tube_score``."""
    gts = [t for t in gt_tubes if t.class_id == class_id]
    if not gts:
        raise ValueError(f"no ground truth tubes for class {class_id}; AP undefined")
    dets = [t for t in tubes if t.class_id == class_id]
    order = _score_order([t.tube_score for t in dets])

    candidates: dict[str, list[ActionTube]] = {}
    for t in gts:
        candidates.setdefault(t.video_id, []).append(t)
    groups = {i: t.video_id for i, t in enumerate(dets)}

    def overlap(det_idx, group, slot):
        return iou_3d(dets[det_idx], candidates[group][slot])

    flags = _greedy_tp_flags(groups, overlap, candidates, order, iou_threshold)
    return _interpolated_ap(flags, len(gts))


def _best_path(frame_boxes: list[list[Detection]], link_alpha: float):
    """DP over one box per frame maximizing sum of scores plus
    ``link_alpha`` times the IoU between consecutive boxes. Returns
    (path value, per-frame box indices); ties resolve to the earliest
    index so extraction is deterministic."""
    values = [d.score for d in frame_boxes[0]]
    parents: list[list[int]] = []
    for t in range(1, len(frame_boxes)):
        prev = frame_boxes[t - 1]
        new_values, ptr = [], []
        for d in frame_boxes[t]:
            best_v, best_j = -np.inf, -1
            for j, p in enumerate(prev):
                v = values[j] + link_alpha * iou_2d(p.box, d.box)
                if v > best_v:
                    best_v, best_j = v, j
            new_values.append(best_v + d.score)
            ptr.append(best_j)
        parents.append(ptr)
        values = new_values
    end = int(np.argmax(values))
    path = [end]
    for ptr in reversed(parents):
        path.append(ptr[path[-1]])
    path.reverse()
    return values[end], path


def link_tubes(detections: Sequence[Detection], link_alpha: float = 1.0) -> list[ActionTube]:
    """Link one video's single-class detections into action tubes.

    Repeatedly extracts the best full-coverage path (one box in every frame
    of the detected range) by DP, removes its boxes, and stops when some
    frame runs out of boxes. Gaps in the frame range mean no full-coverage
    path exists, so the result is empty. ``tube_score`` is the mean
    per-frame score.
    """
    if not detections:
        return []
    class_ids = {d.class_id for d in detections}
    video_ids = {d.video_id for d in detections}
    if len(class_ids) != 1:
        raise ValueError(f"link_tubes expects a single class, got {sorted(class_ids)}")
    if len(video_ids) != 1:
        raise ValueError(f"link_tubes expects a single video, got {sorted(video_ids)}")
    class_id = class_ids.pop()
    video_id = video_ids.pop()

    by_frame: dict[int, list[Detection]] = {}
    for d in detections:
        by_frame.setdefault(d.frame_index, []).append(d)
    frames = sorted(by_frame)
    if frames != list(range(frames[0], frames[-1] + 1)):
        return []

    tubes = []
    while all(by_frame[f] for f in frames):
        frame_boxes = [by_frame[f] for f in frames]
        _, path = _best_path(frame_boxes, link_alpha)
        chosen = [frame_boxes[t][i] for t, i in enumerate(path)]
        tubes.append(
            ActionTube(
                class_id=class_id,
                frames=tuple(frames),
                boxes=tuple(d.box for d in chosen),
                scores=tuple(d.score for d in chosen),
                tube_score=float(np.mean([d.score for d in chosen])),
                video_id=video_id,
            )
        )
        for t, i in enumerate(path):
            del by_frame[frames[t]][i]
    return tubes


def ground_truth_tubes(ground_truth: Sequence[GroundTruthInstance]) -> list[ActionTube]:
    """Assemble GT tubes by (video_id, instance_id); scores are 1."""
    grouped: dict[tuple[str, int], list[GroundTruthInstance]] = {}
    for g in ground_truth:
        grouped.setdefault((g.video_id, g.instance_id), []).append(g)
    tubes = []
    for (video_id, _), members in sorted(grouped.items()):
        members = sorted(members, key=lambda g: g.frame_index)
        classes = {g.class_id for g in members}
        if len(classes) != 1:
            raise ValueError(f"instance in {video_id!r} spans classes {sorted(classes)}")
        tubes.append(
            ActionTube(
                class_id=classes.pop(),
                frames=tuple(g.frame_index for g in members),
                boxes=tuple(g.box for g in members),
                scores=(1.0,) * len(members),
                tube_score=1.0,
                video_id=video_id,
            )
        )
    return tubes


def error_analysis(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthInstance],
    top_k: int = 1000,
) -> ErrorBreakdown:
    """Classify the ``top_k`` highest-scoring detections into four buckets.

    A detection whose class differs from its best-overlapping ground truth
    is ``incorrect``; otherwise its max IoU selects correct / mislocalized /
    background per the fixed [0.5, 1], [0.3, 0.5), [0, 0.3) ranges. Frames
    without ground truth (or zero overlap everywhere) count as background.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if not detections:
        raise ValueError("error analysis needs at least one detection")
    order = _score_order([d.score for d in detections])[:top_k]

    gt_by_frame: dict[tuple[str, int], list[GroundTruthInstance]] = {}
    for g in ground_truth:
        gt_by_frame.setdefault((g.video_id, g.frame_index), []).append(g)

    counts = {"correct": 0, "mislocalized": 0, "background": 0, "incorrect": 0}
    for i in order:
        d = detections[i]
        gts = gt_by_frame.get((d.video_id, d.frame_index), ())
        best_iou, best = 0.0, None
        for g in gts:
            v = iou_2d(d.box, g.box)
            if v > best_iou:
                best_iou, best = v, g
        if best is None:
            counts["background"] += 1
        elif best.class_id != d.class_id:
            counts["incorrect"] += 1
        elif best_iou >= ERROR_IOU_CORRECT:
            counts["correct"] += 1
        elif best_iou >= ERROR_IOU_LOCALIZED:
            counts["mislocalized"] += 1
        else:
            counts["background"] += 1
    n = len(order)
    return ErrorBreakdown(
        correct=counts["correct"] / n,
        mislocalized=counts["mislocalized"] / n,
        background=counts["background"] / n,
        incorrect=counts["incorrect"] / n,
        analyzed=n,
    )


def evaluate_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthInstance],
    num_classes: int,
    cfg: EvalConfig | None = None,
) -> dict[str, float]:
    """Full metric sweep: per-class frame AP, frame-mAP, tube linking,
    per-class video AP, video-mAP, and the error decomposition.

    Classes without ground truth are excluded from each mAP mean with a
    warning. Keys are flat so the result round-trips through the key-value
    report format.
    """
    cfg = cfg or EvalConfig()
    out: dict[str, float] = {}

    frame_aps = []
    for c in range(num_classes):
        try:
            ap = frame_ap(detections, ground_truth, c, cfg.iou_threshold)
        except ValueError:
            warnings.warn(f"class {c}: no ground truth boxes; excluded from frame-mAP")
            continue
        out[f"frame_ap.{c}"] = ap
        frame_aps.append(ap)
    if frame_aps:
        out["frame_map"] = float(np.mean(frame_aps))

    gt_tubes = ground_truth_tubes(ground_truth)
    by_video_class: dict[tuple[str, int], list[Detection]] = {}
    for d in detections:
        by_video_class.setdefault((d.video_id, d.class_id), []).append(d)
    tubes: list[ActionTube] = []
    for key in sorted(by_video_class):
        tubes.extend(link_tubes(by_video_class[key], cfg.link_alpha))

    video_aps = []
    for c in range(num_classes):
        try:
            ap = video_ap(tubes, gt_tubes, c, cfg.iou_threshold)
        except ValueError:
            warnings.warn(f"class {c}: no ground truth tubes; excluded from video-mAP")
            continue
        out[f"video_ap.{c}"] = ap
        video_aps.append(ap)
    if video_aps:
        out["video_map"] = float(np.mean(video_aps))

    if detections:
        breakdown = error_analysis(detections, ground_truth, cfg.top_k_error_analysis)
        out["error.correct"] = breakdown.correct
        out["error.mislocalized"] = breakdown.mislocalized
        out["error.background"] = breakdown.background
        out["error.incorrect"] = breakdown.incorrect
        out["error.analyzed"] = float(breakdown.analyzed)
    else:
        warnings.warn("no detections; error decomposition skipped")

    out["num_detections"] = float(len(detections))
    out["num_gt_boxes"] = float(len(ground_truth))
    out["num_tubes"] = float(len(tubes))
    out["num_gt_tubes"] = float(len(gt_tubes))
    return out


def write_detections(path, detections: Iterable[Detection]) -> None:
    """Dump detections one per line:
    video_id,frame_index,class_id,score,x1,y1,x2,y2."""
    lines = []
    for d in detections:
        b = d.box
        lines.append(
            f"{d.video_id},{d.frame_index},{d.class_id},{d.score!r},"
            f"{b.x1!r},{b.y1!r},{b.x2!r},{b.y2!r}"
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path) -> list[Detection]:
    """Inverse of ``write_detections``; malformed records raise ValueError
    naming the 1-based line number."""
    out = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(
                    f"{path}: line {lineno}: expected 8 comma-separated fields, got {len(parts)}"
                )
            try:
                det = Detection(
                    video_id=parts[0],
                    frame_index=int(parts[1]),
                    class_id=int(parts[2]),
                    score=float(parts[3]),
                    box=BoundingBox(*(float(v) for v in parts[4:8])),
                )
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            out.append(det)
    return out


def write_metrics_report(path, metrics: dict[str, float]) -> None:
    """Write metrics as key-value text; floats use repr so the report
    parses back bit-for-bit."""
    body = format_kv({k: repr(float(v)) for k, v in metrics.items()})
    Path(path).write_text("# metrics report\n" + body)


def read_metrics_report(path) -> dict[str, float]:
    kv = parse_kv_text(Path(path).read_text(), origin=str(path))
    return {k: float(v) for k, v in kv.items()}
