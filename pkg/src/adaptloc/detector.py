"""Actor detection model: RPN on SF(K) features, ROI heads on TF2 vectors.

Proposals are computed from the keyframe's spatial features and consumed
unchanged by ROI pooling on the clip's temporally flattened features; the
two maps share one spatial stride, so box coordinates map to either grid by
dividing by that stride.

The composite loss is ``l_act = l_rpn + l_cls + l_reg``. Background
occupies class index 0 in the ROI head; dataset class ``c`` maps to head
label ``c + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import BoundingBox, Detection, decode_deltas, encode_deltas, iou_matrix
from .encoders import (
    ClipEncoder,
    EncoderConfig,
    InstanceEncoder,
    SpatialEncoder,
    clip_to_tensor,
    image_to_tensor,
    roi_align,
)

SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid and proposal/detection selection knobs.

    ``rpn_positive_iou``/``rpn_negative_iou`` bound anchor matching;
    ``roi_fg_iou`` is the foreground threshold for second-stage ROI labels.
    Proposal selection keeps ``pre_nms_kept`` boxes by objectness, applies
    NMS at ``nms_iou`` and keeps ``proposals_kept``. Final detections are
    filtered at ``score_threshold``, per-class NMS at ``detect_nms_iou``,
    capped at ``max_per_frame``.
    """

    scales: tuple[float, ...] = (10.0, 14.0, 20.0)
    aspect_ratios: tuple[float, ...] = (1.0,)
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    pre_nms_kept: int = 64
    proposals_kept: int = 12
    nms_iou: float = 0.7
    roi_fg_iou: float = 0.5
    score_threshold: float = 0.05
    detect_nms_iou: float = 0.5
    max_per_frame: int = 10

    def __post_init__(self):
        if not (0.0 <= self.rpn_negative_iou < self.rpn_positive_iou <= 1.0):
            raise ValueError(
                f"need 0 <= rpn_negative_iou < rpn_positive_iou <= 1, got "
                f"{self.rpn_negative_iou}, {self.rpn_positive_iou}"
            )
        if self.proposals_kept < 1 or self.pre_nms_kept < 1:
            raise ValueError("proposal counts must be >= 1")

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass(frozen=True)
class DetectionLosses:
    """Components of the composite detection loss; ``l_act`` is their sum
    computed here so the additivity invariant holds by construction."""

    l_rpn: float
    l_cls: float
    l_reg: float

    @property
    def l_act(self) -> float:
        return self.l_rpn + self.l_cls + self.l_reg


@dataclass
class ClipSample:
    """One labeled training window: clip tensor, its keyframe, keyframe GT."""

    clip: torch.Tensor  # [3, T, H, W] float in [0, 1]
    keyframe: torch.Tensor  # [3, H, W]
    boxes: np.ndarray  # [M, 4] keyframe GT boxes
    class_ids: np.ndarray  # [M] dataset class ids (0..C-1)


@dataclass
class TargetSample:
    """One unlabeled window from the target domain; carries no label
    fields at all, so target annotations are structurally unreadable."""

    clip: torch.Tensor
    keyframe: torch.Tensor


def base_anchors(config: AnchorConfig) -> np.ndarray:
    """Zero-centered anchor boxes [A, 4], one per (scale, ratio)."""
    out = []
    for scale in config.scales:
        for ratio in config.aspect_ratios:
            w = scale * np.sqrt(ratio)
            h = scale / np.sqrt(ratio)
            out.append([-w / 2, -h / 2, w / 2, h / 2])
    return np.array(out, dtype=np.float64)


def grid_anchors(config: AnchorConfig, grid_hw: tuple[int, int], stride: int) -> np.ndarray:
    """All anchors for a feature grid, [H'*W'*A, 4], centered on cell centers."""
    gh, gw = grid_hw
    base = base_anchors(config)
    cx = (np.arange(gw) + 0.5) * stride
    cy = (np.arange(gh) + 0.5) * stride
    shift_x, shift_y = np.meshgrid(cx, cy)
    shifts = np.stack(
        [shift_x.ravel(), shift_y.ravel(), shift_x.ravel(), shift_y.ravel()], axis=1
    )
    return (shifts[:, None, :] + base[None, :, :]).reshape(-1, 4)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (stable)."""
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


def clip_boxes(boxes: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, float(w))
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, float(h))
    return out


def match_anchors(
    anchors: np.ndarray, gt_boxes: np.ndarray, config: AnchorConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor labels (1 fg / 0 bg / -1 ignore) and matched GT indices.

    Anchors at IoU >= rpn_positive_iou are positive, < rpn_negative_iou
    negative; additionally the best anchor for every GT box is forced
    positive so no GT goes unmatched.
    """
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    matched = best_gt
    labels[best_iou < config.rpn_negative_iou] = 0
    labels[best_iou >= config.rpn_positive_iou] = 1
    best_anchor_per_gt = ious.argmax(axis=0)
    labels[best_anchor_per_gt] = 1
    matched[best_anchor_per_gt] = np.arange(len(gt_boxes))
    return labels, matched


def rpn_loss(
    anchors: np.ndarray,
    objectness_logits: torch.Tensor,
    deltas: torch.Tensor,
    gt_boxes: np.ndarray,
    config: AnchorConfig,
) -> torch.Tensor:
    """Balanced objectness BCE (mean over positives + mean over negatives)
    plus smooth-L1 on positive-anchor deltas. Deterministic: no anchor
    subsampling. With no GT the regression term is zero and every anchor
    is negative."""
    labels, matched = match_anchors(anchors, gt_boxes, config)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    loss = objectness_logits.new_zeros(())
    bce = nn.functional.binary_cross_entropy_with_logits
    if len(pos) > 0:
        loss = loss + bce(
            objectness_logits[pos], torch.ones(len(pos), dtype=objectness_logits.dtype)
        )
    if len(neg) > 0:
        loss = loss + bce(
            objectness_logits[neg], torch.zeros(len(neg), dtype=objectness_logits.dtype)
        )
    if len(pos) > 0 and len(gt_boxes) > 0:
        targets = encode_deltas(anchors[pos], gt_boxes[matched[pos]])
        loss = loss + nn.functional.smooth_l1_loss(
            deltas[pos],
            torch.from_numpy(targets).to(deltas.dtype),
            beta=SMOOTH_L1_BETA,
        )
    return loss


class RpnHead(nn.Module):
    def __init__(self, config: EncoderConfig, anchor_config: AnchorConfig, width: int = 32):
        super().__init__()
        a = anchor_config.num_anchors
        self.conv = nn.Conv2d(config.sf_channels, width, 3, padding=1, padding_mode="replicate")
        self.objectness = nn.Conv2d(width, a, 1)
        self.deltas = nn.Conv2d(width, 4 * a, 1)

    def forward(self, sf_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns per-anchor logits [B, N] and deltas [B, N, 4] in the same
        order as :func:`grid_anchors` (row-major cells, anchors within)."""
        z = nn.functional.relu(self.conv(sf_map))
        b = sf_map.shape[0]
        obj = self.objectness(z).permute(0, 2, 3, 1).reshape(b, -1)
        dl = self.deltas(z).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return obj, dl


class RoiHead(nn.Module):
    """Per-ROI action classification (C+1, background first) and per-class
    box regression (4C, class c in slice 4(c-1):4c)."""

    def __init__(self, config: EncoderConfig, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.classify = nn.Linear(config.tf2_channels, num_classes + 1)
        self.regress = nn.Linear(config.tf2_channels, 4 * num_classes)

    def forward(self, tf2_vectors: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tf2_vectors.shape[0] == 0:
            return (
                tf2_vectors.new_zeros((0, self.num_classes + 1)),
                tf2_vectors.new_zeros((0, 4 * self.num_classes)),
            )
        return self.classify(tf2_vectors), self.regress(tf2_vectors)


def detection_loss(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    labels: np.ndarray,
    reg_targets: np.ndarray,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy over C+1 labels; smooth-L1 on the matched class's
    delta slice for foreground ROIs only. All-background gives l_reg = 0."""
    zero = logits.new_zeros(()) if logits.numel() else torch.zeros(())
    if len(labels) == 0:
        return zero, zero.clone()
    label_t = torch.from_numpy(labels)
    l_cls = nn.functional.cross_entropy(logits, label_t)
    fg = np.flatnonzero(labels > 0)
    if len(fg) == 0:
        return l_cls, logits.new_zeros(())
    cls_idx = labels[fg] - 1
    sel = deltas[fg].reshape(len(fg), -1, 4)[np.arange(len(fg)), cls_idx]
    l_reg = nn.functional.smooth_l1_loss(
        sel, torch.from_numpy(reg_targets[fg]).to(deltas.dtype), beta=SMOOTH_L1_BETA
    )
    return l_cls, l_reg


class ActionLocalizer(nn.Module):
    """Two-backbone detector: SF(K) drives proposals, TF1(V)/TF2 drive
    per-ROI classification and regression on the keyframe."""

    def __init__(
        self,
        config: EncoderConfig | None = None,
        anchor_config: AnchorConfig | None = None,
        num_classes: int = 4,
    ):
        super().__init__()
        self.config = config or EncoderConfig()
        self.anchor_config = anchor_config or AnchorConfig()
        self.num_classes = num_classes
        self.sf = SpatialEncoder(self.config)
        self.tf1 = ClipEncoder(self.config)
        self.tf2 = InstanceEncoder(self.config)
        self.rpn = RpnHead(self.config, self.anchor_config)
        self.roi_head = RoiHead(self.config, num_classes)
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    def anchors_for(self, grid_hw: tuple[int, int]) -> np.ndarray:
        if grid_hw not in self._anchor_cache:
            self._anchor_cache[grid_hw] = grid_anchors(
                self.anchor_config, grid_hw, self.config.spatial_stride
            )
        return self._anchor_cache[grid_hw]

    def _propose_one(
        self,
        objectness: torch.Tensor,
        deltas: torch.Tensor,
        anchors: np.ndarray,
        image_size: tuple[int, int],
    ) -> tuple[np.ndarray, np.ndarray]:
        """Proposal boxes [P, 4] and objectness probabilities [P] for one
        sample, NMS-deduplicated, descending score."""
        cfg = self.anchor_config
        scores = torch.sigmoid(objectness).detach().numpy().astype(np.float64)
        boxes = decode_deltas(anchors, deltas.detach().numpy().astype(np.float64))
        boxes = clip_boxes(boxes, image_size)
        wh = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
        valid = np.flatnonzero(wh >= 1.0)
        boxes, scores = boxes[valid], scores[valid]
        order = np.argsort(-scores, kind="stable")[: cfg.pre_nms_kept]
        boxes, scores = boxes[order], scores[order]
        keep = nms(boxes, scores, cfg.nms_iou)[: cfg.proposals_kept]
        return boxes[keep], scores[keep]

    def generate_proposals(
        self, sf_map: torch.Tensor, image_size: tuple[int, int]
    ) -> list[list[tuple[BoundingBox, float]]]:
        """Public proposal op: per batch element, a descending-score list of
        (box, objectness) pairs."""
        obj, dl = self.rpn(sf_map)
        anchors = self.anchors_for(tuple(sf_map.shape[-2:]))
        out = []
        for b in range(sf_map.shape[0]):
            boxes, scores = self._propose_one(obj[b], dl[b], anchors, image_size)
            out.append(
                [(BoundingBox.from_array(bx), float(s)) for bx, s in zip(boxes, scores)]
            )
        return out

    def _roi_vectors(self, tf1_map_b: torch.Tensor, boxes: np.ndarray,
                     image_size: tuple[int, int]) -> torch.Tensor:
        if len(boxes) == 0:
            return tf1_map_b.new_zeros((0, self.config.tf2_channels))
        pooled = roi_align(
            tf1_map_b,
            torch.from_numpy(boxes).to(tf1_map_b.dtype),
            self.config.spatial_stride,
            self.config.roi_size,
            image_size,
        )
        return self.tf2(pooled)

    def forward_batch(
        self,
        labeled: Sequence[ClipSample],
        unlabeled: Sequence[TargetSample] = (),
    ) -> dict:
        """One training forward over a mixed batch.

        Returns a dict with torch scalars ``l_rpn``, ``l_cls``, ``l_reg``
        (averaged over labeled samples) plus the domain-ordered feature
        bundles consumed by the adaptation losses: ``sf_maps``/``tf1_maps``
        (source then target along the batch axis) and per-sample
        ``tf2_source``/``tf2_target`` vector lists.
        """
        if len(labeled) == 0:
            raise ValueError("batch must contain at least one labeled source sample")
        samples = list(labeled) + list(unlabeled)
        images = torch.stack([s.keyframe for s in samples])
        clips = torch.stack([s.clip for s in samples])
        image_size = (images.shape[-2], images.shape[-1])
        sf_maps = self.sf(images)
        tf1_maps = self.tf1(clips)
        obj, dl = self.rpn(sf_maps)
        anchors = self.anchors_for(tuple(sf_maps.shape[-2:]))

        n_lab = len(labeled)
        l_rpn = sf_maps.new_zeros(())
        l_cls = sf_maps.new_zeros(())
        l_reg = sf_maps.new_zeros(())
        tf2_source: list[torch.Tensor] = []
        tf2_target: list[torch.Tensor] = []
        for i, sample in enumerate(samples):
            proposals, _ = self._propose_one(obj[i], dl[i], anchors, image_size)
            if i < n_lab:
                gt = np.asarray(sample.boxes, dtype=np.float64).reshape(-1, 4)
                l_rpn = l_rpn + rpn_loss(anchors, obj[i], dl[i], gt, self.anchor_config)
                rois = np.concatenate([proposals, gt], axis=0) if len(gt) else proposals
                vectors = self._roi_vectors(tf1_maps[i], rois, image_size)
                tf2_source.append(vectors)
                logits, deltas = self.roi_head(vectors)
                labels, reg_targets = self._roi_targets(rois, gt, sample.class_ids)
                cls_i, reg_i = detection_loss(logits, deltas, labels, reg_targets)
                l_cls = l_cls + cls_i
                l_reg = l_reg + reg_i
            else:
                tf2_target.append(self._roi_vectors(tf1_maps[i], proposals, image_size))
        return {
            "l_rpn": l_rpn / n_lab,
            "l_cls": l_cls / n_lab,
            "l_reg": l_reg / n_lab,
            "sf_maps": sf_maps,
            "tf1_maps": tf1_maps,
            "tf2_source": tf2_source,
            "tf2_target": tf2_target,
            "n_labeled": n_lab,
        }

    def _roi_targets(
        self, rois: np.ndarray, gt: np.ndarray, class_ids: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Second-stage labels (0 background, c+1 foreground) and encoded
        regression targets for each ROI."""
        n = len(rois)
        labels = np.zeros(n, dtype=np.int64)
        targets = np.zeros((n, 4), dtype=np.float64)
        if len(gt) == 0 or n == 0:
            return labels, targets
        ious = iou_matrix(rois, gt)
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best]
        fg = best_iou >= self.anchor_config.roi_fg_iou
        labels[fg] = np.asarray(class_ids)[best[fg]] + 1
        targets[fg] = encode_deltas(rois[fg], gt[best[fg]])
        return labels, targets

    def losses(self, labeled: Sequence[ClipSample]) -> DetectionLosses:
        """Detection losses of a labeled batch as plain floats."""
        out = self.forward_batch(labeled)
        return DetectionLosses(
            float(out["l_rpn"].detach()),
            float(out["l_cls"].detach()),
            float(out["l_reg"].detach()),
        )

    @torch.no_grad()
    def detect_window(
        self, clip: torch.Tensor, keyframe: torch.Tensor, frame_index: int, video_id: str = ""
    ) -> list[Detection]:
        """Detections on one window's keyframe."""
        image_size = (keyframe.shape[-2], keyframe.shape[-1])
        sf_map = self.sf(keyframe[None])
        tf1_map = self.tf1(clip[None])
        obj, dl = self.rpn(sf_map)
        anchors = self.anchors_for(tuple(sf_map.shape[-2:]))
        proposals, _ = self._propose_one(obj[0], dl[0], anchors, image_size)
        if len(proposals) == 0:
            return []
        vectors = self._roi_vectors(tf1_map[0], proposals, image_size)
        logits, deltas = self.roi_head(vectors)
        probs = torch.softmax(logits, dim=1).numpy().astype(np.float64)
        deltas = deltas.numpy().astype(np.float64).reshape(len(proposals), -1, 4)
        cfg = self.anchor_config
        detections: list[Detection] = []
        for c in range(self.num_classes):
            scores = probs[:, c + 1]
            refined = clip_boxes(decode_deltas(proposals, deltas[:, c]), image_size)
            wh = np.minimum(refined[:, 2] - refined[:, 0], refined[:, 3] - refined[:, 1])
            ok = np.flatnonzero((scores >= cfg.score_threshold) & (wh >= 1.0))
            if len(ok) == 0:
                continue
            keep = nms(refined[ok], scores[ok], cfg.detect_nms_iou)
            for k in keep:
                idx = ok[k]
                detections.append(
                    Detection(
                        frame_index=frame_index,
                        box=BoundingBox.from_array(refined[idx]),
                        class_id=c,
                        score=float(min(scores[idx], 1.0)),
                        video_id=video_id,
                    )
                )
        detections.sort(key=lambda d: -d.score)
        return detections[: cfg.max_per_frame]

    @torch.no_grad()
    def detect_frames(self, frames: np.ndarray, video_id: str = "") -> list[Detection]:
        """Detections for every frame of a video.

        Each frame is made the keyframe of one clip window; the video is
        edge-padded in time so windows at both ends stay full length.
        """
        t = self.config.clip_length
        pad_l = t // 2
        pad_r = t - pad_l - 1
        padded = np.pad(frames, ((pad_l, pad_r), (0, 0), (0, 0), (0, 0)), mode="edge")
        out: list[Detection] = []
        for f in range(frames.shape[0]):
            window = padded[f : f + t]
            out.extend(
                self.detect_window(
                    clip_to_tensor(window), image_to_tensor(frames[f]), f, video_id
                )
            )
        return out


def window_at(frames: np.ndarray, frame_index: int, t: int) -> np.ndarray:
    """The length-``t`` window of ``frames`` whose middle frame is
    ``frame_index``, edge-padded at video boundaries."""
    pad_l = t // 2
    pad_r = t - pad_l - 1
    padded = np.pad(frames, ((pad_l, pad_r), (0, 0), (0, 0), (0, 0)), mode="edge")
    return padded[frame_index : frame_index + t]


def make_clip_sample(clip, frame_index: int, t: int) -> ClipSample:
    """Build a labeled training window from a loaded dataset clip, with the
    ground truth of the chosen keyframe."""
    window = window_at(clip.frames, frame_index, t)
    anns = [a for a in clip.annotations if a.frame_index == frame_index]
    boxes = (
        np.stack([a.box.as_array() for a in anns])
        if anns
        else np.zeros((0, 4), dtype=np.float64)
    )
    class_ids = np.array([a.class_id for a in anns], dtype=np.int64)
    return ClipSample(
        clip=clip_to_tensor(window),
        keyframe=image_to_tensor(clip.frames[frame_index]),
        boxes=boxes,
        class_ids=class_ids,
    )


def make_target_sample(clip, frame_index: int, t: int) -> TargetSample:
    """Build an unlabeled window from a target-domain clip."""
    window = window_at(clip.frames, frame_index, t)
    return TargetSample(
        clip=clip_to_tensor(window),
        keyframe=image_to_tensor(clip.frames[frame_index]),
    )
