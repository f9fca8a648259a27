"""Adversarial domain adaptation: the three domain losses, their combined
objective, and the two-phase training loop.

The discriminators predict P(target | features). Every domain loss is a
symmetric cross-entropy on the TRUE domain label (source wants the
prediction near 0, target near 1); the min-max against the feature
extractors is realized purely by gradient reversal layers in front of each
discriminator, with a single optimizer over all parameters.

Scaling convention: the reversal layers run at scale 1 and the adversarial
weight enters once, as ``total = l_act + lam * l_adv``. Both the reversed
feature gradient and the discriminator gradient therefore scale by lam
(one-knob factorization; the equivalent GRL-side factorization is pinned
by a gradient-equality test).

Phase 1 trains the detector on labeled source clips only; phase 2
continues on mixed batches with the adversarial terms enabled. Source and
target minibatch streams draw from per-step seeded generators, so runs are
bitwise reproducible and resumable at any step boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .config import dataclass_from_kv, dataclass_to_kv
from .detector import (
    ActionLocalizer,
    AnchorConfig,
    ClipSample,
    TargetSample,
    make_clip_sample,
    make_target_sample,
)
from .encoders import (
    EncoderConfig,
    GradientReversal,
    InstanceDiscriminator,
    SpatialDiscriminator,
    TemporalImageDiscriminator,
)

CLAMP_EPS = 1e-7  # probability clamp inside every domain loss

LOG_COLUMNS = (
    "step",
    "l_rpn",
    "l_cls",
    "l_reg",
    "l_ds",
    "l_dtimg",
    "l_dtinst",
    "lam",
    "l_act",
    "l_adv",
    "total",
)


@dataclass(frozen=True)
class AdaptationConfig:
    """Knobs of the adversarial objective."""

    gamma: float = 2.0
    lam: float = 0.1
    map_reduction: str = "sum"  # reduction over (h, w) in the temporal image loss

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if self.map_reduction not in ("sum", "mean"):
            raise ValueError(f"map_reduction must be 'sum' or 'mean', got {self.map_reduction}")


@dataclass(frozen=True)
class ModuleFlags:
    """Which adaptation modules are active."""

    simg: bool = False
    timg: bool = False
    tinst: bool = False

    @staticmethod
    def all_on() -> "ModuleFlags":
        return ModuleFlags(True, True, True)

    @staticmethod
    def parse(text: str) -> "ModuleFlags":
        """Parse a module list such as ``Timg,Tinst,Simg`` or the
        ``Simg+Timg`` tag form."""
        text = text.strip()
        if not text or text.lower() == "none":
            return ModuleFlags()
        if text.lower() == "all":
            return ModuleFlags.all_on()
        known = {"simg": "simg", "timg": "timg", "tinst": "tinst"}
        kwargs = {}
        for token in text.replace("+", ",").split(","):
            key = token.strip().lower()
            if key not in known:
                raise ValueError(f"unknown adaptation module {token!r}; expected Simg/Timg/Tinst")
            kwargs[known[key]] = True
        return ModuleFlags(**kwargs)

    def tag(self) -> str:
        names = [n for n, on in (("Simg", self.simg), ("Timg", self.timg), ("Tinst", self.tinst)) if on]
        return "+".join(names) if names else "none"

    @property
    def any(self) -> bool:
        return self.simg or self.timg or self.tinst


@dataclass(frozen=True)
class DomainBatch:
    """A mixed minibatch: labeled source samples plus unlabeled target
    samples. Target entries carry no label field at all."""

    source: tuple[ClipSample, ...]
    target: tuple[TargetSample, ...]

    def __post_init__(self):
        if len(self.source) < 1 or len(self.target) < 1:
            raise ValueError("adaptation batch needs >= 1 source and >= 1 target sample")


@dataclass(frozen=True)
class LossBundle:
    """All per-step loss components as plain floats.

    The derived values are computed from the stored fields with plain float
    arithmetic, so a parsed log line reproduces them bit-for-bit.
    """

    l_rpn: float
    l_cls: float
    l_reg: float
    l_ds: float = 0.0
    l_dtimg: float = 0.0
    l_dtinst: float = 0.0
    lam: float = 0.0

    @property
    def l_act(self) -> float:
        return self.l_rpn + self.l_cls + self.l_reg

    @property
    def l_adv(self) -> float:
        return self.l_ds + self.l_dtimg + self.l_dtinst

    @property
    def total(self) -> float:
        return self.l_act + self.lam * self.l_adv

    def check_finite(self, step: int) -> None:
        for name in ("l_rpn", "l_cls", "l_reg", "l_ds", "l_dtimg", "l_dtinst"):
            if not math.isfinite(getattr(self, name)):
                raise RuntimeError(
                    f"non-finite loss component {name}={getattr(self, name)} at step {step}"
                )

    def to_log_line(self, step: int) -> str:
        vals = [str(step)] + [
            repr(float(v))
            for v in (
                self.l_rpn, self.l_cls, self.l_reg, self.l_ds, self.l_dtimg,
                self.l_dtinst, self.lam, self.l_act, self.l_adv, self.total,
            )
        ]
        return " ".join(vals)


def parse_log_line(line: str) -> tuple[int, LossBundle]:
    """Inverse of ``LossBundle.to_log_line``; verifies that the derived
    columns match recomputation from the component columns exactly."""
    parts = line.split()
    if len(parts) != len(LOG_COLUMNS):
        raise ValueError(f"expected {len(LOG_COLUMNS)} columns, got {len(parts)}: {line!r}")
    step = int(parts[0])
    vals = [float(p) for p in parts[1:]]
    bundle = LossBundle(*vals[:7])
    logged_act, logged_adv, logged_total = vals[7], vals[8], vals[9]
    if (bundle.l_act, bundle.l_adv, bundle.total) != (logged_act, logged_adv, logged_total):
        raise ValueError(
            f"log line derived columns do not match components at step {step}: {line!r}"
        )
    return step, bundle


def write_loss_log(path, entries: Sequence[tuple[int, LossBundle]]) -> None:
    lines = ["# " + " ".join(LOG_COLUMNS)]
    lines += [bundle.to_log_line(step) for step, bundle in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_log(path) -> list[tuple[int, LossBundle]]:
    out = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        out.append(parse_log_line(line))
    return out


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)


def focal_domain_loss(p_true: torch.Tensor, gamma: float) -> torch.Tensor:
    """Elementwise focal cross-entropy on the probability assigned to the
    TRUE domain: -(1 - p)^gamma * log(p). gamma=0 is plain BCE."""
    p = _clamp(p_true)
    return -((1.0 - p) ** gamma) * torch.log(p)


def spatial_domain_loss(
    p_source: torch.Tensor, p_target: torch.Tensor, gamma: float
) -> torch.Tensor:
    """Focal domain loss of the spatial discriminator over a mixed batch.

    ``p_source``/``p_target`` are the discriminator's P(target) outputs for
    each domain's samples; the true-domain probability is ``1 - p`` for
    source and ``p`` for target. Batch loss is the mean over source samples
    plus the mean over target samples.
    """
    loss = p_source.new_zeros(()) if p_source.numel() else torch.zeros(())
    if p_source.numel():
        loss = loss + focal_domain_loss(1.0 - p_source, gamma).mean()
    if p_target.numel():
        loss = loss + focal_domain_loss(p_target, gamma).mean()
    return loss


def temporal_image_loss(
    q_source: torch.Tensor, q_target: torch.Tensor, map_reduction: str = "sum"
) -> torch.Tensor:
    """BCE over per-location domain maps Q in (0,1), shape [n, H, W].

    Per sample the map is summed over (h, w) (or averaged with
    ``map_reduction='mean'``), then averaged within each domain; the two
    domain terms add.
    """
    def per_domain(q: torch.Tensor, target_domain: bool) -> torch.Tensor:
        q = _clamp(q)
        pointwise = -torch.log(q) if target_domain else -torch.log(1.0 - q)
        per_sample = pointwise.sum(dim=(1, 2))
        if map_reduction == "mean":
            per_sample = per_sample / (q.shape[1] * q.shape[2])
        return per_sample.mean()

    loss = torch.zeros(())
    if q_source.numel():
        loss = loss + per_domain(q_source, False)
    if q_target.numel():
        loss = loss + per_domain(q_target, True)
    return loss


def temporal_instance_loss(
    r_source: Sequence[torch.Tensor], r_target: Sequence[torch.Tensor]
) -> torch.Tensor:
    """BCE over per-ROI domain outputs R.

    Each sample contributes the SUM of the BCE over its proposals; the
    per-domain loss is the mean of those sums over that domain's samples
    (zero-ROI samples contribute zero), and the two domain terms add.
    """
    def per_domain(rs: Sequence[torch.Tensor], target_domain: bool) -> torch.Tensor:
        if len(rs) == 0:
            return torch.zeros(())
        total = torch.zeros(())
        for r in rs:
            if r.numel() == 0:
                continue
            r = _clamp(r)
            pointwise = -torch.log(r) if target_domain else -torch.log(1.0 - r)
            total = total + pointwise.sum()
        return total / len(rs)

    return per_domain(r_source, False) + per_domain(r_target, True)


class AdaptiveModel(nn.Module):
    """Action localizer plus the three domain discriminators, each behind
    its own gradient reversal layer."""

    def __init__(
        self,
        config: EncoderConfig | None = None,
        anchor_config: AnchorConfig | None = None,
        num_classes: int = 4,
    ):
        super().__init__()
        self.localizer = ActionLocalizer(config, anchor_config, num_classes)
        cfg = self.localizer.config
        self.d_spatial = SpatialDiscriminator(cfg)
        self.d_temporal_image = TemporalImageDiscriminator(cfg)
        self.d_temporal_instance = InstanceDiscriminator(cfg)
        self.grl_spatial = GradientReversal(1.0)
        self.grl_temporal_image = GradientReversal(1.0)
        self.grl_temporal_instance = GradientReversal(1.0)

    @property
    def config(self) -> EncoderConfig:
        return self.localizer.config

    def adversarial_losses(
        self, features: dict, n_source: int, flags: ModuleFlags, adapt: AdaptationConfig
    ) -> dict[str, torch.Tensor]:
        """Adversarial components over a mixed forward's features. Disabled
        modules are skipped entirely (no forward, no gradient) and report
        an exact zero."""
        zero = torch.zeros(())
        out = {"l_ds": zero, "l_dtimg": zero, "l_dtinst": zero}
        if flags.simg:
            p = self.d_spatial(self.grl_spatial(features["sf_maps"]))
            out["l_ds"] = spatial_domain_loss(p[:n_source], p[n_source:], adapt.gamma)
        if flags.timg:
            q = self.d_temporal_image(self.grl_temporal_image(features["tf1_maps"]))
            out["l_dtimg"] = temporal_image_loss(
                q[:n_source], q[n_source:], adapt.map_reduction
            )
        if flags.tinst:
            r_src = [
                self.d_temporal_instance(self.grl_temporal_instance(v))
                for v in features["tf2_source"]
            ]
            r_tgt = [
                self.d_temporal_instance(self.grl_temporal_instance(v))
                for v in features["tf2_target"]
            ]
            out["l_dtinst"] = temporal_instance_loss(r_src, r_tgt)
        return out

    def objective(
        self,
        batch: DomainBatch,
        flags: ModuleFlags,
        adapt: AdaptationConfig,
    ) -> tuple[torch.Tensor, LossBundle]:
        """Full phase-2 objective on a mixed batch: backwardable total and
        the float bundle for logging."""
        features = self.localizer.forward_batch(batch.source, batch.target)
        adv = self.adversarial_losses(features, len(batch.source), flags, adapt)
        l_act_t = features["l_rpn"] + features["l_cls"] + features["l_reg"]
        l_adv_t = adv["l_ds"] + adv["l_dtimg"] + adv["l_dtinst"]
        total_t = l_act_t + adapt.lam * l_adv_t
        bundle = LossBundle(
            l_rpn=float(features["l_rpn"].detach()),
            l_cls=float(features["l_cls"].detach()),
            l_reg=float(features["l_reg"].detach()),
            l_ds=float(adv["l_ds"].detach()),
            l_dtimg=float(adv["l_dtimg"].detach()),
            l_dtinst=float(adv["l_dtinst"].detach()),
            lam=adapt.lam,
        )
        return total_t, bundle

    def detect_frames(self, frames: np.ndarray, video_id: str = ""):
        return self.localizer.detect_frames(frames, video_id)


def build_model(
    config: EncoderConfig | None = None,
    anchor_config: AnchorConfig | None = None,
    num_classes: int = 4,
    seed: int = 0,
) -> AdaptiveModel:
    """Deterministically initialized model (parameters follow ``seed``)."""
    torch.manual_seed(seed)
    return AdaptiveModel(config, anchor_config, num_classes)


def save_model(path, model: AdaptiveModel, extra: dict[str, str] | None = None) -> Path:
    """Checkpoint the model with the configs needed to rebuild it embedded
    in the archive metadata."""
    meta = {"num_classes": str(model.localizer.num_classes)}
    meta.update(dataclass_to_kv(model.config, "encoder"))
    meta.update(dataclass_to_kv(model.localizer.anchor_config, "anchor"))
    if extra:
        overlap = set(extra) & set(meta)
        if overlap:
            raise ValueError(f"extra metadata collides with model keys: {sorted(overlap)}")
        meta.update(extra)
    return save_checkpoint(path, model, meta)


def load_model(path) -> tuple[AdaptiveModel, dict[str, str]]:
    """Rebuild a model from a checkpoint written by ``save_model``."""
    meta, arrays = read_checkpoint(path)
    config = dataclass_from_kv(EncoderConfig, meta, "encoder")
    anchor_config = dataclass_from_kv(AnchorConfig, meta, "anchor")
    model = AdaptiveModel(config, anchor_config, int(meta["num_classes"]))
    load_into(model, arrays)
    return model, meta


@dataclass(frozen=True)
class TrainConfig:
    """Two-phase schedule and minibatch composition."""

    seed: int = 0
    pretrain_steps: int = 300
    adapt_steps: int = 300
    pretrain_lr: float = 3e-3
    adapt_lr: float = 1e-3
    n_s: int = 4
    n_t: int = 4

    def __post_init__(self):
        if self.n_s < 1 or self.n_t < 1:
            raise ValueError("n_s and n_t must be >= 1")
        if self.pretrain_steps < 0 or self.adapt_steps < 0:
            raise ValueError("step counts must be >= 0")


def _sample_indices(seed: int, domain: int, step: int, n_clips: int, count: int, n_frames: int):
    """Per-step seeded draws: (clip indices, keyframe indices). The stream
    is a pure function of (seed, domain, step), so training is resumable
    and the source stream is untouched by anything target-side."""
    rng = np.random.default_rng([seed, domain, step])
    clips = rng.integers(0, n_clips, size=count)
    frames = rng.integers(0, n_frames, size=count)
    return clips, frames


def source_only_steps(
    model: AdaptiveModel,
    source_clips,
    cfg: TrainConfig,
    lr: float,
    num_steps: int,
    start_step: int = 0,
) -> list[tuple[int, LossBundle]]:
    """Labeled-only optimization; the code path shared by phase 1 and by
    phase 2 with every adaptation module disabled."""
    torch.set_num_threads(1)
    window = model.config.clip_length
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    entries = []
    for local in range(num_steps):
        step = start_step + local
        idx, frames = _sample_indices(
            cfg.seed, 0, step, len(source_clips), cfg.n_s, source_clips[0].frames.shape[0]
        )
        batch = [
            make_clip_sample(source_clips[i], int(f), window) for i, f in zip(idx, frames)
        ]
        out = model.localizer.forward_batch(batch)
        total = out["l_rpn"] + out["l_cls"] + out["l_reg"]
        bundle = LossBundle(
            l_rpn=float(out["l_rpn"].detach()),
            l_cls=float(out["l_cls"].detach()),
            l_reg=float(out["l_reg"].detach()),
        )
        bundle.check_finite(step)
        opt.zero_grad()
        total.backward()
        opt.step()
        entries.append((step, bundle))
    return entries


def pretrain(model: AdaptiveModel, source_clips, cfg: TrainConfig) -> list[tuple[int, LossBundle]]:
    """Phase 1: source-only detector training."""
    if not source_clips:
        raise ValueError("pretraining requires a non-empty source dataset")
    return source_only_steps(model, source_clips, cfg, cfg.pretrain_lr, cfg.pretrain_steps)


def adapt(
    model: AdaptiveModel,
    source_clips,
    target_clips,
    cfg: TrainConfig,
    adapt_cfg: AdaptationConfig,
    flags: ModuleFlags,
    start_step: int | None = None,
) -> list[tuple[int, LossBundle]]:
    """Phase 2: mixed-batch training of the full objective.

    With every module flag off this degenerates to continued source-only
    training on the same source stream. Steps are numbered from the end of
    phase 1 by default so the per-step sample streams continue seamlessly.
    """
    if not source_clips:
        raise ValueError("adaptation requires a labeled source dataset")
    if start_step is None:
        start_step = cfg.pretrain_steps
    if not flags.any:
        return source_only_steps(
            model, source_clips, cfg, cfg.adapt_lr, cfg.adapt_steps, start_step=start_step
        )
    if not target_clips:
        raise ValueError("adaptation requires both domains; target dataset is empty")
    torch.set_num_threads(1)
    window = model.config.clip_length
    opt = torch.optim.Adam(model.parameters(), lr=cfg.adapt_lr)
    entries = []
    for local in range(cfg.adapt_steps):
        step = start_step + local
        s_idx, s_frames = _sample_indices(
            cfg.seed, 0, step, len(source_clips), cfg.n_s, source_clips[0].frames.shape[0]
        )
        t_idx, t_frames = _sample_indices(
            cfg.seed, 1, step, len(target_clips), cfg.n_t, target_clips[0].frames.shape[0]
        )
        batch = DomainBatch(
            source=tuple(
                make_clip_sample(source_clips[i], int(f), window)
                for i, f in zip(s_idx, s_frames)
            ),
            target=tuple(
                make_target_sample(target_clips[i], int(f), window)
                for i, f in zip(t_idx, t_frames)
            ),
        )
        total, bundle = model.objective(batch, flags, adapt_cfg)
        bundle.check_finite(step)
        opt.zero_grad()
        total.backward()
        opt.step()
        entries.append((step, bundle))
    return entries
