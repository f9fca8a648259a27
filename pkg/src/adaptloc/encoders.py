"""Feature extractors, gradient reversal, and domain discriminator heads.

Three encoders feed the localization model:

* ``SpatialEncoder`` (SF): 2D conv stack over the keyframe, one feature
  grid cell per ``spatial_stride`` input pixels.
* ``ClipEncoder`` (TF1): 3D conv stack over the clip with the SAME spatial
  stride, temporally flattened by a mean over the residual time axis, so
  proposals computed on SF features can be reused on TF1 features.
* ``InstanceEncoder`` (TF2): small conv block + global average pool turning
  each ROI-pooled patch into one fixed-width vector.

All normalization is GroupNorm (batch-size independent, deterministic) and
all padding is replicate, which keeps constant inputs constant through the
stacks. The three discriminators output probabilities strictly inside
(0, 1); adversarial opposition comes from ``GradientReversal`` placed in
front of each one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

PROB_EPS = 1e-6  # discriminator outputs clamped to [PROB_EPS, 1 - PROB_EPS]


@dataclass(frozen=True)
class EncoderConfig:
    """Shape/stride contract for the whole feature stack.

    Defaults are desk scale; reference scale (stride 16, 7x7x832 pooled
    ROIs, 1024-wide instance vectors) is expressible by construction.
    """

    spatial_stride: int = 8
    temporal_stride: int = 4
    clip_length: int = 8
    in_channels: int = 3
    sf_channels: int = 32
    tf1_channels: int = 32
    tf2_channels: int = 64
    roi_size: int = 5

    def __post_init__(self):
        for name in ("sf_channels", "tf1_channels", "tf2_channels", "in_channels", "roi_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("spatial_stride", "temporal_stride"):
            v = getattr(self, name)
            if v < 1 or (v & (v - 1)) != 0:
                raise ValueError(f"{name} must be a positive power of two, got {v}")
        if self.clip_length % self.temporal_stride != 0:
            raise ValueError(
                f"clip_length {self.clip_length} not divisible by "
                f"temporal_stride {self.temporal_stride}"
            )

    def feature_grid(self, height: int, width: int) -> tuple[int, int]:
        """Spatial grid shared by SF and TF1 maps for an input resolution."""
        s = self.spatial_stride
        return (-(-height // s), -(-width // s))

    @property
    def pooled_shape(self) -> tuple[int, int, int]:
        """Per-ROI tensor shape after ROI pooling on TF1 features."""
        return (self.tf1_channels, self.roi_size, self.roi_size)

    @property
    def instance_width(self) -> int:
        """Width of one TF2 instance vector."""
        return self.tf2_channels


@dataclass(frozen=True)
class GrlConfig:
    """Scale of the reversed gradient (the adversarial weight)."""

    lam: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")


@dataclass
class FeatureMaps:
    """Bundle of SF/TF1/TF2 outputs for one batch; checks the shared-grid
    contract at construction."""

    sf_map: torch.Tensor  # [B, C_sf, H', W']
    tf1_map: torch.Tensor  # [B, C_t1, H', W']
    tf2_vectors: torch.Tensor  # [num_rois_total, C_t2]

    def __post_init__(self):
        if self.sf_map.shape[-2:] != self.tf1_map.shape[-2:]:
            raise ValueError(
                f"sf_map grid {tuple(self.sf_map.shape[-2:])} != "
                f"tf1_map grid {tuple(self.tf1_map.shape[-2:])}"
            )
        if self.tf2_vectors.ndim != 2:
            raise ValueError("tf2_vectors must be [num_rois, C]")


def _group_norm(channels: int) -> nn.GroupNorm:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return nn.GroupNorm(g, channels)
    raise AssertionError


def _pad_to_multiple_2d(x: torch.Tensor, stride: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph or pw:
        x = nn.functional.pad(x, (0, pw, 0, ph), mode="replicate")
    return x


class SpatialEncoder(nn.Module):
    """SF: keyframe image -> feature map at 1/spatial_stride resolution."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        stages = []
        c_in = config.in_channels
        for _ in range(int(math.log2(config.spatial_stride))):
            stages += [
                nn.Conv2d(c_in, config.sf_channels, 3, stride=2, padding=1,
                          padding_mode="replicate"),
                _group_norm(config.sf_channels),
                nn.ReLU(inplace=True),
            ]
            c_in = config.sf_channels
        self.stages = nn.Sequential(*stages)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected [B, {self.config.in_channels}, H, W] image, got {tuple(image.shape)}"
            )
        return self.stages(_pad_to_multiple_2d(image, self.config.spatial_stride))


class ClipEncoder(nn.Module):
    """TF1: clip -> temporally flattened feature map on SF's spatial grid."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        n_sp = int(math.log2(config.spatial_stride))
        n_t = int(math.log2(config.temporal_stride))
        stages = []
        c_in = config.in_channels
        for i in range(max(n_sp, n_t, 1)):
            st = 2 if i < n_t else 1
            ss = 2 if i < n_sp else 1
            stages += [
                nn.Conv3d(c_in, config.tf1_channels, 3, stride=(st, ss, ss), padding=1,
                          padding_mode="replicate"),
                _group_norm(config.tf1_channels),
                nn.ReLU(inplace=True),
            ]
            c_in = config.tf1_channels
        self.stages = nn.Sequential(*stages)

    def per_timestep(self, clip: torch.Tensor) -> torch.Tensor:
        """Features before temporal flattening: [B, C, T', H', W']."""
        if clip.ndim != 5 or clip.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected [B, {self.config.in_channels}, T, H, W] clip, got {tuple(clip.shape)}"
            )
        if clip.shape[2] != self.config.clip_length:
            raise ValueError(
                f"clip length {clip.shape[2]} does not match config T={self.config.clip_length}"
            )
        b, c, t, h, w = clip.shape
        flat = _pad_to_multiple_2d(clip.reshape(b, c * t, h, w), self.config.spatial_stride)
        clip = flat.reshape(b, c, t, *flat.shape[-2:])
        return self.stages(clip)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        return self.per_timestep(clip).mean(dim=2)


def roi_align(
    feature_map: torch.Tensor,
    boxes: torch.Tensor,
    stride: int,
    out_size: int,
    image_size: tuple[int, int],
) -> torch.Tensor:
    """Bilinear ROI pooling of image-coordinate ``boxes`` on one feature map.

    ``feature_map`` is [C, Hf, Wf]; boxes [N, 4] in image pixels are clipped
    to ``image_size`` (H, W), divided by ``stride``, and each is sampled at
    ``out_size`` x ``out_size`` bin centers. A box with no area left after
    clipping is an error. N = 0 returns an empty [0, C, s, s] tensor.
    """
    c = feature_map.shape[0]
    if boxes.numel() == 0:
        return feature_map.new_zeros((0, c, out_size, out_size))
    h_img, w_img = image_size
    boxes = boxes.to(feature_map.dtype)
    x1 = boxes[:, 0].clamp(0.0, float(w_img))
    y1 = boxes[:, 1].clamp(0.0, float(h_img))
    x2 = boxes[:, 2].clamp(0.0, float(w_img))
    y2 = boxes[:, 3].clamp(0.0, float(h_img))
    if bool((x2 <= x1).any() or (y2 <= y1).any()):
        raise ValueError("proposal has zero area after clipping to image bounds")
    n = boxes.shape[0]
    hf, wf = feature_map.shape[-2:]
    # bin-center sample points in feature coordinates (pixel centers at ints)
    steps = (torch.arange(out_size, dtype=feature_map.dtype) + 0.5) / out_size
    fx1, fy1 = x1 / stride, y1 / stride
    fw, fh = (x2 - x1) / stride, (y2 - y1) / stride
    xs = fx1[:, None] + steps[None, :] * fw[:, None] - 0.5  # [N, S]
    ys = fy1[:, None] + steps[None, :] * fh[:, None] - 0.5
    gx = (2.0 * (xs + 0.5) / wf) - 1.0
    gy = (2.0 * (ys + 0.5) / hf) - 1.0
    grid = torch.stack(
        [gx[:, None, :].expand(n, out_size, out_size),
         gy[:, :, None].expand(n, out_size, out_size)],
        dim=-1,
    )
    fmap = feature_map[None].expand(n, *feature_map.shape)
    return nn.functional.grid_sample(
        fmap, grid, mode="bilinear", padding_mode="border", align_corners=False
    )


class InstanceEncoder(nn.Module):
    """TF2: ROI-pooled patches -> one fixed-width vector per ROI."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stages = nn.Sequential(
            nn.Conv2d(config.tf1_channels, config.tf2_channels, 3, padding=1,
                      padding_mode="replicate"),
            _group_norm(config.tf2_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(config.tf2_channels, config.tf2_channels, 3, padding=1,
                      padding_mode="replicate"),
            _group_norm(config.tf2_channels),
            nn.ReLU(inplace=True),
        )

    def features_before_pool(self, pooled: torch.Tensor) -> torch.Tensor:
        expected = (self.config.tf1_channels, self.config.roi_size, self.config.roi_size)
        if pooled.ndim != 4 or tuple(pooled.shape[1:]) != expected:
            raise ValueError(f"expected [N, {expected}], got {tuple(pooled.shape)}")
        return self.stages(pooled)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.shape[0] == 0:
            return pooled.new_zeros((0, self.config.tf2_channels))
        return self.features_before_pool(pooled).mean(dim=(2, 3))


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


class GradientReversal(nn.Module):
    """Identity forward; backward multiplies the gradient by -lam."""

    def __init__(self, lam: float | GrlConfig = 1.0):
        super().__init__()
        if isinstance(lam, GrlConfig):
            lam = lam.lam
        GrlConfig(lam)
        self.lam = float(lam)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _ReverseGrad.apply(x, self.lam)

    def extra_repr(self) -> str:
        return f"lam={self.lam}"


def _clamp_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


class SpatialDiscriminator(nn.Module):
    """D_S: one probability per image that its SF features are target-domain."""

    def __init__(self, config: EncoderConfig, width: int = 32):
        super().__init__()
        self.stages = nn.Sequential(
            nn.Conv2d(config.sf_channels, width, 3, stride=2, padding=1,
                      padding_mode="replicate"),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1, padding_mode="replicate"),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(width, 1)

    def forward(self, sf_map: torch.Tensor) -> torch.Tensor:
        z = self.stages(sf_map).mean(dim=(2, 3))
        return _clamp_prob(torch.sigmoid(self.head(z)[:, 0]))


class TemporalImageDiscriminator(nn.Module):
    """D_Timg: per-location domain map Q over the TF1 grid."""

    def __init__(self, config: EncoderConfig, width: int = 32):
        super().__init__()
        self.stages = nn.Sequential(
            nn.Conv2d(config.tf1_channels, width, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, tf1_map: torch.Tensor) -> torch.Tensor:
        return _clamp_prob(torch.sigmoid(self.stages(tf1_map)[:, 0]))


class InstanceDiscriminator(nn.Module):
    """D_Tinst: one probability per ROI vector."""

    def __init__(self, config: EncoderConfig, width: int = 64):
        super().__init__()
        self.stages = nn.Sequential(
            nn.Linear(config.tf2_channels, width),
            nn.ReLU(inplace=True),
            nn.Linear(width, 1),
        )

    def forward(self, tf2_vectors: torch.Tensor) -> torch.Tensor:
        if tf2_vectors.shape[0] == 0:
            return tf2_vectors.new_zeros((0,))
        return _clamp_prob(torch.sigmoid(self.stages(tf2_vectors)[:, 0]))


def image_to_tensor(frame_hw3: "object") -> torch.Tensor:
    """uint8 [H, W, 3] frame -> float32 [3, H, W] in [0, 1]."""
    t = torch.as_tensor(frame_hw3).to(torch.float32) / 255.0
    return t.permute(2, 0, 1).contiguous()


def clip_to_tensor(frames_thw3: "object") -> torch.Tensor:
    """uint8 [T, H, W, 3] frames -> float32 [3, T, H, W] in [0, 1]."""
    t = torch.as_tensor(frames_thw3).to(torch.float32) / 255.0
    return t.permute(3, 0, 1, 2).contiguous()
