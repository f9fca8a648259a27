"""Synthetic two-domain moving-shapes video benchmark.

Action classes are motion patterns (shared by both domains); appearance
(background, palette, noise, blur, contrast) carries the domain shift.
Motion defines the label so temporal features are genuinely required for
classification while appearance carries the gap.

Dataset layout on disk:

    <root>/
      manifest.cfg        flat key-value: domain fields, sizes, class map
      annotations.csv     one record per GT box:
                          video_id,frame_index,class_id,instance_id,x1,y1,x2,y2
      clips/
        <video_id>.avc    chunked binary frame container (see below)

Container format (.avc): magic ``AVC1``, five little-endian uint32 fields
(version, frame count, height, width, channels), a uint16-length-prefixed
ascii dtype string, then the frames as contiguous chunks in frame order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import read_kv, write_kv

MOTION_PATTERNS = ("linear", "circular", "zigzag", "jitter")  # index = class_id
NUM_CLASSES = len(MOTION_PATTERNS)
SHAPES = ("square", "disc", "triangle")
BACKGROUND_STYLES = ("flat", "noise", "gradient")
JITTER_AMPLITUDE = 1  # max |offset| per axis per frame for the jitter class

_MAGIC = b"AVC1"
_CONTAINER_VERSION = 1

DEFAULT_SOURCE_PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#ffe119")
DEFAULT_TARGET_PALETTE = ("#911eb4", "#f58231", "#46f0f0", "#bcf60c")


def parse_hex_color(s: str) -> tuple[float, float, float]:
    s = s.strip()
    if not (len(s) == 7 and s[0] == "#"):
        raise ValueError(f"expected #rrggbb color, got {s!r}")
    try:
        r, g, b = (int(s[i : i + 2], 16) for i in (1, 3, 5))
    except ValueError as exc:
        raise ValueError(f"expected #rrggbb color, got {s!r}") from exc
    return (r / 255.0, g / 255.0, b / 255.0)


@dataclass(frozen=True)
class DomainSpec:
    """Appearance recipe for one domain. Equal fields + equal seed give a
    byte-identical corpus; every differing appearance field adds pixel
    divergence between paired clips while leaving motion untouched."""

    name: str = "source"
    background_style: str = "flat"
    actor_palette: tuple[str, ...] = DEFAULT_SOURCE_PALETTE
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    contrast_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.background_style not in BACKGROUND_STYLES:
            raise ValueError(
                f"background_style must be one of {BACKGROUND_STYLES}, got {self.background_style!r}"
            )
        if len(self.actor_palette) < NUM_CLASSES:
            raise ValueError(f"palette needs >= {NUM_CLASSES} colors")
        for c in self.actor_palette:
            parse_hex_color(c)
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be >= 0")
        if self.contrast_scale <= 0:
            raise ValueError("contrast_scale must be > 0")


@dataclass(frozen=True)
class SyntheticAction:
    """One actor: its class (= motion pattern), shape and trajectory."""

    class_id: int
    motion: str
    shape: str
    half_extent: int
    centers: tuple[tuple[int, int], ...]  # per-frame integer (cx, cy)

    def __post_init__(self):
        if MOTION_PATTERNS[self.class_id] != self.motion:
            raise ValueError(
                f"class {self.class_id} must use motion {MOTION_PATTERNS[self.class_id]!r}"
            )


@dataclass(frozen=True)
class LabeledClip:
    video_id: str
    frames: np.ndarray  # uint8 [T, H, W, 3]
    annotations: tuple = ()

    @property
    def keyframe_index(self) -> int:
        return self.frames.shape[0] // 2


@dataclass(frozen=True)
class UnlabeledClip:
    """Target-domain sample: carries no label field by construction."""

    video_id: str
    frames: np.ndarray

    @property
    def keyframe_index(self) -> int:
        return self.frames.shape[0] // 2


def write_clip_container(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"frames must be [T, H, W, C], got shape {frames.shape}")
    t, h, w, c = frames.shape
    dtype_name = frames.dtype.name.encode("ascii")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<5I", _CONTAINER_VERSION, t, h, w, c))
        f.write(struct.pack("<H", len(dtype_name)))
        f.write(dtype_name)
        for i in range(t):
            f.write(frames[i].tobytes())


def read_clip_container(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a clip container (bad magic {magic!r})")
        version, t, h, w, c = struct.unpack("<5I", f.read(20))
        if version != _CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (nlen,) = struct.unpack("<H", f.read(2))
        dtype = np.dtype(f.read(nlen).decode("ascii"))
        n = t * h * w * c
        data = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype, count=n)
    return data.reshape(t, h, w, c).copy()


def _shape_mask(shape: str, cx: int, cy: int, h: int, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    if shape == "square":
        return (np.abs(xx - cx) <= h) & (np.abs(yy - cy) <= h)
    if shape == "disc":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= h * h
    if shape == "triangle":
        # apex up: row halfwidth grows linearly from 0 at cy-h to h at cy+h
        frac = (yy - (cy - h)) / (2.0 * h)
        inside_rows = (frac >= 0.0) & (frac <= 1.0)
        return inside_rows & (np.abs(xx - cx) <= frac * h)
    raise ValueError(f"unknown shape {shape!r}")


def _mask_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    r = np.flatnonzero(rows)
    c = np.flatnonzero(cols)
    return (float(c[0]), float(r[0]), float(c[-1] + 1), float(r[-1] + 1))


def _trajectory(motion: str, half: int, t_len: int, height: int, width: int, rng) -> np.ndarray:
    """Per-frame integer centers, guaranteed to keep the shape in frame."""
    m = half + 1 + (JITTER_AMPLITUDE if motion == "jitter" else 0)

    def sample_start(lo_x, hi_x, lo_y, hi_y):
        if lo_x > hi_x or lo_y > hi_y:
            raise ValueError(
                f"image {width}x{height} too small for a {motion!r} trajectory "
                f"of half-extent {half}"
            )
        return rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)

    ts = np.arange(t_len)
    if motion == "linear":
        speed = rng.uniform(1.2, 2.5)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        dx, dy = speed * np.cos(theta), speed * np.sin(theta)
        tx, ty = dx * (t_len - 1), dy * (t_len - 1)
        sx, sy = sample_start(
            m + max(0.0, -tx), width - 1 - m - max(0.0, tx),
            m + max(0.0, -ty), height - 1 - m - max(0.0, ty),
        )
        pts = np.stack([sx + dx * ts, sy + dy * ts], axis=1)
    elif motion == "circular":
        radius = rng.uniform(5.0, 9.0)
        omega = rng.uniform(0.5, 0.9) * (1 if rng.uniform() < 0.5 else -1)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        cx, cy = sample_start(
            m + radius, width - 1 - m - radius, m + radius, height - 1 - m - radius
        )
        ang = phase + omega * ts
        pts = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    elif motion == "zigzag":
        speed = rng.uniform(1.5, 2.5)
        amp = rng.uniform(3.0, 6.0)
        horizontal = rng.uniform() < 0.5
        sign = 1 if rng.uniform() < 0.5 else -1
        tx = sign * speed * (t_len - 1)
        # triangular wave with period 4: 0, +a, 0, -a, ...
        wave = amp * np.array([0.0, 1.0, 0.0, -1.0])[ts % 4]
        if horizontal:
            sx, sy = sample_start(
                m + max(0.0, -tx), width - 1 - m - max(0.0, tx),
                m + amp, height - 1 - m - amp,
            )
            pts = np.stack([sx + sign * speed * ts, sy + wave], axis=1)
        else:
            sx, sy = sample_start(
                m + amp, width - 1 - m - amp,
                m + max(0.0, -tx), height - 1 - m - max(0.0, tx),
            )
            pts = np.stack([sx + wave, sy + sign * speed * ts], axis=1)
    elif motion == "jitter":
        sx, sy = sample_start(m, width - 1 - m, m, height - 1 - m)
        offsets = rng.integers(-JITTER_AMPLITUDE, JITTER_AMPLITUDE + 1, size=(t_len, 2))
        pts = np.array([sx, sy])[None, :] + offsets
    else:
        raise ValueError(f"unknown motion {motion!r}")
    centers = np.rint(pts).astype(np.int64)
    if (
        centers[:, 0].min() < half
        or centers[:, 0].max() > width - 1 - half
        or centers[:, 1].min() < half
        or centers[:, 1].max() > height - 1 - half
    ):
        raise ValueError(
            f"image {width}x{height} too small for a {motion!r} trajectory of half-extent {half}"
        )
    return centers


def _render_background(spec: DomainSpec, height: int, width: int, rng) -> np.ndarray:
    """Static per-clip background, float [H, W, 3] in [0, 1]."""
    if spec.background_style == "flat":
        level = rng.uniform(0.25, 0.55)
        return np.full((height, width, 3), level, dtype=np.float64)
    if spec.background_style == "noise":
        # coarse static texture: low-res uniform noise upsampled 4x
        ch = -(-height // 4)
        cw = -(-width // 4)
        coarse = rng.uniform(0.15, 0.65, size=(ch, cw, 3))
        up = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)
        return up[:height, :width]
    # gradient: linear ramp between two random colors at a random angle
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width]
    proj = (xx * np.cos(theta) + yy * np.sin(theta)).astype(np.float64)
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
    return c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]


def _render_clip(
    spec: DomainSpec,
    actions: list[SyntheticAction],
    t_len: int,
    height: int,
    width: int,
    bg_rng,
    noise_rng,
):
    """Render frames and exact per-frame boxes for one clip.

    Returns (frames uint8 [T, H, W, 3], list over actions of per-frame boxes).
    Boxes are the tight bounds of the pre-blur shape mask, so they stay exact
    under every appearance setting.
    """
    background = _render_background(spec, height, width, bg_rng)
    palette = [np.array(parse_hex_color(c)) for c in spec.actor_palette]
    frames = np.empty((t_len, height, width, 3), dtype=np.uint8)
    boxes = [[] for _ in actions]
    blur_size = int(round(spec.blur_radius)) * 2 + 1
    for t in range(t_len):
        img = background.copy()
        for a_idx, act in enumerate(actions):
            cx, cy = act.centers[t]
            mask = _shape_mask(act.shape, int(cx), int(cy), act.half_extent, height, width)
            img[mask] = palette[act.class_id]
            boxes[a_idx].append(_mask_box(mask))
        img = 0.5 + spec.contrast_scale * (img - 0.5)
        if blur_size > 1:
            img = ndimage.uniform_filter(img, size=(blur_size, blur_size, 1), mode="nearest")
        noise = noise_rng.standard_normal(size=img.shape)
        img = img + spec.noise_sigma * noise
        frames[t] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return frames, boxes


def generate(
    spec: DomainSpec,
    out_dir,
    num_clips: int,
    clip_length: int = 8,
    image_size: tuple[int, int] = (64, 64),
    background_clips: int = 0,
    multi_instance: bool = False,
) -> Path:
    """Write a dataset to ``out_dir`` and return its path.

    Classes are assigned round-robin over clips so every class count is
    within one of ``num_clips / NUM_CLASSES``. Each clip has one actor
    (two with ``multi_instance``); ``background_clips`` extra actor-free
    clips are appended when requested. Per-clip RNG streams are derived
    from (seed, clip index), with motion content and appearance noise on
    separate streams so that two specs differing only in appearance fields
    produce identical trajectories.
    """
    height, width = image_size
    if num_clips < 1:
        raise ValueError("num_clips must be >= 1")
    if clip_length < 2:
        raise ValueError("clip_length must be >= 2")
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)

    records = []
    clip_ids = []
    total = num_clips + background_clips
    for idx in range(total):
        video_id = f"{spec.name}_{idx:05d}"
        clip_ids.append(video_id)
        content_rng = np.random.default_rng([spec.seed, idx, 0])
        bg_rng = np.random.default_rng([spec.seed, idx, 1])
        noise_rng = np.random.default_rng([spec.seed, idx, 2])

        actions = []
        if idx < num_clips:
            n_actors = 2 if multi_instance else 1
            for a in range(n_actors):
                class_id = idx % NUM_CLASSES if a == 0 else int(content_rng.integers(NUM_CLASSES))
                shape = SHAPES[content_rng.integers(len(SHAPES))]
                half = int(content_rng.integers(5, 8))
                centers = _trajectory(
                    MOTION_PATTERNS[class_id], half, clip_length, height, width, content_rng
                )
                actions.append(
                    SyntheticAction(
                        class_id=class_id,
                        motion=MOTION_PATTERNS[class_id],
                        shape=shape,
                        half_extent=half,
                        centers=tuple((int(x), int(y)) for x, y in centers),
                    )
                )

        frames, boxes = _render_clip(spec, actions, clip_length, height, width, bg_rng, noise_rng)
        write_clip_container(clips_dir / f"{video_id}.avc", frames)
        for a_idx in range(len(actions)):
            for t in range(clip_length):
                x1, y1, x2, y2 = boxes[a_idx][t]
                records.append(
                    f"{video_id},{t},{actions[a_idx].class_id},{a_idx},"
                    f"{x1!r},{y1!r},{x2!r},{y2!r}"
                )

    (out_dir / "annotations.csv").write_text("\n".join(records) + ("\n" if records else ""))
    manifest = {
        "format_version": "1",
        "domain.name": spec.name,
        "domain.background_style": spec.background_style,
        "domain.actor_palette": ",".join(spec.actor_palette),
        "domain.noise_sigma": repr(spec.noise_sigma),
        "domain.blur_radius": repr(spec.blur_radius),
        "domain.contrast_scale": repr(spec.contrast_scale),
        "domain.seed": str(spec.seed),
        "num_clips": str(num_clips),
        "background_clips": str(background_clips),
        "clip_length": str(clip_length),
        "image_height": str(height),
        "image_width": str(width),
        "num_classes": str(NUM_CLASSES),
        "class_map": ",".join(f"{i}:{m}" for i, m in enumerate(MOTION_PATTERNS)),
        "clips": ",".join(clip_ids),
    }
    write_kv(out_dir / "manifest.cfg", manifest)
    return out_dir


def spec_from_manifest(path) -> DomainSpec:
    kv = read_kv(Path(path) / "manifest.cfg")
    return DomainSpec(
        name=kv["domain.name"],
        background_style=kv["domain.background_style"],
        actor_palette=tuple(kv["domain.actor_palette"].split(",")),
        noise_sigma=float(kv["domain.noise_sigma"]),
        blur_radius=float(kv["domain.blur_radius"]),
        contrast_scale=float(kv["domain.contrast_scale"]),
        seed=int(kv["domain.seed"]),
    )


def parse_annotations(path) -> dict[str, list]:
    """Read a GT annotation file into {video_id: [GroundTruthInstance, ...]}.

    Raises ValueError naming the 1-based line number on any malformed record.
    """
    from .core import BoundingBox, GroundTruthInstance

    per_video: dict[str, list] = {}
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
                video_id = parts[0]
                frame_index = int(parts[1])
                class_id = int(parts[2])
                instance_id = int(parts[3])
                x1, y1, x2, y2 = (float(v) for v in parts[4:8])
                gt = GroundTruthInstance(
                    frame_index=frame_index,
                    box=BoundingBox(x1, y1, x2, y2),
                    class_id=class_id,
                    instance_id=instance_id,
                    video_id=video_id,
                )
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            per_video.setdefault(video_id, []).append(gt)
    return per_video


def load_dataset(root, mode: str = "source"):
    """Load clips from ``root``.

    ``mode="source"`` returns LabeledClip with ground truth attached;
    ``mode="target"`` returns UnlabeledClip and never opens the annotation
    file, so target labels are structurally unreadable downstream.
    An empty or missing clips directory yields an empty list.
    """
    if mode not in ("source", "target"):
        raise ValueError(f"mode must be 'source' or 'target', got {mode!r}")
    root = Path(root)
    clips_dir = root / "clips"
    if not clips_dir.is_dir():
        return []
    paths = sorted(clips_dir.glob("*.avc"))
    if not paths:
        return []
    if mode == "target":
        return [UnlabeledClip(p.stem, read_clip_container(p)) for p in paths]
    ann_path = root / "annotations.csv"
    per_video = parse_annotations(ann_path) if ann_path.exists() else {}
    return [
        LabeledClip(p.stem, read_clip_container(p), tuple(per_video.get(p.stem, ())))
        for p in paths
    ]


def paired_target_spec(
    source: DomainSpec,
    name: str = "target",
    background_style: str = "noise",
    actor_palette: tuple[str, ...] = DEFAULT_TARGET_PALETTE,
    noise_sigma: float = 0.08,
    blur_radius: float = 0.0,
    contrast_scale: float = 1.0,
) -> DomainSpec:
    """Appearance-shifted twin of ``source`` with the same seed, so clips
    pair up one-to-one with identical motion content."""
    return replace(
        source,
        name=name,
        background_style=background_style,
        actor_palette=actor_palette,
        noise_sigma=noise_sigma,
        blur_radius=blur_radius,
        contrast_scale=contrast_scale,
    )
