"""Command-line harness: dataset generation, two-phase training, metric
evaluation, error analysis, and the module on/off ablation grid.

One flat key-value file configures everything (see ``default_config_text``);
every run writes a manifest embedding the fully resolved config plus the
run parameters, so any result can be reproduced bit-exact on the same
machine by rerunning with the same file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from .adaptation import (
    AdaptationConfig,
    ModuleFlags,
    TrainConfig,
    adapt,
    build_model,
    load_model,
    pretrain,
    save_model,
    write_loss_log,
)
from .config import (
    dataclass_from_kv,
    dataclass_to_kv,
    format_kv,
    known_keys,
    read_kv,
    write_kv,
)
from .detector import AnchorConfig
from .encoders import EncoderConfig
from .evaluation import (
    EvalConfig,
    error_analysis,
    evaluate_detections,
    read_detections,
    write_detections,
    write_metrics_report,
)
from .synthdata import NUM_CLASSES, DomainSpec, generate, load_dataset, parse_annotations

SPLITS = ("source_train", "source_test", "target_train", "target_test")

ABLATION_ROWS = (
    "baseline",
    "Simg",
    "Timg",
    "Tinst",
    "Simg+Timg",
    "Simg+Tinst",
    "Timg+Tinst",
    "Simg+Timg+Tinst",
    "oracle",
)


@dataclass(frozen=True)
class DataConfig:
    """Benchmark sizing: clips per split, frames per clip, square frames."""

    num_train_clips: int = 24
    num_test_clips: int = 8
    clip_length: int = 16
    image_size: int = 64

    def __post_init__(self):
        if self.num_train_clips < 1 or self.num_test_clips < 1:
            raise ValueError("clip counts must be >= 1")
        if self.clip_length < 1 or self.image_size < 16:
            raise ValueError("clip_length must be >= 1 and image_size >= 16")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    source: DomainSpec
    target: DomainSpec
    encoder: EncoderConfig
    anchors: AnchorConfig
    train: TrainConfig
    adapt: AdaptationConfig
    eval: EvalConfig


_SECTIONS = (
    ("data", DataConfig),
    ("source", DomainSpec),
    ("target", DomainSpec),
    ("encoder", EncoderConfig),
    ("anchor", AnchorConfig),
    ("train", TrainConfig),
    ("adapt", AdaptationConfig),
    ("eval", EvalConfig),
)

_FIELD_BY_SECTION = {
    "data": "data",
    "source": "source",
    "target": "target",
    "encoder": "encoder",
    "anchor": "anchors",
    "train": "train",
    "adapt": "adapt",
    "eval": "eval",
}


def experiment_from_kv(kv: dict[str, str], origin: str = "<kv>") -> ExperimentConfig:
    """Build the full experiment config; unknown keys (other than run.*
    manifest keys) are rejected so typos cannot silently fall back to
    defaults."""
    allowed: set[str] = set()
    for prefix, cls in _SECTIONS:
        allowed |= known_keys(cls, prefix)
    unknown = [k for k in kv if k not in allowed and not k.startswith("run.")]
    if unknown:
        raise ValueError(f"{origin}: unknown config keys {sorted(unknown)}")
    parts = {
        _FIELD_BY_SECTION[prefix]: dataclass_from_kv(cls, kv, prefix)
        for prefix, cls in _SECTIONS
    }
    return ExperimentConfig(**parts)


def experiment_to_kv(cfg: ExperimentConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for prefix, _ in _SECTIONS:
        out.update(dataclass_to_kv(getattr(cfg, _FIELD_BY_SECTION[prefix]), prefix))
    return out


def load_experiment(path) -> ExperimentConfig:
    return experiment_from_kv(read_kv(path), origin=str(path))


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(format_kv(experiment_to_kv(cfg)).encode()).hexdigest()


def default_config_text() -> str:
    """The shipped default experiment: flat source vs noisy, recolored,
    contrast-compressed target, desk-scale encoders, and the two-phase
    schedule.  The loss weight and step counts here are the tuned recipe
    for this benchmark; the dataclass defaults are the neutral fallbacks."""
    cfg = ExperimentConfig(
        data=DataConfig(num_test_clips=12),
        source=DomainSpec(name="source", seed=7),
        target=DomainSpec(
            name="target",
            background_style="noise",
            actor_palette=("#911eb4", "#f58231", "#46f0f0", "#bcf60c"),
            noise_sigma=0.12,
            contrast_scale=0.7,
            seed=7,
        ),
        encoder=EncoderConfig(),
        anchors=AnchorConfig(),
        train=TrainConfig(adapt_steps=500),
        adapt=AdaptationConfig(lam=0.01),
        eval=EvalConfig(),
    )
    return "# experiment configuration\n" + format_kv(experiment_to_kv(cfg))


def _split_spec(spec: DomainSpec, split: str) -> DomainSpec:
    """Test splits reuse the domain recipe with a shifted seed so train and
    test corpora are disjoint."""
    if split.endswith("_test"):
        return dataclasses.replace(spec, seed=spec.seed + 1)
    return spec


def _write_run_manifest(path, cfg: ExperimentConfig, run: dict[str, str]) -> None:
    manifest = dict(experiment_to_kv(cfg))
    manifest["run.config_sha256"] = config_digest(cfg)
    manifest["run.torch"] = torch.__version__
    for k, v in run.items():
        manifest[f"run.{k}"] = v
    write_kv(path, manifest)


def cmd_generate(args) -> int:
    cfg = load_experiment(args.config)
    out = Path(args.out)
    d = cfg.data
    for split in SPLITS:
        spec = _split_spec(cfg.source if split.startswith("source") else cfg.target, split)
        n = d.num_train_clips if split.endswith("_train") else d.num_test_clips
        generate(
            spec,
            out / split,
            num_clips=n,
            clip_length=d.clip_length,
            image_size=(d.image_size, d.image_size),
        )
        print(f"wrote {out / split} ({n} clips, T={d.clip_length}, {d.image_size}px)")
    _write_run_manifest(out / "generate_manifest.cfg", cfg, {"verb": "generate"})
    return 0


def _train_pretrain(cfg: ExperimentConfig, data_root: Path, out: Path, seed: int):
    model = build_model(cfg.encoder, cfg.anchors, NUM_CLASSES, seed=seed)
    source = load_dataset(data_root / "source_train", mode="source")
    if not source:
        raise ValueError(f"no source clips under {data_root / 'source_train'}")
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    entries = pretrain(model, source, train_cfg)
    ckpt = save_model(
        out / "pretrain.npz",
        model,
        {"phase": "pretrain", "step": str(train_cfg.pretrain_steps), "seed": str(seed)},
    )
    log_path = out / "pretrain_loss.log"
    write_loss_log(log_path, entries)
    return ckpt, log_path


def _train_adapt(
    cfg: ExperimentConfig,
    data_root: Path,
    out: Path,
    seed: int,
    flags: ModuleFlags,
    checkpoint,
):
    model, _ = load_model(checkpoint)
    source = load_dataset(data_root / "source_train", mode="source")
    target = load_dataset(data_root / "target_train", mode="target")
    if not source:
        raise ValueError(f"no source clips under {data_root / 'source_train'}")
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    entries = adapt(model, source, target, train_cfg, cfg.adapt, flags)
    tag = flags.tag()
    ckpt = save_model(
        out / f"adapt_{tag.replace('+', '_')}.npz",
        model,
        {
            "phase": "adapt",
            "step": str(train_cfg.pretrain_steps + train_cfg.adapt_steps),
            "modules": tag,
            "seed": str(seed),
        },
    )
    log_path = out / f"adapt_{tag.replace('+', '_')}_loss.log"
    write_loss_log(log_path, entries)
    return ckpt, log_path


def cmd_train(args) -> int:
    cfg = load_experiment(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_root = Path(args.data)
    seed = cfg.train.seed if args.seed is None else args.seed
    flags = ModuleFlags.parse(args.modules)
    if args.mode == "pretrain":
        ckpt, log_path = _train_pretrain(cfg, data_root, out, seed)
        manifest_path = out / "pretrain_manifest.cfg"
    else:
        if not args.checkpoint:
            raise ValueError("adapt mode requires --checkpoint from a pretrain run")
        ckpt, log_path = _train_adapt(cfg, data_root, out, seed, flags, args.checkpoint)
        manifest_path = out / f"adapt_{flags.tag().replace('+', '_')}_manifest.cfg"
    _write_run_manifest(
        manifest_path,
        cfg,
        {
            "verb": "train",
            "mode": args.mode,
            "modules": flags.tag(),
            "seed": str(seed),
            "data": str(data_root),
        },
    )
    print(f"checkpoint {ckpt}")
    print(f"loss log {log_path}")
    return 0


def _evaluate_checkpoint(checkpoint, data_dir: Path, eval_cfg: EvalConfig, out: Path | None):
    model, _ = load_model(checkpoint)
    torch.set_num_threads(1)
    clips = load_dataset(data_dir, mode="source")
    if not clips:
        raise ValueError(f"no clips under {data_dir}")
    detections, ground_truth = [], []
    for clip in clips:
        detections.extend(model.detect_frames(clip.frames, video_id=clip.video_id))
        ground_truth.extend(clip.annotations)
    metrics = evaluate_detections(
        detections, ground_truth, model.localizer.num_classes, eval_cfg
    )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_detections(out / "detections.csv", detections)
        write_metrics_report(out / "metrics.cfg", metrics)
    return metrics


def cmd_evaluate(args) -> int:
    eval_cfg = load_experiment(args.config).eval if args.config else EvalConfig()
    out = Path(args.out) if args.out else None
    metrics = _evaluate_checkpoint(args.checkpoint, Path(args.data), eval_cfg, out)
    for key in sorted(metrics):
        print(f"{key} = {metrics[key]!r}")
    return 0


def _row_flags(row: str) -> ModuleFlags:
    return ModuleFlags.parse(row) if row not in ("baseline", "oracle") else ModuleFlags()


def run_ablation_row(
    row: str, cfg: ExperimentConfig, data_root: Path, work: Path, seed: int
) -> dict[str, float]:
    """Train and evaluate one grid cell; all rows see the same total step
    budget (pretrain + adapt phases)."""
    work.mkdir(parents=True, exist_ok=True)
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    if row == "oracle":
        # supervised upper bound: identical schedule, but both phases train
        # on the labeled target split
        model = build_model(cfg.encoder, cfg.anchors, NUM_CLASSES, seed=seed)
        target_labeled = load_dataset(data_root / "target_train", mode="source")
        if not target_labeled:
            raise ValueError(f"no target clips under {data_root / 'target_train'}")
        entries = pretrain(model, target_labeled, train_cfg)
        entries += adapt(model, target_labeled, [], train_cfg, cfg.adapt, ModuleFlags())
        ckpt = save_model(work / "oracle.npz", model, {"phase": "oracle", "seed": str(seed)})
        write_loss_log(work / "oracle_loss.log", entries)
    else:
        pretrain_ckpt = work / "pretrain.npz"
        if not pretrain_ckpt.exists():
            _train_pretrain(cfg, data_root, work, seed)
        flags = _row_flags(row)
        ckpt, _ = _train_adapt(cfg, data_root, work, seed, flags, pretrain_ckpt)
        if row == "baseline":
            baseline_ckpt = work / "baseline.npz"
            Path(ckpt).replace(baseline_ckpt)
            ckpt = baseline_ckpt
    return _evaluate_checkpoint(ckpt, data_root / "target_test", cfg.eval, None)


def cmd_ablate(args) -> int:
    cfg = load_experiment(args.config)
    data_root = Path(args.data)
    out = Path(args.out)
    rows_dir = out / "rows"
    rows_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed if args.seed is None else args.seed

    results: dict[str, dict[str, float]] = {}
    for row in ABLATION_ROWS:
        row_path = rows_dir / f"{row.replace('+', '_')}.cfg"
        if row_path.exists():
            results[row] = {k: float(v) for k, v in read_kv(row_path).items()}
            print(f"[ablate] {row}: cached")
            continue
        print(f"[ablate] {row}: training + evaluating")
        metrics = run_ablation_row(row, cfg, data_root, out / "work", seed)
        write_kv(row_path, {k: repr(v) for k, v in metrics.items()})
        results[row] = metrics

    summary: dict[str, str] = {"run.config_sha256": config_digest(cfg), "run.seed": str(seed)}
    header = f"{'row':<18} {'Simg':<5} {'Timg':<5} {'Tinst':<6} {'frame_map':<10} video_map"
    print(header)
    for row in ABLATION_ROWS:
        flags = _row_flags(row)
        m = results[row]
        fm = m.get("frame_map", float("nan"))
        vm = m.get("video_map", float("nan"))
        marks = ["x" if v else "." for v in (flags.simg, flags.timg, flags.tinst)]
        print(f"{row:<18} {marks[0]:<5} {marks[1]:<5} {marks[2]:<6} {fm:<10.4f} {vm:.4f}")
        summary[f"row.{row}.frame_map"] = repr(fm)
        summary[f"row.{row}.video_map"] = repr(vm)
    write_kv(out / "ablation.cfg", summary)
    print(f"summary {out / 'ablation.cfg'}")
    return 0


def cmd_analyze_errors(args) -> int:
    detections = read_detections(args.detections)
    per_video = parse_annotations(args.annotations)
    ground_truth = [g for vid in sorted(per_video) for g in per_video[vid]]
    breakdown = error_analysis(detections, ground_truth, args.top_k)
    lines = {
        "correct": breakdown.correct,
        "mislocalized": breakdown.mislocalized,
        "background": breakdown.background,
        "incorrect": breakdown.incorrect,
    }
    for name, value in lines.items():
        print(f"{name} = {value:.4f}")
    print(f"analyzed = {breakdown.analyzed}")
    if args.out:
        write_kv(
            args.out,
            {f"error.{k}": repr(v) for k, v in lines.items()}
            | {"error.analyzed": str(breakdown.analyzed)},
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptloc",
        description="adversarial domain adaptation for action localization",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="build the four benchmark splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="pretrain (source-only) or adapt (mixed batches)")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", required=True, choices=("pretrain", "adapt"))
    p.add_argument("--data", required=True, help="root written by generate")
    p.add_argument("--out", required=True)
    p.add_argument("--modules", default="none", help="e.g. Timg,Tinst,Simg or all/none")
    p.add_argument("--checkpoint", default=None, help="pretrain checkpoint (adapt mode)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="detect on a labeled split and write metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="one dataset split directory")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="module on/off grid + baseline + oracle")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-errors", help="four-way error decomposition of a dump")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--top-k", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze_errors)
    return parser


def entrypoint(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(entrypoint())
