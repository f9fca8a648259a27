"""Reproduce the headline adaptation table: median target frame-mAP over
seeds for source-only, each single adaptation module, and all modules.

Shares one source-only pretrain per seed across rows, so the whole grid
costs seeds x (1 pretrain + rows x adapt). With the shipped config this
is about twenty minutes on one CPU thread.

    python3 scripts/run_benchmark.py --out runs/benchmark
"""

import argparse
import copy
import dataclasses
import sys
import time
import warnings
from pathlib import Path

import torch

from adaptloc.adaptation import ModuleFlags, adapt, build_model, pretrain
from adaptloc.cli import config_digest, default_config_text, entrypoint, load_experiment
from adaptloc.config import write_kv
from adaptloc.evaluation import evaluate_detections
from adaptloc.synthdata import NUM_CLASSES, load_dataset

ROWS = ("none", "Simg", "Timg", "Tinst", "all")


def target_frame_map(model, clips, eval_cfg) -> float:
    dets, gts = [], []
    for clip in clips:
        dets.extend(model.detect_frames(clip.frames, video_id=clip.video_id))
        gts.extend(clip.annotations)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        metrics = evaluate_detections(dets, gts, NUM_CLASSES, eval_cfg)
    return metrics.get("frame_map", 0.0)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="experiment config (default: shipped)")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seeds", default="0,1,2")
    args = parser.parse_args(argv)

    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = Path(args.config) if args.config else out / "config.cfg"
    if args.config is None:
        cfg_path.write_text(default_config_text())
    cfg = load_experiment(cfg_path)
    seeds = [int(s) for s in args.seeds.split(",")]

    bench = out / "data"
    if not (bench / "generate_manifest.cfg").exists():
        entrypoint(["generate", "--config", str(cfg_path), "--out", str(bench)])

    src = load_dataset(bench / "source_train", mode="source")
    tgt = load_dataset(bench / "target_train", mode="target")
    held_out = load_dataset(bench / "target_test", mode="source")

    t0 = time.time()
    scores: dict[str, list[float]] = {row: [] for row in ROWS}
    for seed in seeds:
        train_cfg = dataclasses.replace(cfg.train, seed=seed)
        shared = build_model(cfg.encoder, cfg.anchors, NUM_CLASSES, seed=seed)
        pretrain(shared, src, train_cfg)
        state = shared.state_dict()
        for row in ROWS:
            model = build_model(cfg.encoder, cfg.anchors, NUM_CLASSES, seed=seed)
            model.load_state_dict(copy.deepcopy(state))
            adapt(model, src, tgt, train_cfg, cfg.adapt, ModuleFlags.parse(row))
            fm = target_frame_map(model, held_out, cfg.eval)
            scores[row].append(fm)
            print(f"seed={seed} row={row:6s} target frame-mAP={fm:.4f}  [{time.time() - t0:.0f}s]", flush=True)

    summary = {"config_sha256": config_digest(cfg), "seeds": ",".join(str(s) for s in seeds)}
    print(f"\n{'row':8s} " + " ".join(f"seed{s:>2d}" for s in seeds) + "  median")
    for row in ROWS:
        vals = scores[row]
        med = sorted(vals)[len(vals) // 2]
        summary[f"row.{row}.frame_map"] = repr(med)
        print(f"{row:8s} " + " ".join(f"{v:.4f}" for v in vals) + f"  {med:.4f}")
    write_kv(out / "benchmark.cfg", summary)
    print(f"\nwrote {out / 'benchmark.cfg'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
