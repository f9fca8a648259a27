"""Measure the raw domain gap of a checkpoint: frame-mAP and video-mAP
on every labeled split of a generated benchmark.

Useful before and after adaptation; a source-only checkpoint typically
scores several times higher on source_test than on target_test, and the
gap is what the adversarial modules close.

    python3 scripts/inspect_domain_gap.py --checkpoint runs/pre/pretrain.npz --data runs/data
"""

import argparse
import sys
import warnings
from pathlib import Path

import torch

from adaptloc.adaptation import load_model
from adaptloc.cli import SPLITS
from adaptloc.evaluation import evaluate_detections
from adaptloc.synthdata import NUM_CLASSES, load_dataset


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True, help="root written by generate")
    args = parser.parse_args(argv)

    torch.set_num_threads(1)
    model, meta = load_model(args.checkpoint)
    phase = meta.get("phase", "?")
    modules = meta.get("modules", "none")
    print(f"checkpoint: phase={phase} modules={modules} seed={meta.get('seed', '?')}\n")

    print(f"{'split':14s} {'frame-mAP':>10s} {'video-mAP':>10s} {'dets':>6s}")
    for split in SPLITS:
        root = Path(args.data) / split
        clips = load_dataset(root, mode="source")
        dets, gts = [], []
        for clip in clips:
            dets.extend(model.detect_frames(clip.frames, video_id=clip.video_id))
            gts.extend(clip.annotations)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            metrics = evaluate_detections(dets, gts, NUM_CLASSES)
        print(
            f"{split:14s} {metrics.get('frame_map', 0.0):10.4f} "
            f"{metrics.get('video_map', 0.0):10.4f} {int(metrics['num_detections']):6d}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
