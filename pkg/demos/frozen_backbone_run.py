"""Cross-validate a frozen-backbone classifier on a phantom, then print the table.

Needs pretrained weights for the 18-layer backbone.  Without network access,
create offline stand-ins first:

    octlesion fetch-weights --surrogate --backbone resnet18-class
    export OCTLESION_CHECKPOINT_DIR=~/.cache/octlesion/checkpoints/surrogate
    python3 demos/frozen_backbone_run.py [work_dir]

Takes about a minute on one CPU core.
"""

import sys
from pathlib import Path

from octlesion.config import config_from_dict
from octlesion.evaluator import HUMAN_RATER, render_report
from octlesion.phantom import PhantomParams, generate_dataset
from octlesion.runner import run

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run").resolve()
generate_dataset(PhantomParams(bm_brightness=0.9, speckle_scale=0.1, images_per_lesion=2, seed=1), 40, 5, work / "data")

cfg = config_from_dict({
    "manifest_path": str(work / "data" / "manifest.csv"),
    "backbone": "resnet18-class",
    "regime": "RC",
    "train": {"epochs": 20, "learning_rate": 1e-2},
    # geometric-only augmentation lets the frozen features be computed once
    "augment": {"brightness_delta": 0.0, "contrast_delta": 0.0, "saturation_delta": 0.0},
    "split": {"n_val_common": 9},
    "output_dir": str(work / "run"),
})
report = run(cfg)

for k, m in enumerate(report.per_fold):
    print(f"fold {k}: accuracy {m.accuracy:6.2f}  sensitivity {m.sensitivity:6.2f}  specificity {m.specificity:6.2f}")
print()
print(render_report([report], [HUMAN_RATER]), end="")
print(f"artifacts in {cfg.output}; rerunning the script skips finished folds")
