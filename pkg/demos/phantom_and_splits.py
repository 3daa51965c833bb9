"""Generate a small phantom, look at one image per class and build the fold plan.

    python3 demos/phantom_and_splits.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from octlesion.dataset import LesionLabel, read_image
from octlesion.phantom import PhantomParams, generate_dataset
from octlesion.splits import make_splits, verify_plan

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_phantom")
params = PhantomParams(bm_brightness=0.9, speckle_scale=0.1, images_per_lesion=2, seed=0)
manifest = generate_dataset(params, n_benign=30, n_invasive=4, out_dir=out)
print(f"{len(manifest.lesions)} lesions, {manifest.n_images()} images under {out}")

# A thin bright line shows up as a pixel well above the rows around it.
def line_contrast(pixels: np.ndarray) -> float:
    img = pixels.astype(float)
    rows = range(20, 120)
    best = [max(img[r, c] - np.r_[img[r - 5 : r, c], img[r + 1 : r + 6, c]].mean() for r in rows) for c in range(img.shape[1])]
    return float(np.median(best))


for label in LesionLabel:
    lesion = manifest.by_id()[manifest.ids_with_label(label)[0]]
    pixels = read_image(manifest.image_path(lesion.images[0]))
    print(f"{label.value:9s} lesion {lesion.lesion_id}: median bright-line contrast {line_contrast(pixels):.0f} grey levels")

# One fold per invasive lesion except one that always stays in training.
plan = make_splits(manifest, n_val_common=9, seed=0)
print(f"{len(plan)} folds, reserved invasive lesion(s): {', '.join(plan.reserved_rare)}")
for fold in plan.folds:
    print(f"  fold {fold.fold_index}: validate {fold.val_rare} + {len(fold.val_common)} benign, train on {len(fold.train)}")
print("plan violations:", verify_plan(plan, manifest) or "none")
