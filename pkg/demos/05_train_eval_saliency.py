"""End-to-end miniature: generate data, train briefly in both supervision
modes, evaluate, and dump saliency + forgery maps.

This is a scaled-down run (a few hundred samples, a few epochs) meant to
finish in about a minute; see README for the full-scale commands.

Run:  python3 demos/05_train_eval_saliency.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from forgenet.data import DatasetSpec, build_dataset
from forgenet.formats import prob_map_to_pgm, write_pgm
from forgenet.metrics import emit_report, grad_cam
from forgenet.train import RunConfig, evaluate, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/train_eval")
out.mkdir(parents=True, exist_ok=True)

train_set = build_dataset(
    DatasetSpec(n_real=150, n_fake_per_family={"feather": 150}, seed=1)
)
val_set = build_dataset(
    DatasetSpec(n_real=50, n_fake_per_family={"feather": 50}, seed=2)
)
print(f"train {len(train_set)} samples / val {len(val_set)} samples")

for mode in ("mask", "sspsl"):
    cfg = RunConfig(mode=mode, epochs=6, seed=0)
    result = train(cfg, samples=train_set)
    report, maps = evaluate(result.model, val_set, loss_history=result.loss_history)
    print(
        f"{mode:5s}: loss {result.loss_history[0]:.1f} -> {result.loss_history[-1]:.2f}  "
        f"frame AUC {report.frame_auc:.3f}  patch acc {report.patch_acc:.3f}"
    )
    emit_report(report, out / mode, maps=maps, write_svg=True)

    # saliency for the first fake validation sample
    fake = next(s for s in val_set if s.label == 1)
    cam = grad_cam(result.model, fake.image, "cls_final")
    write_pgm(out / mode / "cam_example.pgm", prob_map_to_pgm(cam))
    write_pgm(
        out / mode / "image_example.pgm", prob_map_to_pgm(fake.image.mean(axis=0))
    )

print(f"reports and maps under {out}")
