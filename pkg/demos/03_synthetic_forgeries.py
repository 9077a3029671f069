"""Generate the three forgery families and their patch-level labels.

Run:  python3 demos/03_synthetic_forgeries.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from forgenet.data import FAMILIES, augment, forge, gen_real
from forgenet.formats import prob_map_to_pgm, write_pgm
from forgenet.supervision import mask_to_patches

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/forgeries")
out.mkdir(parents=True, exist_ok=True)

target = gen_real(3)
donor = gen_real(41)
print("landmarks (x,y):")
for name, (x, y) in zip(("eye_l", "eye_r", "nose", "mouth_l", "mouth_r"), target.landmarks):
    print(f"  {name:8s} ({x:5.1f}, {y:5.1f})")

write_pgm(out / "target.pgm", prob_map_to_pgm(target.image.mean(axis=0)))
write_pgm(out / "donor.pgm", prob_map_to_pgm(donor.image.mean(axis=0)))

for family in FAMILIES:
    fake = forge(target, donor, family, seed=5)
    patches = mask_to_patches(fake.mask, grid=8)
    print(
        f"{family:9s} mask pixels {int(fake.mask.sum()):4d}  "
        f"positive patches {int(patches.values.sum()):2d}/64"
    )
    write_pgm(out / f"{family}_image.pgm", prob_map_to_pgm(fake.image.mean(axis=0)))
    write_pgm(out / f"{family}_mask.pgm", (fake.mask * 255).astype(np.uint8))
    write_pgm(out / f"{family}_patches.pgm", (patches.values * 255).astype(np.uint8))

aug = augment(forge(target, donor, "feather", seed=5), seed=11)
print("after augmentation: mask pixels", int(aug.mask.sum()), "(still aligned)")
write_pgm(out / "feather_augmented.pgm", prob_map_to_pgm(aug.image.mean(axis=0)))
print(f"wrote previews to {out}")
