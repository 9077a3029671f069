"""Show what the fixed high-pass frontend sees: flat regions vanish, texture
and splice boundaries light up.

Run:  python3 demos/02_noise_residuals.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from forgenet.data import forge, gen_real
from forgenet.formats import prob_map_to_pgm, write_pgm
from forgenet.srm import apply_srm, build_bank

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/noise_residuals")
out.mkdir(parents=True, exist_ok=True)

bank = build_bank()
for k, q in zip(bank.kernels, bank.q):
    print(f"kernel {k.shape} q={q:g} coefficient sum={k.sum():g}")

flat = np.full((3, 64, 64), 0.42)
print("constant image residual max:", np.abs(apply_srm(flat)).max(), "(exactly 0)")

real = gen_real(7)
fake = forge(gen_real(7), gen_real(99), "paste", seed=1)

for name, sample in (("real", real), ("fake", fake)):
    res = apply_srm(sample.image)
    print(f"{name}: residual mean |r| = {np.abs(res).mean():.4f}")
    write_pgm(out / f"{name}_image.pgm", prob_map_to_pgm(sample.image.mean(axis=0)))
    # residuals live in [-1,1]; show their magnitude
    write_pgm(out / f"{name}_residual.pgm", prob_map_to_pgm(np.abs(res).mean(axis=0)))

# synthesized texture is smoother than camera grain: the residual goes
# quiet inside the spliced region
res = np.abs(apply_srm(fake.image)).mean(axis=0)
inside = fake.mask.astype(bool)
print(
    f"fake residual inside splice {res[inside].mean():.4f} "
    f"vs outside {res[~inside].mean():.4f}"
)

# the splice boundary is where fake and real residuals disagree most
diff = np.abs(apply_srm(fake.image) - apply_srm(real.image)).mean(axis=0)
write_pgm(out / "residual_difference.pgm", prob_map_to_pgm(diff / max(diff.max(), 1e-9)))
print(f"wrote previews to {out}")
