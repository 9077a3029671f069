"""Trace one image through the two-stream network and inspect each stage.

Run:  python3 demos/04_two_stream_walkthrough.py
"""

import numpy as np

from forgenet import autodiff as ad
from forgenet.data import forge, gen_real
from forgenet.model import ModelConfig, TwoStreamModel, location_attention

cfg = ModelConfig(seed=0)
model = TwoStreamModel(cfg)
print(f"config: {cfg.image_size}x{cfg.image_size} image, {cfg.grid}x{cfg.grid} patch grid")
print(f"parameters: {model.store.n_values():,} values in {len(model.store.names())} tensors")

fake = forge(gen_real(12), gen_real(55), "feather", seed=2)
fw = model.forward(fake.image)

print("\nstage shapes:")
for name in ("entry0", "entry1", "entry2", "fused", "loc0", "cls0", "loc_final",
             "cls_final", "cls_fused"):
    print(f"  {name:10s} {fw.taps[name].shape}")
print(f"  cls logit  {fw.cls_logit.shape}  loc logits {fw.loc_logits.shape}")

att = location_attention(fw.taps["loc_final"], model.store["attn2.query.w"])
print("\nattention matrix:", att.shape, "row sums ~1:",
      np.allclose(att.data.sum(axis=1), 1.0, atol=1e-9))

probs = ad._expit(fw.loc_logits.data[0])
print("\nuntrained patch probability map (rows):")
for row in probs:
    print("  " + " ".join(f"{v:.2f}" for v in row))
print("\nclassification probability:", float(ad._expit(np.asarray(fw.cls_logit.data))))
