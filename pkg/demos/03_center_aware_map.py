"""
What the center-aware discriminator sees
========================================

M_CA = sigmoid(delta * max_c sigmoid(cls) * sigmoid(ctr)). At initialization
every location sits near sigmoid(delta * 0.01 * 0.5); a trained head lights
up object centers. Pass a checkpoint to compare.

    python demos/03_center_aware_map.py [checkpoint.npz] [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
import torch

from cadet.alignment import center_aware_map
from cadet.config import ExperimentConfig
from cadet.evaluation import export_response_maps
from cadet.synth import generate_scene, quantize
from cadet.training import images_to_tensor, init_state, load_checkpoint

if len(sys.argv) > 1 and sys.argv[1]:
    state, cfg = load_checkpoint(sys.argv[1])
else:
    cfg = ExperimentConfig()
    cfg.model.channels, cfg.model.widths = 64, [32, 64, 128, 64]
    state = init_state(cfg)
model = state.model
out = Path(sys.argv[2] if len(sys.argv) > 2 else "ca_maps")

image, ann = generate_scene(seed=5, domain="target", params=cfg.data.gen_params())
img = quantize(image)
model.eval()
with torch.no_grad():
    _, outs = model(images_to_tensor(img[None], next(model.parameters()).dtype))

print(f"at the prior: sigmoid(0.1) = {1 / (1 + np.exp(-0.1)):.4f}")
for lvl, o in zip(range(3, 8), outs):
    m = center_aware_map(o.cls_logits[0], o.ctr_logits[0], cfg.loss.delta)
    print(f"P{lvl}: min {m.min():.4f} mean {m.mean():.4f} max {m.max():.4f}")

written = export_response_maps(model, img, out, ann.image_id, cfg.loss.delta)
print("wrote", ", ".join(p.name for p in written))
