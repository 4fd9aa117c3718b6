"""
End-to-end smoke run
====================

Train the small 64-px configuration for 500 steps with both alignment terms
and report the mAP family on the clear validation split. A few minutes on one
CPU core.
"""

import json
import sys
from pathlib import Path

from cadet.config import load_config
from cadet.training import fit

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "smoke.yaml")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/smoke")

final = fit(cfg, out, log_every=100)
m = final["metrics"]
print(f"{final['split']} map50 {m['map50']:.3f}  map {m['map']:.3f}  map75 {m['map75']:.3f}")

# the log holds one record per evaluation, each with its config hash and seed
for line in (out / "metrics.jsonl").read_text().splitlines():
    rec = json.loads(line)
    print(rec["kind"], rec["step"], rec["phase"], rec["config_hash"], rec["seed"])
