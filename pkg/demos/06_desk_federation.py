"""
Pretrain, then federate every tuning mode
=========================================

configs/desk_vit.toml with 8 federated rounds; pass ``--full`` for all 20.
"""

import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from fedpeft import experiment as ex
from fedpeft.comm import cost_to_target, format_cost

root = Path(__file__).resolve().parents[1]
cfg = ex.load_config(root / "configs" / "desk_vit.toml")
if "--full" not in sys.argv:
    cfg = replace(cfg, rounds=8)

out = Path(tempfile.mkdtemp(prefix="fedpeft_demo_"))
start = time.perf_counter()
_, history = ex.pretrain(cfg, out / "pretrained.ckpt")
print(f"pretrained in {time.perf_counter() - start:.0f}s, source accuracy {history[-1][1]:.3f}")

_, ev = ex.load_datasets(cfg)
print("pretrained model on the shifted target:",
      round(ex.evaluate_checkpoint(out / "pretrained.ckpt", ev)[0], 3))

for kind in ("full", "head", "bias", "adapter", "prompt"):
    hist = ex.federate(cfg.with_mode(kind), out / "pretrained.ckpt", out / kind)
    last = hist[-1]
    hit = cost_to_target(hist, 0.8)
    reached = f"{hit.render()} in {hit.rounds} rounds" if hit else "not reached"
    print(f"{kind:<8} acc={last.server_accuracy:.3f} |P|={last.param_count:>7,d} "
          f"per round {format_cost(last.upload_bytes):>9}  to 80%: {reached}")

print("artifacts in", out)
