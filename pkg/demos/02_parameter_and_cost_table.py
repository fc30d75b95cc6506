"""
Tuned parameters and per-round communication for ViT-B/16
=========================================================

Everything here is analytical: no 86M-parameter model is allocated.
"""

from fedpeft.comm import format_cost, format_millions, rounded_round_cost, round_cost
from fedpeft.models import ModelSpec, count_params
from fedpeft.peft import TuningMode

spec = ModelSpec.vit_base(num_classes=100)
modes = [TuningMode("full"), TuningMode("head"), TuningMode("bias"),
         TuningMode("adapter", adapter_bottleneck=8), TuningMode("prompt", prompt_length=10)]

total = count_params(spec).total
print(f"{'mode':<8} {'exact':>11} {'share':>7}  rounded x M, cost (8 clients)")
for mode in modes:
    tuned = count_params(spec, mode).tuned
    print(f"{mode.kind:<8} {tuned:>11,d} {tuned / total:>7.3%}  "
          f"{format_millions(round(tuned, -4))} x 8, {rounded_round_cost(tuned, 8)}")

# exact bytes versus the rounded-count convention
prompt = count_params(spec, TuningMode("prompt")).tuned
print("\nprompt, exact count:    ", format_cost(round_cost(prompt, 8)))
print("prompt, 0.17M convention:", format_cost(round_cost(170_000, 8)))

# one client uploading the whole model
print("\nfull model, one client: ", format_cost(round_cost(85_880_000, 1)))

# the adapter reduction-factor reading gives a much larger module
wide = count_params(spec, TuningMode("adapter", adapter_reduction=8)).tuned
print(f"adapter with bottleneck 768/8 = 96: {wide:,d} parameters")
