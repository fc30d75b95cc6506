"""
Freezing and extending a small ViT
==================================

Each tuning mode picks which parameters train and travel.
"""

import numpy as np

from fedpeft.models import ModelSpec, build_model, predict
from fedpeft.peft import TuningMode, apply_mode

spec = ModelSpec("vit", image_size=16, patch_size=4, embed_dim=32, mlp_hidden_dim=64, depth=2,
                 num_heads=4, num_classes=10)
x = np.random.default_rng(0).standard_normal((8, 3, 16, 16)).astype(np.float32)
base_logits = predict(build_model(spec, seed=0), x)

for mode in (TuningMode("full"), TuningMode("head"), TuningMode("bias"),
             TuningMode("adapter", adapter_bottleneck=4), TuningMode("prompt", prompt_length=5)):
    model = apply_mode(build_model(spec, seed=0), mode)
    reg = model.registry
    print(f"{mode.kind:<8} transmitted {reg.count(transmitted=True):>6,d} of {reg.count():>6,d}")

# new modules start as the identity, so the pretrained function is preserved
adapter = apply_mode(build_model(spec, seed=0), TuningMode("adapter", adapter_bottleneck=4))
print("\nadapter logits equal base logits:", np.array_equal(predict(adapter, x), base_logits))

# prompts shift the output unless they are empty
prompt = apply_mode(build_model(spec, seed=0), TuningMode("prompt", prompt_length=5))
print("prompt logits equal base logits: ", np.array_equal(predict(prompt, x), base_logits))
empty = apply_mode(build_model(spec, seed=0), TuningMode("prompt", prompt_length=0))
print("zero-length prompt equals base:  ", np.array_equal(predict(empty, x), base_logits))

print("\nbias-mode trainables:", [n for n in apply_mode(build_model(spec), "bias")
                                  .registry.names(trainable=True)][:6], "...")
