"""
Gaussian mechanism inside local training
========================================

Clip each step's gradient, then add calibrated noise.
"""

import numpy as np

from fedpeft.data import SyntheticTaskSpec, dirichlet_partition, make_synthetic
from fedpeft.federation import FederationConfig, run_training
from fedpeft.models import ModelSpec, build_model
from fedpeft.peft import apply_mode
from fedpeft.privacy import DpConfig, clip_gradient, gaussian_sigma
from fedpeft.tensor import SgdConfig

print("sigma at eps=5, delta=1e-3, S=1:", gaussian_sigma(5, 1e-3, 1.0))
print("sigma at eps=1:                 ", gaussian_sigma(1, 1e-3, 1.0))

g = np.array([3.0, 4.0])
print("clip [3, 4] to norm 1:", clip_gradient(g, 1.0))

# the same head-tuning run with and without privacy
task = SyntheticTaskSpec(family="mlp", class_count=4, samples_per_class=100, feature_dim=16,
                         separation=2.0)
train, test = make_synthetic(task, seed=0), make_synthetic(task, seed=1)
part = dirichlet_partition(train.labels, 8, alpha=1.0, seed=0)

for label, dp in (("no DP", None), ("DP eps=5", DpConfig(epsilon=5.0))):
    for kind in ("full", "head"):
        model = apply_mode(build_model(ModelSpec.mlp(16, 32, 4), seed=0), kind)
        cfg = FederationConfig(8, 4, rounds=10, local_epochs=2, sgd=SgdConfig(0.05, 0, 16), dp=dp)
        hist = run_training(model, train, part, cfg, test)
        print(f"{label:<9} {kind:<5} final accuracy {hist[-1].server_accuracy:.3f}")
