"""
Label skew from Dirichlet partitioning
======================================

Smaller alpha concentrates each class on fewer clients.
"""

import numpy as np

from fedpeft.data import dirichlet_partition, heterogeneity, label_entropy

labels = np.repeat(np.arange(10), 500)

for alpha in (0.1, 0.5, 1.0, 10.0, 1000.0):
    part = dirichlet_partition(labels, num_clients=8, alpha=alpha, seed=0)
    counts = part.class_counts(labels, 10)
    print(f"alpha={alpha:<7} sizes={part.shard_sizes().tolist()}")
    print(f"{'':14}mean entropy={label_entropy(counts).mean():.3f} nats"
          f"  heterogeneity={heterogeneity(counts):.3f}")

# a single client histogram at strong skew
part = dirichlet_partition(labels, 8, 0.1, seed=0)
print("\nclient 0 at alpha=0.1:", part.class_counts(labels, 10)[0].tolist())
