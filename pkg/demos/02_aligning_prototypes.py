"""
Pulling prototypes into a generator's latent domain
===================================================

The server trains a small transformer F so that F(prototypes) look like
samples from the generator's mapping network.
"""

import numpy as np

from fedktl.client import PrototypeSet
from fedktl.generator import build_synthetic_generator, sample_latents
from fedktl.server import (PrototypeBank, build_feature_transformer, compute_global_centroids,
                           generate_pairs, mmd_rbf, train_feature_transformer, transform)

gen = build_synthetic_generator(Z=16, H=8, d_img=12, seed=0)

# three clients upload prototypes for the classes they hold
rng = np.random.default_rng(1)
owned = [[0, 1, 2], [1, 2, 3], [0, 3]]
sets = [PrototypeSet(i, {c: rng.standard_normal(4) + c for c in cls}) for i, cls in enumerate(owned)]
bank = PrototypeBank.from_sets(sets)
print("bank entries:", len(bank), "classes:", bank.classes())

F = build_feature_transformer(K=4, H=8, seed=0)
target = sample_latents(gen, len(bank), 0, "probe")
print("MMD before training:", round(mmd_rbf(transform(F, bank.vectors), target).item(), 4))

trace = train_feature_transformer(F, bank, gen, lam=1.0, epochs=200)
print("loss trace (every 40 epochs):", np.round(trace[::40], 4))
print("MMD after training: ", round(mmd_rbf(transform(F, bank.vectors), target).item(), 4))

# one centroid per class, each turned into an image by the frozen generator
pairs = generate_pairs(compute_global_centroids(F, bank), gen, round_idx=0)
for p in pairs:
    print(f"class {p.label}: latent norm {np.linalg.norm(p.latent):.3f}, "
          f"image range [{p.image.min():.2f}, {p.image.max():.2f}]")
