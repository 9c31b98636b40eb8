"""
A fixed simplex ETF head and the angular margin loss
====================================================

Every client classifies against the same frozen set of class vectors.
"""

import numpy as np

from fedktl.etf import ArcFaceParams, arcface_loss, cosine_logits, synthesize_etf

# five classes in a five-dimensional feature space
etf = synthesize_etf(C=5, K=5, seed=0)
print("column norms:", np.round(np.linalg.norm(etf.V, axis=0), 6))

# every pair of vertices meets at the same angle, cos = -1/(C-1)
gram = etf.V.T @ etf.V
print("off-diagonal cosines:", np.unique(np.round(gram[~np.eye(5, dtype=bool)], 6)))

# a feature sitting on vertex 2 scores 1 there and -1/4 elsewhere
print("logits at v_2:", np.round(cosine_logits(etf.V[:, 2], etf).data, 4))

# a feature only slightly closer to class 2 than to class 0; the margin
# makes the loss demand more than just being closest
feature = 0.55 * etf.V[:, 2] + 0.45 * etf.V[:, 0]
for s, m in [(1, 0.0), (16, 0.0), (16, 0.5), (64, 0.5)]:
    loss = arcface_loss(feature[None, :], [2], etf, ArcFaceParams(s, m)).item()
    print(f"s={s:>2} m={m:.1f}  loss={loss:.4f}")
