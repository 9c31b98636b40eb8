"""Server side: align prototypes with the generator's latent domain and emit pairs."""
from dataclasses import dataclass, field

import numpy as np

from .generator import ImageVectorPair, sample_latents, synthesize_images
from .numeric.layers import Module
from .numeric.optim import Adam
from .numeric.tensor import Tensor, as_tensor, get_dtype
from .rng import keyed_rng

BANDWIDTH_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class PrototypeBank:
    """Uploaded prototypes of one round, ordered by (client id, class)."""

    client_ids: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray

    @classmethod
    def from_sets(cls, sets):
        rows = sorted((s.owner, c, v) for s in sets for c, v in s.entries.items())
        if not rows:
            return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 0)))
        ids, labels, vecs = zip(*rows)
        return cls(np.array(ids), np.array(labels), np.stack(vecs).astype(get_dtype()))

    def __len__(self):
        return len(self.labels)

    def owners(self, c):
        return self.client_ids[self.labels == c].tolist()

    def classes(self):
        return np.unique(self.labels).tolist()


@dataclass
class FeatureTransformer:
    module: Module
    optimizer: Adam
    history: list = field(default_factory=list)


def build_feature_transformer(K, H, seed, lr=0.01, restart=0):
    module = Module("F", [("fc", K, H), ("bn", H), ("fc", H, H)], seed, key=("server", restart))
    return FeatureTransformer(module, Adam(lr))


def median_bandwidths(X, Y, scales=BANDWIDTH_SCALES):
    """sigma values with sigma^2 = median pooled squared distance x scale."""
    Z = np.concatenate([np.asarray(X, np.float64), np.asarray(Y, np.float64)])
    sq = (Z * Z).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * Z @ Z.T
    iu = np.triu_indices(len(Z), 1)
    med = float(np.median(np.maximum(d2[iu], 0.0))) if iu[0].size else 0.0
    if med <= 0:
        med = 1.0
    return [float(np.sqrt(med * s)) for s in scales]


def _sq_dists(A, B):
    sa = (A * A).sum(axis=1, keepdims=True)
    sb = (B * B).sum(axis=1, keepdims=True)
    return sa + sb.T - (A @ B.T) * 2.0


def _kernel_mean(A, B, bandwidths):
    d2 = _sq_dists(A, B)
    total = None
    for sigma in bandwidths:
        k = (d2 * (-1.0 / (2.0 * sigma * sigma))).exp().mean()
        total = k if total is None else total + k
    return total * (1.0 / len(bandwidths))


def _canonical(X, Y):
    kx = (X.shape, X.data.tobytes())
    ky = (Y.shape, Y.data.tobytes())
    return (Y, X) if ky < kx else (X, Y)


def mmd_rbf(X, Y, bandwidths=None):
    """Biased (V-statistic) squared MMD with an averaged multi-bandwidth RBF kernel.

    ``bandwidths`` are kernel widths sigma; when omitted they come from the
    median heuristic on the pooled sample.
    """
    X, Y = as_tensor(X), as_tensor(Y)
    if X.shape[0] < 1 or Y.shape[0] < 1:
        raise ValueError("MMD needs non-empty samples")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sample dimensions differ")
    # fixed argument order makes mmd(X, Y) and mmd(Y, X) bitwise equal
    X, Y = _canonical(X, Y)
    if bandwidths is None:
        bandwidths = median_bandwidths(X.data, Y.data)
    bandwidths = [float(b) for b in np.atleast_1d(bandwidths)]
    if not bandwidths or min(bandwidths) <= 0:
        raise ValueError("bandwidths must be positive")
    kxx = _kernel_mean(X, X, bandwidths)
    kyy = _kernel_mean(Y, Y, bandwidths)
    kxy = _kernel_mean(X, Y, bandwidths)
    return kxx + kyy - kxy * 2.0


def _centroid_operators(bank_labels):
    """Matrices A (classes x entries) averaging per class and S selecting back."""
    classes = np.unique(bank_labels)
    A = np.zeros((len(classes), len(bank_labels)))
    for r, c in enumerate(classes):
        members = bank_labels == c
        A[r, members] = 1.0 / members.sum()
    S = (bank_labels[:, None] == classes[None, :]).astype(np.float64)
    # per-entry weight 1/(|M_c| * #classes)
    weights = (S @ (1.0 / A.astype(bool).sum(axis=1))) / len(classes)
    return classes, A, S, weights


def mse_centroid_loss(F_out, bank_labels):
    """Spread of transformed prototypes around their class centroid.

    ``F_out`` holds F(P) for every bank entry; centroids are recomputed from
    it so the gradient flows through both terms.
    """
    bank_labels = np.asarray(bank_labels)
    _, A, S, weights = _centroid_operators(bank_labels)
    centroids = Tensor(A) @ F_out
    diff = F_out - Tensor(S) @ centroids
    per_entry = (diff * diff).mean(axis=1, keepdims=True)
    return (per_entry * Tensor(weights[:, None])).sum()


def bank_mse_loss(transformer, bank, train=True):
    return mse_centroid_loss(transformer.module(bank.vectors, train), bank.labels)


def server_loss(transformer, batch_vectors, target_latents, bank, lam=1.0,
                use_mmd=True, use_mse=True):
    F = transformer.module
    total = None
    if use_mmd:
        total = mmd_rbf(F(batch_vectors, True), target_latents)
    if use_mse and lam != 0:
        mse = bank_mse_loss(transformer, bank) * lam
        total = mse if total is None else total + mse
    return total


def train_feature_transformer(transformer, bank, gen, lam=1.0, epochs=100, batch_size=100,
                              seed=0, round_idx=0, use_mmd=True, use_mse=True):
    """Adam steps on MMD(F(batch), fresh W batch) + lam * centroid MSE.

    Returns the per-epoch mean loss trace.
    """
    if len(bank) == 0:
        raise ValueError("empty prototype bank")
    F = transformer.module
    params = F.parameters()
    trace = []
    for epoch in range(epochs):
        order = keyed_rng(seed, "server_batches", round_idx, epoch).permutation(len(bank))
        losses = []
        for b, start in enumerate(range(0, len(bank), batch_size)):
            idx = order[start:start + batch_size]
            target = sample_latents(gen, len(idx), seed, "server", round_idx, epoch, b)
            loss = server_loss(transformer, bank.vectors[idx], target, bank, lam,
                               use_mmd=use_mmd, use_mse=use_mse)
            if loss is None:
                continue
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"non-finite server loss at round {round_idx}, epoch {epoch}")
            value = loss.item()
            transformer.optimizer.step(params, loss.backward())
            losses.append(value)
        trace.append(float(np.mean(losses)) if losses else 0.0)
    transformer.history.append(trace)
    return trace


def transform(transformer, vectors):
    return transformer.module(np.asarray(vectors), False).data


def compute_global_centroids(transformer, bank, previous=None):
    """Class-wise mean of F(P) in eval mode; absent classes keep their last centroid."""
    centroids = dict(previous or {})
    if len(bank):
        out = transform(transformer, bank.vectors)
        for c in bank.classes():
            centroids[int(c)] = out[bank.labels == c].mean(axis=0)
    return dict(sorted(centroids.items()))


def generate_pairs(centroids, gen, round_idx, synthesize=None):
    """One (image, latent) pair per available class, image = G_s(latent)."""
    if not centroids:
        raise ValueError("no centroids to synthesise")
    labels = sorted(centroids)
    latents = np.stack([np.asarray(centroids[c], dtype=get_dtype()) for c in labels])
    if latents.shape[1] != gen.H:
        raise ValueError(f"centroid dim {latents.shape[1]} != generator H={gen.H}")
    if synthesize is None:
        images = synthesize_images(gen, latents)
    else:
        images = np.asarray(synthesize(latents, round_idx), dtype=get_dtype())
    return [ImageVectorPair(int(c), latents[k], images[k], round_idx) for k, c in enumerate(labels)]


def random_pairs(gen, C, seed):
    """C pairs from random valid latents, fixed for the whole run (+CS variant)."""
    latents = sample_latents(gen, C, seed, "conditional")
    images = synthesize_images(gen, latents)
    return [ImageVectorPair(c, latents[c], images[c], 0) for c in range(C)]


def perturb_gaussian(array, scale, prob, seed, *keys):
    """Add N(0, scale^2) noise to each element independently with probability ``prob``."""
    if scale < 0 or not 0 <= prob <= 1:
        raise ValueError("need scale >= 0 and prob in [0, 1]")
    array = np.asarray(array)
    if scale == 0 or prob == 0:
        return array.copy()
    rng = keyed_rng(seed, "noise_perturb", *keys)
    gate = rng.random(array.shape) < prob
    noise = rng.standard_normal(array.shape) * scale
    return (array + gate * noise).astype(array.dtype)


def alignment_mmd(transformer, bank, gen, seed, round_idx, n_target=None):
    """Diagnostic MMD between all transformed prototypes and a fresh W sample."""
    out = transform(transformer, bank.vectors)
    n = n_target or len(bank)
    target = sample_latents(gen, n, seed, "alignment_probe", round_idx)
    return float(mmd_rbf(out, target).item())


__all__ = ["PrototypeBank", "FeatureTransformer", "build_feature_transformer", "mmd_rbf",
           "median_bandwidths", "mse_centroid_loss", "server_loss", "train_feature_transformer",
           "compute_global_centroids", "generate_pairs", "random_pairs", "perturb_gaussian",
           "alignment_mmd", "transform", "bank_mse_loss"]
