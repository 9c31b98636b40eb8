"""Fixed simplex-ETF classifier head and the angular-margin loss trained against it."""
from dataclasses import dataclass

import numpy as np

from .numeric.tensor import Tensor, as_tensor, get_dtype
from .rng import keyed_rng

_MAX_ORTHO_TRIES = 8


@dataclass(frozen=True)
class SimplexETF:
    """K x C matrix whose unit columns have pairwise cosine -1/(C-1)."""

    V: np.ndarray
    U: np.ndarray

    @property
    def K(self):
        return self.V.shape[0]

    @property
    def C(self):
        return self.V.shape[1]


@dataclass(frozen=True)
class ArcFaceParams:
    s: float = 64.0
    m: float = 0.5

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("scale s must be positive")
        if not 0 <= self.m < np.pi / 2:
            raise ValueError("margin m must lie in [0, pi/2)")


# s=1, m=0 turns the margin loss into plain cosine-logit cross-entropy
CONTRASTIVE = ArcFaceParams(s=1.0, m=0.0)


def synthesize_etf(C, K, seed):
    if C < 2:
        raise ValueError("need at least two classes")
    if K < C - 1:
        raise ValueError(f"ETF dimension K={K} must be >= C-1={C - 1}")
    # U is K x C with orthonormal columns, so K >= C is needed for U itself;
    # when K == C-1 we rotate inside a C-dim frame and drop the null direction.
    rows = max(K, C)
    for attempt in range(_MAX_ORTHO_TRIES):
        g = keyed_rng(seed, "etf", attempt).standard_normal((rows, C))
        q, r = np.linalg.qr(g)
        if np.min(np.abs(np.diag(r))) > 1e-8:
            break
    else:
        raise np.linalg.LinAlgError("could not orthonormalise a random basis")
    U = q * np.sign(np.diag(r))
    center = np.eye(C) - np.ones((C, C)) / C
    V = np.sqrt(C / (C - 1)) * U @ center
    if K < rows:
        # columns of V sum to zero; project them into the K-dim span they occupy
        basis, _, _ = np.linalg.svd(V, full_matrices=False)
        proj = basis[:, :K]
        V = proj.T @ V
        U = proj.T @ U
    return SimplexETF(V=V, U=U)


def cosine_logits(features, etf):
    """Cosine between each feature row and every ETF column (differentiable)."""
    features = as_tensor(features)
    single = features.ndim == 1
    if single:
        features = features.reshape(1, -1)
    norms = np.sqrt((features.data ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise ValueError("zero feature vector has no direction")
    norm = (features * features).sum(axis=1, keepdims=True).sqrt()
    out = (features / norm) @ Tensor(etf.V)
    return out.reshape(-1) if single else out


def arcface_loss(features, labels, etf, params=ArcFaceParams()):
    """Mean additive-angular-margin softmax loss over cosine logits.

    The margin is added to the true-class angle only, clamped at pi.
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = etf.C
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    cos = cosine_logits(features, etf)
    onehot = np.zeros((labels.size, C), dtype=get_dtype())
    onehot[np.arange(labels.size), labels] = 1.0
    onehot_t = Tensor(onehot)
    cos_y = (cos * onehot_t).sum(axis=1, keepdims=True)
    if params.m == 0:
        target = cos_y
    else:
        lim = 1.0 - 1e-7
        theta = cos_y.clip(-lim, lim).arccos()
        target = (theta + params.m).minimum(np.pi).cos()
    logits = (cos * Tensor(1.0 - onehot) + target * onehot_t) * params.s
    return softmax_cross_entropy(logits, onehot_t)


def softmax_cross_entropy(logits, onehot):
    """Mean cross-entropy with max-subtraction; ``onehot`` is a constant Tensor."""
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = z.exp().sum(axis=1, keepdims=True).log()
    picked = (z * onehot).sum(axis=1, keepdims=True)
    return (lse - picked).mean()


def predict(features, etf):
    """Class with the largest cosine; margin and scale play no part."""
    feats = np.asarray(features.data if isinstance(features, Tensor) else features)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return np.argmax((feats / norms) @ etf.V, axis=1)
