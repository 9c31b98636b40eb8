"""One simulated client: heterogeneous extractor, ETF head, auxiliary latent head."""
from dataclasses import dataclass, field

import numpy as np

from .etf import ArcFaceParams, arcface_loss, predict, softmax_cross_entropy
from .numeric.layers import Module
from .numeric.optim import SGD
from .numeric.tensor import Tensor, get_dtype
from .rng import keyed_rng

# (depth, width) recipes; every extractor is pooled down to the shared feature dim
DEFAULT_PALETTE = ((1, 64), (2, 128), (3, 128), (3, 256))


@dataclass
class ClientModel:
    client_id: int
    arch: int
    f: Module
    h: Module | None
    h_prime: Module
    etf: object
    classifier: Module | None = None
    proto_proj: np.ndarray | None = None

    @property
    def uses_etf(self):
        return self.classifier is None

    @property
    def feature_dim(self):
        return self.f.out_dim

    def modules(self):
        mods = [self.f, self.h_prime]
        mods.append(self.h if self.uses_etf else self.classifier)
        return mods

    def parameters(self):
        params = {}
        for m in self.modules():
            params.update(m.parameters())
        return params

    def digest(self):
        return "".join(m.digest() for m in self.modules())

    def embed(self, x, train=False):
        """g(x) = h(f(x)) in ETF space."""
        return self.h(self.f(x, train), train)


@dataclass
class PrototypeSet:
    owner: int
    entries: dict = field(default_factory=dict)

    def classes(self):
        return sorted(self.entries)

    def n_elements(self):
        return sum(v.size for v in self.entries.values())


def extractor_recipe(d, depth, width, feature_dim):
    if depth < 1 or width < 1:
        raise ValueError(f"bad palette entry ({depth}, {width})")
    if width < feature_dim:
        raise ValueError(f"extractor width {width} cannot be pooled up to {feature_dim}")
    recipe = [("fc", d, width), ("relu",)]
    for _ in range(depth - 1):
        recipe += [("fc", width, width), ("relu",)]
    if width != feature_dim:
        recipe.append(("pool", feature_dim))
    return recipe


def h_prime_module(feature_dim, H, shared_seed, round_idx):
    """Auxiliary projection whose weights depend only on ``(shared_seed, round)``."""
    return Module("h_prime", [("fc", feature_dim, H)], shared_seed, key=("h_prime_round", round_idx))


def build_client(i, palette, d, feature_dim, K, H, etf, seed, use_etf=True):
    if not palette:
        raise ValueError("palette must not be empty")
    arch = i % len(palette)
    depth, width = palette[arch]
    key = ("client", i)
    f = Module("f", extractor_recipe(d, depth, width, feature_dim), seed, key=key)
    h_prime = h_prime_module(feature_dim, H, seed, 0)
    if use_etf:
        h = Module("h", [("fc", feature_dim, K)], seed, key=key)
        return ClientModel(i, arch, f, h, h_prime, etf)
    classifier = Module("cls", [("fc", feature_dim, etf.C)], seed, key=key)
    # fixed map shared by all clients so -ETF prototypes still live in K dims
    proj = keyed_rng(seed, "proto_proj").standard_normal((feature_dim, K)) / np.sqrt(feature_dim)
    return ClientModel(i, arch, f, None, h_prime, etf, classifier=classifier, proto_proj=proj)


def reinit_h_prime(model, round_idx, shared_seed):
    model.h_prime = h_prime_module(model.feature_dim, model.h_prime.out_dim, shared_seed, round_idx)


def _stack_pairs(pairs):
    images = np.stack([p.image for p in pairs]).astype(get_dtype())
    latents = np.stack([p.latent for p in pairs]).astype(get_dtype())
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return images, latents, labels


def knowledge_transfer_loss(model, pairs):
    """Mean squared error between h'(f(image)) and the paired latent."""
    if not pairs:
        raise ValueError("knowledge transfer needs at least one pair")
    images, latents, _ = _stack_pairs(pairs)
    return _transfer_term(model, images, latents)


def _transfer_term(model, images, latents):
    if latents.shape[1] != model.h_prime.out_dim:
        raise ValueError(f"pair latent dim {latents.shape[1]} != H={model.h_prime.out_dim}")
    if images.shape[1] != model.f.in_dim:
        raise ValueError(f"pair image dim {images.shape[1]} != client input dim {model.f.in_dim}")
    diff = model.h_prime(model.f(images, True), True) - latents
    return (diff * diff).mean()


def local_loss(model, x, y, arcface=ArcFaceParams()):
    if model.uses_etf:
        return arcface_loss(model.embed(x, True), y, model.etf, arcface)
    logits = model.classifier(model.f(x, True), True)
    onehot = np.zeros((len(y), model.etf.C), dtype=get_dtype())
    onehot[np.arange(len(y)), y] = 1.0
    return softmax_cross_entropy(logits, Tensor(onehot))


def combined_loss(model, x, y, pair_arrays, mu, arcface=ArcFaceParams()):
    """L_A on the batch plus ``mu`` times the transfer loss; returns (total, L_A, L_M)."""
    loss_a = local_loss(model, x, y, arcface)
    if pair_arrays is None or mu == 0:
        return loss_a, loss_a, None
    loss_m = _transfer_term(model, pair_arrays[0], pair_arrays[1])
    return loss_a + loss_m * mu, loss_a, loss_m


def local_train_epoch(model, x, y, pairs=(), mu=50.0, batch=10, lr=0.01, *,
                      arcface=ArcFaceParams(), mix_pairs=False, use_transfer=True,
                      seed=0, round_idx=0, epoch=0):
    """One epoch of floor(n/batch) SGD steps. Returns (mean L_A, mean L_M).

    ``use_transfer=False`` drops the transfer term. ``mix_pairs`` also drops
    it and instead appends the pair images, with their class labels, to the
    local pool.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training split")
    pairs = list(pairs)
    pair_arrays = None
    if pairs:
        images, latents, labels = _stack_pairs(pairs)
        if latents.shape[1] != model.h_prime.out_dim:
            raise ValueError(f"pair latent dim {latents.shape[1]} != H={model.h_prime.out_dim}")
        if mix_pairs:
            x = np.concatenate([x, images])
            y = np.concatenate([y, labels])
        elif use_transfer:
            pair_arrays = (images, latents)
    opt = SGD(lr)
    params = model.parameters()
    order = keyed_rng(seed, "batches", model.client_id, round_idx, epoch).permutation(len(y))
    steps = len(y) // batch
    sum_a = sum_m = 0.0
    for s in range(steps):
        idx = order[s * batch:(s + 1) * batch]
        total, loss_a, loss_m = combined_loss(model, x[idx], y[idx], pair_arrays, mu, arcface)
        grads = total.backward()
        opt.step(params, grads)
        sum_a += loss_a.item()
        sum_m += 0.0 if loss_m is None else loss_m.item()
    if steps == 0:
        return 0.0, 0.0
    return sum_a / steps, sum_m / steps


def embed_eval(model, x):
    if model.uses_etf:
        return model.embed(x, False).data
    return model.f(x, False).data


def extract_prototypes(model, x, y):
    """Class means of g(x) over the training split, in eval mode."""
    y = np.asarray(y)
    feats = embed_eval(model, x)
    if not model.uses_etf:
        feats = feats @ model.proto_proj.astype(feats.dtype)
    protos = PrototypeSet(model.client_id)
    for c in np.unique(y):
        protos.entries[int(c)] = feats[y == c].mean(axis=0)
    return protos


def evaluate(model, x, y):
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty test split")
    if model.uses_etf:
        pred = predict(model.embed(x, False), model.etf)
    else:
        pred = np.argmax(model.classifier(model.f(x, False), False).data, axis=1)
    return float(np.mean(pred == y))
