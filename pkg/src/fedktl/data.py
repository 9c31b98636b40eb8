"""Synthetic labelled data, the KTLD file format, and non-IID partitioners."""
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import keyed_rng

KTLD_MAGIC = b"KTLD"
KTLD_VERSION = 1
_HEADER = struct.Struct("<4sIQQI")

# pathological split: owner shares ~ Dir(0.5), floored at 10% of an equal share
PATHOLOGICAL_ALPHA = 0.5
PATHOLOGICAL_FLOOR = 0.1
TEST_FRACTION = 0.25


class DatasetFormatError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    C: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, d) with one label per row")
        if self.labels.size and int(self.labels.max()) >= self.C:
            raise DatasetFormatError("label out of range")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.C)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.C == other.C
                and self.features.tobytes() == other.features.tobytes()
                and self.labels.tobytes() == other.labels.tobytes()
                and self.features.shape == other.features.shape)


@dataclass
class PartitionPlan:
    assignments: list
    class_sets: list
    splits: list = field(default_factory=list)

    @property
    def N(self):
        return len(self.assignments)


def make_synthetic_dataset(C, d, samples_per_class, cluster_spread, seed):
    """Isotropic Gaussian blobs around seeded random unit-norm class centres."""
    if min(C, d, samples_per_class) < 1:
        raise ValueError("counts must be positive")
    if cluster_spread < 0:
        raise ValueError("spread must be non-negative")
    rng = keyed_rng(seed, "dataset")
    centers = rng.standard_normal((C, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(C), samples_per_class)
    noise = rng.standard_normal((labels.size, d))
    features = centers[labels] + cluster_spread * noise
    return Dataset(features, labels, C)


def write_dataset_file(ds, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(KTLD_MAGIC, KTLD_VERSION, ds.n, ds.d, ds.C))
        fh.write(ds.features.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())


def read_dataset_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != KTLD_MAGIC:
        raise DatasetFormatError("bad magic")
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated header")
    _, version, n, d, C = _HEADER.unpack_from(raw)
    if version != KTLD_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    expected = _HEADER.size + 4 * n * d + 4 * n
    if len(raw) != expected:
        raise DatasetFormatError(f"truncated or oversized payload: {len(raw)} bytes, expected {expected}")
    off = _HEADER.size
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 4 * n * d)
    if n and int(labels.max()) >= C:
        raise DatasetFormatError("label out of range")
    return Dataset(features.copy(), labels.copy(), C)


def largest_remainder(total, proportions):
    """Integer counts summing to ``total`` that best match ``proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        # ties broken by index for determinism
        order = np.lexsort((np.arange(p.size), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def _class_pools(ds, rng):
    pools = []
    for c in range(ds.C):
        idx = np.flatnonzero(ds.labels == c)
        pools.append(rng.permutation(idx))
    return pools


def partition_pathological(ds, N, classes_per_client, seed, split_seed=None):
    """Each client owns ``classes_per_client`` classes; owners split a class unevenly."""
    C = ds.C
    if N < 1 or classes_per_client < 1 or classes_per_client > C:
        raise PartitionError("need N >= 1 and 1 <= classes_per_client <= C")
    if N * classes_per_client < C:
        raise PartitionError(f"{N} clients x {classes_per_client} classes cannot cover {C} classes")
    rng = keyed_rng(seed, "pathological")
    order = rng.permutation(C)
    owned = [[int(order[(i * classes_per_client + j) % C]) for j in range(classes_per_client)]
             for i in range(N)]
    owners = {c: [i for i in range(N) if c in owned[i]] for c in range(C)}
    pools = _class_pools(ds, rng)
    assignments = [[] for _ in range(N)]
    for c in range(C):
        who = owners[c]
        k = len(who)
        share = rng.dirichlet(np.full(k, PATHOLOGICAL_ALPHA))
        share = np.maximum(share, PATHOLOGICAL_FLOOR / k)
        counts = largest_remainder(len(pools[c]), share)
        if np.any(counts == 0):
            raise PartitionError(f"class {c} has too few samples ({len(pools[c])}) for {k} owners")
        start = 0
        for i, cnt in zip(who, counts):
            assignments[i].extend(pools[c][start:start + cnt].tolist())
            start += cnt
    return _finish(ds, assignments, seed if split_seed is None else split_seed)


def partition_dirichlet(ds, N, beta, seed, min_samples=1, max_tries=1000, split_seed=None):
    """Per class, client proportions q ~ Dir(beta * 1_N).

    The whole draw is repeated while any client holds fewer than
    ``min_samples`` samples.
    """
    if beta <= 0:
        raise PartitionError("beta must be positive")
    if N < 1:
        raise PartitionError("need at least one client")
    for attempt in range(max_tries):
        rng = keyed_rng(seed, "dirichlet", attempt)
        pools = _class_pools(ds, rng)
        assignments = [[] for _ in range(N)]
        for c in range(ds.C):
            q = rng.dirichlet(np.full(N, beta)) if N > 1 else np.ones(1)
            counts = largest_remainder(len(pools[c]), q)
            start = 0
            for i in range(N):
                assignments[i].extend(pools[c][start:start + counts[i]].tolist())
                start += counts[i]
        if min(len(a) for a in assignments) >= max(min_samples, 1):
            return _finish(ds, assignments, seed if split_seed is None else split_seed)
    raise PartitionError(f"no Dirichlet draw gave every client >= {min_samples} samples "
                         f"in {max_tries} tries")


def train_test_split(indices, seed, client):
    """Shuffle and split 3:1; the test share is floor(n/4)."""
    idx = keyed_rng(seed, "split", client).permutation(np.asarray(indices, dtype=np.int64))
    n_test = int(len(idx) * TEST_FRACTION)
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def _finish(ds, assignments, seed):
    assignments = [np.sort(np.asarray(a, dtype=np.int64)) for a in assignments]
    splits = [train_test_split(a, seed, i) for i, a in enumerate(assignments)]
    class_sets = [sorted(set(ds.labels[tr].tolist())) for tr, _ in splits]
    return PartitionPlan(assignments=assignments, class_sets=class_sets, splits=splits)
