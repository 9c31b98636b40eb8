import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedktl.data import (Dataset, DatasetFormatError, PartitionError, largest_remainder,
                         make_synthetic_dataset, partition_dirichlet, partition_pathological,
                         read_dataset_file, train_test_split, write_dataset_file)


def test_zero_spread_collapses_to_centres():
    ds = make_synthetic_dataset(3, 4, 5, 0.0, seed=2)
    for c in range(3):
        rows = ds.features[ds.labels == c]
        np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))
        assert np.linalg.norm(rows[0]) == pytest.approx(1.0, abs=1e-6)


def test_class_means_within_standard_error():
    spread = 0.3
    ds = make_synthetic_dataset(2, 2, 10, spread, seed=1)
    centres = make_synthetic_dataset(2, 2, 10, 0.0, seed=1)
    for c in range(2):
        mean = ds.features[ds.labels == c].mean(axis=0)
        centre = centres.features[centres.labels == c][0]
        assert np.all(np.abs(mean - centre) <= 3 * spread / np.sqrt(10))


def test_synthetic_deterministic():
    a = make_synthetic_dataset(4, 3, 6, 0.5, seed=9)
    assert a == make_synthetic_dataset(4, 3, 6, 0.5, seed=9)
    assert a != make_synthetic_dataset(4, 3, 6, 0.5, seed=10)


def test_file_round_trip(tmp_path):
    ds = make_synthetic_dataset(5, 7, 3, 0.4, seed=0)
    path = tmp_path / "d.ktld"
    write_dataset_file(ds, path)
    back = read_dataset_file(path)
    assert back == ds
    assert back.features.tobytes() == ds.features.tobytes()


def test_empty_file_is_bad_magic(tmp_path):
    path = tmp_path / "empty.ktld"
    path.write_bytes(b"")
    with pytest.raises(DatasetFormatError, match="bad magic"):
        read_dataset_file(path)


def test_label_out_of_range(tmp_path):
    ds = Dataset(np.zeros((2, 3)), np.array([0, 1]), 2)
    path = tmp_path / "d.ktld"
    write_dataset_file(ds, path)
    raw = bytearray(path.read_bytes())
    raw[-4:] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="label out of range"):
        read_dataset_file(path)


def test_truncated_file(tmp_path):
    ds = make_synthetic_dataset(2, 3, 4, 0.1, seed=0)
    path = tmp_path / "d.ktld"
    write_dataset_file(ds, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DatasetFormatError):
        read_dataset_file(path)


@given(total=st.integers(0, 500), weights=st.lists(st.floats(0.01, 10), min_size=1, max_size=12))
@settings(max_examples=50, deadline=None)
def test_largest_remainder_sums(total, weights):
    counts = largest_remainder(total, weights)
    assert counts.sum() == total
    ideal = total * np.asarray(weights) / np.sum(weights)
    assert np.all(np.abs(counts - ideal) < 1.0 + 1e-9)


def _check_disjoint_cover(ds, plan):
    allidx = np.concatenate(plan.assignments)
    assert len(allidx) == len(np.unique(allidx))
    assert len(allidx) <= ds.n
    for a, (tr, te) in zip(plan.assignments, plan.splits):
        np.testing.assert_array_equal(np.sort(np.concatenate([tr, te])), a)


def test_pathological_single_owner_per_class():
    ds = make_synthetic_dataset(10, 2, 20, 0.5, seed=0)
    plan = partition_pathological(ds, 5, 2, seed=3)
    _check_disjoint_cover(ds, plan)
    owned = [set(ds.labels[a].tolist()) for a in plan.assignments]
    assert all(len(o) == 2 for o in owned)
    assert set().union(*owned) == set(range(10))
    assert all(sum(c in o for o in owned) == 1 for c in range(10))


def test_pathological_two_owners_per_class():
    ds = make_synthetic_dataset(10, 2, 40, 0.5, seed=0)
    plan = partition_pathological(ds, 10, 2, seed=4)
    _check_disjoint_cover(ds, plan)
    owned = [set(ds.labels[a].tolist()) for a in plan.assignments]
    assert all(sum(c in o for o in owned) == 2 for c in range(10))
    # each owner holds at least 10% of an equal share
    for c in range(10):
        counts = [np.sum(ds.labels[a] == c) for a in plan.assignments if c in set(ds.labels[a])]
        assert min(counts) >= 0.1 * 40 / 2 - 1


def test_pathological_infeasible():
    ds = make_synthetic_dataset(10, 2, 5, 0.5, seed=0)
    with pytest.raises(PartitionError):
        partition_pathological(ds, 3, 2, seed=0)


def test_pathological_deterministic():
    ds = make_synthetic_dataset(10, 2, 20, 0.5, seed=0)
    a = partition_pathological(ds, 5, 2, seed=7)
    b = partition_pathological(ds, 5, 2, seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.assignments, b.assignments))


def test_dirichlet_single_client_takes_all():
    ds = make_synthetic_dataset(4, 2, 10, 0.5, seed=0)
    plan = partition_dirichlet(ds, 1, 0.1, seed=0)
    np.testing.assert_array_equal(plan.assignments[0], np.arange(ds.n))


def test_dirichlet_concentrates_at_large_beta():
    ds = make_synthetic_dataset(5, 2, 200, 0.5, seed=0)
    for seed in range(10):
        plan = partition_dirichlet(ds, 4, 1e6, seed=seed)
        for c in range(5):
            shares = np.array([np.sum(ds.labels[a] == c) for a in plan.assignments]) / 200
            assert np.all(np.abs(shares - 0.25) <= 0.2 * 0.25)


def test_dirichlet_min_samples_and_determinism():
    ds = make_synthetic_dataset(10, 2, 200, 0.5, seed=0)
    plan = partition_dirichlet(ds, 20, 0.1, seed=1, min_samples=10)
    _check_disjoint_cover(ds, plan)
    assert min(len(a) for a in plan.assignments) >= 10
    again = partition_dirichlet(ds, 20, 0.1, seed=1, min_samples=10)
    assert all(np.array_equal(x, y) for x, y in zip(plan.assignments, again.assignments))
    assert plan.class_sets == again.class_sets


def test_dirichlet_gives_up():
    ds = make_synthetic_dataset(2, 2, 3, 0.5, seed=0)
    with pytest.raises(PartitionError):
        partition_dirichlet(ds, 10, 0.1, seed=0, min_samples=5, max_tries=5)
    with pytest.raises(PartitionError):
        partition_dirichlet(ds, 2, 0.0, seed=0)


@pytest.mark.parametrize("n", [8, 12, 40, 100, 1000])
def test_split_ratio(n):
    tr, te = train_test_split(np.arange(n), seed=0, client=0)
    assert len(te) == n // 4
    assert 2.9 <= len(tr) / len(te) <= 3.1
    assert len(np.intersect1d(tr, te)) == 0


def test_split_floor_rule_for_awkward_sizes():
    # floor(n/4) test samples is as close to 3:1 as integers allow, yet the
    # ratio can still leave [2.9, 3.1] for sizes such as 9 and 10
    for n in (9, 10):
        tr, te = train_test_split(np.arange(n), seed=0, client=0)
        assert (len(tr), len(te)) == (n - 2, 2)
