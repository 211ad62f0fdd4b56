"""Dataset generation, CSV/binary loading, and partitioning behavior."""
import numpy as np
import pytest

from fedkd import io as fio
from fedkd.data import (
    Dataset,
    PartitionAssignment,
    PartitionSpec,
    generate_synthetic,
    generate_train_test,
    load_dataset,
    partition,
    partition_stats,
    save_dataset_csv,
)
from fedkd.federation import evaluate
from fedkd.nn import ArchDescriptor
from fedkd.teachers import pretrain_teacher


# --- synthetic generation ----------------------------------------------------


def test_generate_balanced_counts():
    ds = generate_synthetic(10, 100, 8, 5.0, seed=0)
    assert ds.n == 1000
    assert np.all(np.bincount(ds.labels) == 100)
    assert np.array_equal(ds.example_ids, np.arange(1000))


def test_generate_deterministic():
    a = generate_synthetic(5, 20, 4, 3.0, seed=7)
    b = generate_synthetic(5, 20, 4, 3.0, seed=7)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    c = generate_synthetic(5, 20, 4, 3.0, seed=8)
    assert not np.array_equal(a.features, c.features)


def test_generate_separable_fixture():
    # At wide separation a small centrally trained model nails the task.
    train, test = generate_train_test(10, 100, 50, 8, 10.0, seed=0)
    arch = ArchDescriptor(input_dim=8, hidden_dims=(32,), num_classes=10)
    teacher = pretrain_teacher(train, arch, epochs=50, lr=0.05, seed=1)
    assert evaluate(teacher.params, test) >= 0.95


def test_generate_train_test_ids_disjoint():
    train, test = generate_train_test(4, 30, 10, 3, 4.0, seed=1)
    assert train.n == 120 and test.n == 40
    assert np.intersect1d(train.example_ids, test.example_ids).size == 0
    assert np.all(np.bincount(test.labels) == 10)


def test_dataset_validation():
    with pytest.raises(ValueError, match="row counts"):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 2, np.arange(3))
    with pytest.raises(ValueError, match="out of range"):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), 2, np.arange(2))
    with pytest.raises(ValueError, match="unique"):
        Dataset(np.zeros((2, 2)), np.array([0, 1]), 2, np.array([3, 3]))


# --- CSV and binary loading ----------------------------------------------------


def test_csv_roundtrip(tmp_path):
    ds = generate_synthetic(3, 5, 4, 4.0, seed=2)
    path = tmp_path / "ds.csv"
    save_dataset_csv(ds, path)
    back = load_dataset(path, "csv")
    assert back.n == 15
    assert back.num_classes == 3
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.features, ds.features)


def test_csv_minimal_valid(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("label:2,x0,x1\n0,1.5,2.5\n1,0.25,-1.0\n1,3.0,4.0\n")
    ds = load_dataset(path, "csv")
    assert ds.n == 3
    assert ds.features[0, 1] == 2.5


def test_csv_malformed_number_names_row_and_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label:2,x0,x1\n0,1.0,2.0\n1,oops,3.0\n")
    with pytest.raises(ValueError, match=r"bad.csv:3: column 2"):
        load_dataset(path, "csv")


def test_csv_label_out_of_range(tmp_path):
    path = tmp_path / "range.csv"
    path.write_text("label:2,x0\n0,1.0\n2,1.0\n")
    with pytest.raises(ValueError, match="out of range"):
        load_dataset(path, "csv")


def test_csv_wrong_field_count(tmp_path):
    path = tmp_path / "fields.csv"
    path.write_text("label:2,x0,x1\n0,1.0\n")
    with pytest.raises(ValueError, match="expected 3 fields"):
        load_dataset(path, "csv")


def test_binary_roundtrip(tmp_path):
    ds = generate_synthetic(4, 6, 3, 4.0, seed=3)
    path = tmp_path / "ds.ffds"
    fio.write_dataset(ds, path)
    back = load_dataset(path, "binary")
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.example_ids, ds.example_ids)
    assert back.num_classes == ds.num_classes


# --- partitioning ---------------------------------------------------------------


@pytest.fixture(scope="module")
def balanced_ds():
    return generate_synthetic(10, 200, 8, 5.0, seed=0)


def test_iid_divisible_split():
    ds = generate_synthetic(2, 5, 3, 4.0, seed=0)  # 10 examples
    assignment = partition(ds, PartitionSpec(kind="iid", n_clients=2, seed=0))
    assert all(ix.size == 5 for ix in assignment.per_client)
    assert np.intersect1d(*assignment.per_client).size == 0


def test_iid_sizes_differ_at_most_one(balanced_ds):
    assignment = partition(balanced_ds, PartitionSpec(kind="iid", n_clients=7, seed=1))
    sizes = [ix.size for ix in assignment.per_client]
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == balanced_ds.n


def test_class_split_structure(balanced_ds):
    spec = PartitionSpec(kind="class_split", n_clients=10, seed=0, classes_per_client=2)
    assignment = partition(balanced_ds, spec)
    stats = partition_stats(balanced_ds, assignment)
    # every client sees exactly 2 classes, every class lives on exactly 2 clients
    assert all(int((row > 0).sum()) == 2 for row in stats.class_histograms)
    assert all(int(col) == 2 for col in (stats.class_histograms > 0).sum(axis=0))


def test_class_split_unsatisfiable():
    ds = generate_synthetic(10, 10, 2, 4.0, seed=0)
    with pytest.raises(ValueError, match="multiple"):
        partition(ds, PartitionSpec(kind="class_split", n_clients=3, seed=0, classes_per_client=2))


def test_dirichlet_huge_alpha_near_uniform(balanced_ds):
    for seed in range(3):
        spec = PartitionSpec(kind="dirichlet", n_clients=10, seed=seed, alpha=1e6)
        stats = partition_stats(balanced_ds, partition(balanced_ds, spec))
        proportions = stats.class_histograms / stats.sizes[:, None]
        assert np.abs(proportions - 0.1).max() <= 0.05


def test_partition_deterministic(balanced_ds):
    for kw in (
        dict(kind="iid"),
        dict(kind="dirichlet", alpha=0.1),
        dict(kind="class_split", classes_per_client=2),
    ):
        spec = PartitionSpec(n_clients=10, seed=5, **kw)
        a = partition(balanced_ds, spec)
        b = partition(balanced_ds, spec)
        assert all(np.array_equal(x, y) for x, y in zip(a.per_client, b.per_client))


def test_partition_validity_random_draws(balanced_ds):
    rng = np.random.default_rng(0)
    kinds = [
        dict(kind="iid"),
        dict(kind="dirichlet", alpha=0.01),
        dict(kind="dirichlet", alpha=0.5),
        dict(kind="class_split", classes_per_client=2),
    ]
    for _ in range(25):
        kw = kinds[int(rng.integers(0, len(kinds)))]
        spec = PartitionSpec(n_clients=10, seed=int(rng.integers(0, 10_000)), **kw)
        assignment = partition(balanced_ds, spec)
        assignment.validate(balanced_ds)  # disjoint, exhaustive, non-empty


def test_heterogeneity_monotone_in_alpha(balanced_ds):
    global_dist = np.bincount(balanced_ds.labels, minlength=10) / balanced_ds.n

    def mean_l1(alpha, seed):
        spec = PartitionSpec(kind="dirichlet", n_clients=10, seed=seed, alpha=alpha)
        stats = partition_stats(balanced_ds, partition(balanced_ds, spec))
        client_dist = stats.class_histograms / stats.sizes[:, None]
        return np.abs(client_dist - global_dist).sum(axis=1).mean()

    low = np.mean([mean_l1(0.01, s) for s in range(10)])
    high = np.mean([mean_l1(1.0, s) for s in range(10)])
    assert low > high


def test_partition_stats_sum_to_global(balanced_ds):
    spec = PartitionSpec(kind="dirichlet", n_clients=6, seed=2, alpha=0.1)
    stats = partition_stats(balanced_ds, partition(balanced_ds, spec))
    assert np.array_equal(
        stats.class_histograms.sum(axis=0), np.bincount(balanced_ds.labels, minlength=10)
    )
    assert np.array_equal(stats.class_histograms.sum(axis=1), stats.sizes)


def test_partition_spec_validation():
    with pytest.raises(ValueError, match="alpha"):
        PartitionSpec(kind="dirichlet", n_clients=3, alpha=0.0)
    with pytest.raises(ValueError, match="kind"):
        PartitionSpec(kind="sorted", n_clients=3)
    with pytest.raises(ValueError, match="classes_per_client"):
        PartitionSpec(kind="class_split", n_clients=3)


def test_assignment_validate_rejects_gaps():
    ds = generate_synthetic(2, 4, 2, 4.0, seed=0)
    bad = PartitionAssignment([np.array([0, 1]), np.array([2])])  # index 3..7 missing
    with pytest.raises(ValueError, match="disjoint cover"):
        bad.validate(ds)


def test_subset_preserves_ids(balanced_ds):
    sub = balanced_ds.subset(np.array([5, 17, 400]))
    assert np.array_equal(sub.example_ids, balanced_ds.example_ids[[5, 17, 400]])
    assert sub.num_classes == balanced_ds.num_classes


def test_partition_stats_index_out_of_range(balanced_ds):
    bad = PartitionAssignment([np.array([0, 1]), np.array([balanced_ds.n + 3])])
    with pytest.raises(ValueError, match="range"):
        partition_stats(balanced_ds, bad)
