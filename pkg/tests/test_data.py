import json
import warnings

import numpy as np
import pytest

from fedghn.data import (Dataset, Shard, SplitSpec, accuracy, load_cifar10,
                         mean_auc, save_cifar10, split, synth_classify,
                         synth_multilabel, train_test_split,
                         write_split_manifest)
from fedghn.errors import (DegenerateLabel, DegenerateLabelWarning,
                           FileSizeError, LabelError, ShapeError,
                           TooFewSamples)


def _tiny_cifar_like(n=20, seed=0):
    rng = np.random.default_rng(seed)
    images = (rng.integers(0, 256, (n, 3, 32, 32)) / 255.0).astype(np.float64)
    labels = rng.integers(0, 10, n)
    return Dataset(images, labels, "single_label", 10)


# ---------------------------------------------------------------- cifar io


def test_cifar_round_trip_is_byte_identical(tmp_path):
    ds = _tiny_cifar_like()
    path = tmp_path / "batch.bin"
    save_cifar10(ds, path)
    first = path.read_bytes()
    back = load_cifar10(path)
    assert np.array_equal(back.labels, ds.labels)
    assert np.allclose(back.images, ds.images, atol=1e-12)
    again = tmp_path / "again.bin"
    save_cifar10(back, again)
    assert again.read_bytes() == first


def test_cifar_loader_rejects_bad_record_size(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(b"\x00" * (3073 * 2 + 17))
    with pytest.raises(FileSizeError):
        load_cifar10(path)


def test_cifar_loader_rejects_label_out_of_range(tmp_path):
    record = bytes([11]) + b"\x00" * 3072
    path = tmp_path / "badlabel.bin"
    path.write_bytes(record)
    with pytest.raises(LabelError):
        load_cifar10(path)


def test_cifar_loader_reads_directory_of_batches(tmp_path):
    a = _tiny_cifar_like(8, seed=1)
    b = _tiny_cifar_like(12, seed=2)
    save_cifar10(a, tmp_path / "data_batch_1.bin")
    save_cifar10(b, tmp_path / "data_batch_2.bin")
    merged = load_cifar10(tmp_path)
    assert merged.n == 20


# ---------------------------------------------------------------- synthetic data


def test_synth_classify_is_balanced_and_bounded():
    ds = synth_classify(100, 10, shape=(3, 16, 16), margin=1.0, seed=0)
    assert ds.n == 100
    counts = np.bincount(ds.labels, minlength=10)
    assert np.array_equal(counts, np.full(10, 10))
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.task == "single_label"


def test_synth_classify_margin_controls_noise():
    # same seed, higher margin -> images closer to their class template
    lo = synth_classify(200, 4, margin=0.5, seed=3)
    hi = synth_classify(200, 4, margin=4.0, seed=3)

    def template_distance(ds):
        dists = []
        for c in range(4):
            cls = ds.images[ds.labels == c]
            dists.append(np.mean(np.std(cls, axis=0)))
        return np.mean(dists)

    assert template_distance(hi) < template_distance(lo)


def test_synth_classify_deterministic_in_seed():
    a = synth_classify(40, 5, seed=9)
    b = synth_classify(40, 5, seed=9)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_synth_multilabel_shapes_and_task():
    ds = synth_multilabel(50, 14, shape=(3, 16, 16), seed=1)
    assert ds.labels.shape == (50, 14)
    assert set(np.unique(ds.labels)) <= {0.0, 1.0}
    assert ds.task == "multi_label"


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((4, 3, 8)), np.zeros(4, dtype=int), "single_label", 10)
    with pytest.raises(ValueError):
        Dataset(np.zeros((4, 3, 8, 8)), np.full(4, 11), "single_label", 10)
    with pytest.raises(ValueError):
        Dataset(np.zeros((4, 3, 8, 8)), np.zeros((4, 3)), "multi_label", 10)


# ---------------------------------------------------------------- splits


def test_train_test_split_is_disjoint_and_exhaustive():
    ds = synth_classify(100, 5, seed=2)
    train, test = train_test_split(ds, 30, seed=4)
    assert train.n == 70 and test.n == 30
    joined = np.concatenate([np.sort(train.images.sum(axis=(1, 2, 3))),
                             np.sort(test.images.sum(axis=(1, 2, 3)))])
    assert np.allclose(np.sort(joined), np.sort(ds.images.sum(axis=(1, 2, 3))))


def test_uniform_split_covers_all_picked_samples():
    ds = synth_classify(100, 5, seed=0)
    shards = split(ds, SplitSpec("uniform", clients=4, data_fraction=1.0, seed=1))
    assert len(shards) == 4
    sizes = [s.n for s in shards]
    assert sum(sizes) == 100
    all_idx = np.concatenate([s.indices for s in shards])
    assert len(np.unique(all_idx)) == 100


def test_uniform_split_respects_data_fraction():
    ds = synth_classify(100, 5, seed=0)
    shards = split(ds, SplitSpec("uniform", clients=2, data_fraction=0.25, seed=1))
    assert sum(s.n for s in shards) == 25


def test_uniform_split_too_few_samples_raises():
    ds = synth_classify(3, 3, seed=0)
    with pytest.raises(TooFewSamples):
        split(ds, SplitSpec("uniform", clients=8, data_fraction=0.1, seed=0))


def test_dirichlet_split_high_alpha_is_nearly_proportional():
    ds = synth_classify(10000, 10, seed=5)
    shards = split(ds, SplitSpec("dirichlet", clients=4, data_fraction=1.0,
                                 alpha=100.0, seed=7))
    for shard in shards:
        labels = shard.labels
        props = np.bincount(labels, minlength=10) / len(labels)
        assert np.all(np.abs(props - 0.1) <= 0.05)


def test_dirichlet_split_low_alpha_concentrates():
    ds = synth_classify(6000, 10, seed=6)
    dominant = 0
    for seed in range(3):
        shards = split(ds, SplitSpec("dirichlet", clients=4, data_fraction=1.0,
                                     alpha=0.1, seed=seed))
        for shard in shards:
            props = np.bincount(shard.labels, minlength=10) / shard.n
            if props.max() > 0.5:
                dominant += 1
                break
    assert dominant >= 2


def test_dirichlet_split_carries_test_proportions():
    ds = synth_classify(2000, 10, seed=8)
    test_ds = synth_classify(1000, 10, seed=9)
    train_shards, test_shards = split(
        ds, SplitSpec("dirichlet", clients=4, data_fraction=1.0, alpha=0.5, seed=3),
        test_dataset=test_ds)
    assert len(train_shards) == len(test_shards) == 4
    for tr, te in zip(train_shards, test_shards):
        p_tr = np.bincount(tr.labels, minlength=10) / tr.n
        p_te = np.bincount(te.labels, minlength=10) / te.n
        # same Dirichlet draw governs both sides
        assert np.abs(p_tr - p_te).max() < 0.15


def test_split_is_deterministic_in_seed():
    ds = synth_classify(500, 10, seed=1)
    spec = SplitSpec("dirichlet", clients=3, data_fraction=0.8, alpha=0.3, seed=42)
    a = split(ds, spec)
    b = split(ds, spec)
    for x, y in zip(a, b):
        assert np.array_equal(x.indices, y.indices)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec("uniform", clients=0, data_fraction=1.0, seed=0)
    with pytest.raises(ValueError):
        SplitSpec("uniform", clients=2, data_fraction=0.0, seed=0)
    with pytest.raises(ValueError):
        SplitSpec("dirichlet", clients=2, data_fraction=1.0, alpha=0.0, seed=0)
    with pytest.raises(ValueError):
        SplitSpec("zipf", clients=2, data_fraction=1.0, seed=0)


def test_write_split_manifest(tmp_path):
    ds = synth_classify(60, 3, seed=0)
    shards = split(ds, SplitSpec("uniform", clients=3, data_fraction=1.0, seed=0))
    path = tmp_path / "manifest.json"
    write_split_manifest(shards, path)
    doc = json.loads(path.read_text())
    assert len(doc["clients"]) == 3
    assert sum(len(entry["indices"]) for entry in doc["clients"]) == 60


# ---------------------------------------------------------------- metrics


def test_accuracy_counts_argmax_matches():
    logits = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    labels = np.array([0, 1, 1, 1])
    assert accuracy(logits, labels) == 0.75


def test_accuracy_breaks_ties_toward_lowest_class():
    logits = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert accuracy(logits, np.array([0, 0])) == 1.0
    assert accuracy(logits, np.array([1, 1])) == 0.0


def test_accuracy_shape_mismatch():
    with pytest.raises(ShapeError):
        accuracy(np.zeros((3, 2)), np.zeros(4, dtype=int))


def test_mean_auc_hand_case_is_exactly_three_quarters():
    scores = np.array([[0.1], [0.4], [0.35], [0.8]])
    labels = np.array([[0], [0], [1], [1]])
    assert mean_auc(scores, labels) == 0.75


def test_mean_auc_handles_ties_with_average_ranks():
    scores = np.array([[0.5], [0.5], [0.5], [0.5]])
    labels = np.array([[0], [1], [0], [1]])
    assert mean_auc(scores, labels) == 0.5


def test_mean_auc_perfect_and_inverted():
    scores = np.array([[0.1], [0.2], [0.8], [0.9]])
    labels = np.array([[0], [0], [1], [1]])
    assert mean_auc(scores, labels) == 1.0
    assert mean_auc(scores, 1 - labels) == 0.0


def test_mean_auc_skips_single_class_columns_with_warning():
    scores = np.random.default_rng(0).uniform(size=(6, 2))
    labels = np.zeros((6, 2))
    labels[:3, 0] = 1.0  # column 1 stays single-class
    with pytest.warns(DegenerateLabelWarning):
        value = mean_auc(scores, labels)
    assert 0.0 <= value <= 1.0


def test_mean_auc_all_degenerate_raises():
    scores = np.ones((4, 2))
    labels = np.ones((4, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(DegenerateLabel):
            mean_auc(scores, labels)


def test_shard_batch_returns_positions():
    ds = synth_classify(20, 4, seed=0)
    shard = Shard(ds, np.arange(10))
    xb, yb = shard.batch(np.array([0, 3, 7]))
    assert xb.shape == (3, 3, 16, 16)
    assert np.array_equal(yb, ds.labels[[0, 3, 7]])
