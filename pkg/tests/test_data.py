import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from longtail_synergy import data as D

TABLE2_COUNTS = [5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50]


def test_exponential_counts_table2():
    assert D.exponential_counts(5000, 100, 10) == TABLE2_COUNTS


def test_exponential_counts_small_cases():
    assert D.exponential_counts(5000, 1, 10) == [5000] * 10
    assert D.exponential_counts(100, 4, 3) == [100, 50, 25]
    assert D.exponential_counts(7, 3, 1) == [7]


@pytest.mark.parametrize("args", [(100, 0.5, 3), (10, 20, 3), (100, 4, 0), (0, 1, 2)])
def test_exponential_counts_rejects(args):
    with pytest.raises(ValueError):
        D.exponential_counts(*args)


@given(st.integers(1, 20000), st.floats(1, 200), st.integers(2, 120))
def test_counts_invariants(n_max, beta, k):
    if n_max // beta < 1:
        return
    c = D.exponential_counts(n_max, beta, k)
    assert len(c) == k and c[0] == n_max
    assert all(a >= b for a, b in zip(c, c[1:]))
    assert c[-1] == int(np.floor(n_max / beta))


def _source(n_per=60, k=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_per * k, 3)).astype(np.float32)
    y = np.repeat(np.arange(k), n_per)
    return D.DatasetSplit(x, y, k)


def test_longtail_split_sizes_and_determinism():
    src = _source()
    spec = D.LongTailSpec.build(60, 10, 4)
    a = D.build_longtail_split(src, spec, seed=3)
    b = D.build_longtail_split(src, spec, seed=3)
    assert a.class_counts() == list(spec.counts)
    np.testing.assert_array_equal(a.ids, b.ids)
    c = D.build_longtail_split(src, spec, seed=4)
    assert not np.array_equal(a.ids, c.ids)


def test_longtail_split_beta_one_is_whole_source():
    src = _source()
    split = D.build_longtail_split(src, D.LongTailSpec.build(60, 1, 4), seed=0)
    assert len(split) == len(src)


def test_longtail_split_class_order():
    src = _source()
    spec = D.LongTailSpec.build(60, 10, 4)
    split = D.build_longtail_split(src, spec, seed=0, class_order=[3, 2, 1, 0])
    assert split.class_counts() == list(spec.counts)[::-1]


def test_longtail_split_names_short_class():
    src = _source(n_per=60)
    keep = np.flatnonzero((src.y != 2) | (np.arange(len(src)) % 60 < 10))
    short = src.subset(keep)
    with pytest.raises(ValueError, match="class 2"):
        D.build_longtail_split(short, D.LongTailSpec.build(60, 2, 4), seed=0)


def test_group_classes():
    g = D.group_classes([150, 50, 10])
    assert (g.many, g.medium, g.few) == ((0,), (1,), (2,))
    g = D.group_classes([100, 20])
    assert g.many == () and g.medium == (0, 1) and g.few == ()
    g = D.group_classes(TABLE2_COUNTS)
    assert g.many == tuple(range(8)) and g.medium == (8, 9) and g.few == ()


def test_synthetic_task_shapes_and_determinism():
    cfg = D.SyntheticTaskConfig(num_classes=5, feature_dim=3, n_max=100, beta=10, test_per_class=20)
    tr, te = D.synth_gaussian_task(cfg)
    tr2, _ = D.synth_gaussian_task(cfg)
    assert tr.class_counts() == list(cfg.spec.counts)
    assert te.class_counts() == [20] * 5
    np.testing.assert_array_equal(tr.x, tr2.x)
    means = D.class_means(cfg)
    dists = np.linalg.norm(means[:, None] - means[None], axis=-1)
    assert np.min(dists + np.eye(5) * 1e9) == pytest.approx(cfg.class_separation)


def test_synthetic_simplex_layout():
    cfg = D.SyntheticTaskConfig(num_classes=4, feature_dim=6, class_separation=2.0)
    m = D.class_means(cfg)
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)
    np.testing.assert_allclose(d[~np.eye(4, dtype=bool)], 2.0)


def test_batch_indices_cover_and_drop_singleton():
    batches = D.batch_indices(65, 32, seed=0, epoch=0)
    assert [len(b) for b in batches] == [32, 32]
    batches = D.batch_indices(66, 32, seed=0, epoch=1)
    assert sorted(np.concatenate(batches).tolist()) == list(range(66))
    assert not np.array_equal(D.batch_indices(66, 32, 0, 1)[0], D.batch_indices(66, 32, 0, 2)[0])


def test_augment_preserves_shape():
    x = np.arange(2 * 3 * 8 * 8, dtype=np.uint8).reshape(2, 3, 8, 8)
    out = D.augment_images(x, np.random.default_rng(0))
    assert out.shape == x.shape and out.dtype == x.dtype


def _write_cifar10_bin(root, n=20):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(n):
        recs.append(np.concatenate([[i % 10], rng.integers(0, 256, 3072)]).astype(np.uint8))
    blob = np.stack(recs).tobytes()
    for k in range(1, 6):
        (root / f"data_batch_{k}.bin").write_bytes(blob)
    (root / "test_batch.bin").write_bytes(blob)
    return np.stack(recs)


def test_load_cifar10_binary(tmp_path):
    recs = _write_cifar10_bin(tmp_path)
    train = D.load_cifar(tmp_path, "cifar10", train=True)
    test = D.load_cifar(tmp_path, "cifar10", train=False)
    assert train.x.shape == (100, 3, 32, 32) and len(test) == 20
    np.testing.assert_array_equal(test.y, recs[:, 0])
    np.testing.assert_array_equal(test.x[0].reshape(-1), recs[0, 1:])


def test_load_cifar100_binary_uses_fine_label(tmp_path):
    rng = np.random.default_rng(0)
    recs = np.stack([np.concatenate([[i % 20, (i * 7) % 100], rng.integers(0, 256, 3072)]) for i in range(10)])
    recs = recs.astype(np.uint8)
    (tmp_path / "train.bin").write_bytes(recs.tobytes())
    split = D.load_cifar(tmp_path, "cifar100", train=True)
    np.testing.assert_array_equal(split.y, recs[:, 1])
    assert split.num_classes == 100


def test_load_array_and_folder(tmp_path):
    x = np.random.default_rng(0).standard_normal((6, 4)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1, 2])
    np.save(tmp_path / "x.npy", x)
    np.save(tmp_path / "y.npy", y)
    split = D.load_array_dataset(tmp_path / "x.npy", tmp_path / "y.npy")
    assert split.num_classes == 3 and split.class_counts() == [2, 2, 2]
    for c in ("cat", "dog"):
        (tmp_path / "imgs" / c).mkdir(parents=True)
        for i in range(2):
            np.save(tmp_path / "imgs" / c / f"{i}.npy", np.full((3, 4, 4), i, dtype=np.uint8))
    folder = D.load_folder_dataset(tmp_path / "imgs")
    assert folder.class_counts() == [2, 2] and folder.x.shape == (4, 3, 4, 4)


def test_manifest_round_trip(tmp_path):
    src = _source()
    spec = D.LongTailSpec.build(60, 10, 4)
    split = D.build_longtail_split(src, spec, seed=1)
    m = D.manifest_for(split, seed=1, source={"task": "unit"})
    m.save(tmp_path / "m.json")
    again = D.SplitManifest.load(tmp_path / "m.json")
    rebuilt = D.apply_manifest(src, again)
    np.testing.assert_array_equal(rebuilt.ids, split.ids)
    assert again.spec == spec
    first = (tmp_path / "m.json").read_bytes()
    again.save(tmp_path / "m.json")
    assert (tmp_path / "m.json").read_bytes() == first
    assert json.loads(first)["format_version"] == D.MANIFEST_VERSION


def test_manifest_rejects_unknown_version(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(ValueError, match="version"):
        D.SplitManifest.load(tmp_path / "m.json")
