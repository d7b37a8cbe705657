import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from longtail_synergy import rsg as R


def make_centers(values, num_classes=1):
    """Centers from a (classes, K, C) nested list at 1x1 resolution."""
    t = torch.tensor(values, dtype=torch.float64)
    cc = R.ClassCenters(t.shape[0], t.shape[1], t.shape[2]).double()
    with torch.no_grad():
        cc.centers.copy_(t[..., None, None])
    return cc


def fmap(*vecs):
    return torch.tensor(vecs, dtype=torch.float64)[..., None, None]


def test_partition_geometric_mean():
    p = R.partition_classes([500, 299, 179, 107, 64, 38, 23, 13, 8, 5])
    assert p.rare == frozenset({5, 6, 7, 8, 9})
    assert p.rare | p.frequent == frozenset(range(10)) and not p.rare & p.frequent


def test_partition_fraction():
    p = R.partition_classes([10, 50, 30, 5], rule="fraction", rare_fraction=0.5)
    assert p.rare == frozenset({0, 3})


@given(st.lists(st.integers(1, 5000), min_size=2, max_size=30))
def test_partition_rare_below_frequent(counts):
    p = R.partition_classes(counts)
    if p.rare and p.frequent:
        assert max(counts[j] for j in p.rare) <= min(counts[j] for j in p.frequent)


def test_assign_single_center():
    a = R.assign_centers(fmap([1.0, 2.0]), torch.tensor([0]), make_centers([[[0.0, 0.0]]]))
    assert a.gamma.tolist() == [[1.0]] and a.nearest_index.tolist() == [0]


def test_assign_picks_matching_center():
    cc = make_centers([[[10.0, 0.0], [0.0, 10.0], [1.0, 1.0]]])
    a = R.assign_centers(fmap([1.0, 1.0]), torch.tensor([0]), cc)
    assert a.nearest_index.item() == 2 and a.gamma[0, 2] > 0.999


def test_assign_tie_goes_to_lowest_index():
    cc = make_centers([[[1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]]])
    a = R.assign_centers(fmap([0.0, 0.0]), torch.tensor([0]), cc)
    assert a.nearest_index.item() == 0
    assert a.gamma[0, 0].item() == a.gamma[0, 1].item()
    assert abs(a.gamma.sum().item() - 1) < 1e-12


def test_displacement_example_and_reconstruction():
    cc = make_centers([[[1.0, 0.0]]])
    x = fmap([3.0, 0.0])
    lab = torch.tensor([0])
    d = R.feature_displacement(x, lab, cc, R.assign_centers(x, lab, cc))
    assert d.fd.flatten().tolist() == [2.0, 0.0]
    assert torch.equal(d.fd + d.center, x)


def test_upsample_identity_and_mismatch():
    c = torch.randn(2, 3, 4, 2, 2)
    assert R.upsample(c, (2, 2)) is c
    assert R.upsample(c, (4, 4)).shape[-2:] == (4, 4)
    with pytest.raises(ValueError):
        R.upsample(c, (3, 3))


def test_pair_head_zero_init_and_symmetry():
    head = R.PairHead(4, 8)
    a, b = torch.randn(5, 4), torch.randn(5, 4)
    assert torch.all(head(a, b) == 0.5)
    torch.nn.init.normal_(head.fc2.weight)
    assert torch.equal(head(a, b), head(b, a))
    p = head(a * 100, b * -100)
    assert torch.all((p > 0) & (p < 1))


def test_vector_transform_identity_init():
    t = R.VectorTransform(3)
    z = torch.randn(2, 3, 4, 4)
    assert torch.allclose(t(z), z) and t(z).shape == z.shape


def _identity_generation(epoch, t_th=5):
    cc = make_centers([[[1.0, 0.0]], [[0.0, 0.0]]])
    transform = R.VectorTransform(2).double()
    part = R.RareFreqPartition(frozenset({1}), frozenset({0}), "manual")
    x = fmap([3.0, 0.0], [0.0, 5.0])
    y = torch.tensor([0, 1])
    return R.generate_rare_samples(x, y, cc, transform, part, epoch, t_th, torch.Generator().manual_seed(0)), x, y


def test_generation_example_two_five():
    res, x, y = _identity_generation(epoch=6)
    assert res.n_generated == 1
    assert res.features[2].flatten().tolist() == [2.0, 5.0]
    assert res.labels.tolist() == [0, 1, 1]


def test_generation_inactive_until_threshold():
    res, x, y = _identity_generation(epoch=5)
    assert res.n_generated == 0 and res.features is x and res.labels is y


def test_generation_without_rare_or_frequent():
    cc = make_centers([[[0.0]], [[0.0]]])
    part = R.RareFreqPartition(frozenset({1}), frozenset({0}), "manual")
    for labels in ([0, 0], [1, 1]):
        res = R.generate_rare_samples(fmap([1.0], [2.0]), torch.tensor(labels), cc, R.VectorTransform(1).double(),
                                      part, 3, 0)
        assert res.n_generated == 0


def test_generation_clone_when_freq_on_center():
    cc = make_centers([[[3.0, 0.0]], [[0.0, 0.0]]])
    part = R.RareFreqPartition(frozenset({1}), frozenset({0}), "manual")
    x = fmap([3.0, 0.0], [0.0, 5.0])
    res = R.generate_rare_samples(x, torch.tensor([0, 1]), cc, R.VectorTransform(2).double(), part, 2, 1)
    assert torch.equal(res.features[2], x[1])


@given(st.integers(0, 1000), st.integers(0, 4))
def test_generation_labels_rare_and_count(seed, epoch):
    g = torch.Generator().manual_seed(seed)
    labels = torch.randint(0, 4, (12,), generator=g)
    cc = R.ClassCenters(4, 2, 3)
    part = R.partition_classes([100, 50, 10, 5])
    res = R.generate_rare_samples(torch.randn(12, 3, 1, 1, generator=g), labels, cc, R.VectorTransform(3), part,
                                  epoch, 2, g)
    n_rare = int(sum(int(l) in part.rare for l in labels))
    has_freq = any(int(l) in part.frequent for l in labels)
    expected = n_rare if (epoch > 2 and has_freq) else 0
    assert res.n_generated == expected
    assert all(int(l) in part.rare for l in res.labels[12:])
    assert torch.equal(res.labels[:12], labels)


def _leaves(t):
    seen, stack, out = set(), [t.grad_fn], []
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        if hasattr(fn, "variable"):
            out.append(fn.variable)
        stack.extend(f for f, _ in fn.next_functions)
    return [id(v) for v in out]


def test_transform_trained_only_through_mv_inputs():
    cc = make_centers([[[1.0, 0.0]], [[0.0, 0.0]]])
    transform = R.VectorTransform(2).double()
    part = R.RareFreqPartition(frozenset({1}), frozenset({0}), "manual")
    res = R.generate_rare_samples(fmap([3.0, 0.0], [0.0, 5.0]), torch.tensor([0, 1]), cc, transform, part, 1, 0)
    assert not res.features.requires_grad or res.features.grad_fn is None or \
        id(transform.conv.weight) not in _leaves(res.features)
    res.mv_inputs.transformed.sum().backward()
    assert transform.conv.weight.grad.abs().sum() > 0


def test_kmeans_initialisation_is_seeded():
    feats = torch.randn(60, 4, 1, 1)
    labels = torch.arange(60) % 3
    a, b = R.ClassCenters(3, 2, 4), R.ClassCenters(3, 2, 4)
    a.init_from_features(feats, labels, seed=7)
    b.init_from_features(feats, labels, seed=7)
    assert bool(a.initialized) and torch.equal(a.centers, b.centers)
    # every center lies within its class's bounding box
    for c in range(3):
        m = feats[labels == c].flatten(1)
        cen = a.centers[c].flatten(1)
        assert torch.all(cen >= m.min(0).values - 1e-6) and torch.all(cen <= m.max(0).values + 1e-6)


def test_rsg_block_phase_switch():
    part = R.partition_classes([40, 20, 4])
    block = R.RSGBlock(3, 4, part, k=2)
    x = torch.randn(8, 4, 1, 1)
    y = torch.tensor([0, 0, 0, 1, 1, 2, 2, 0])
    out, lab, aux = block(x, y, epoch=1, t_th=1)
    assert out.shape[0] == 8 and aux.n_generated == 0 and aux.mv_inputs is None
    assert aux.pair_probs.shape == (4,)
    out, lab, aux = block(x, y, epoch=2, t_th=1, generator=torch.Generator().manual_seed(0))
    assert aux.n_generated == 2 and out.shape[0] == 10 and lab[8:].tolist() == [2, 2]
    assert aux.features.shape[0] == 10 and aux.mv_pair_probs.shape == (2,)
