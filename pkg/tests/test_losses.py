import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from longtail_synergy import losses as L
from conftest import central_diff, rel_err


def unit(rng, b, d):
    z = rng.standard_normal((b, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# --- SCL -------------------------------------------------------------------


def test_scl_three_sample_oracle():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    value, _ = L.scl_loss(z, [0, 0, 1], L.SCLConfig(tau=1.0))
    assert value == pytest.approx(math.log(math.e + 1) - 1, abs=1e-12)
    assert value == pytest.approx(0.31326, abs=1e-5)


def test_scl_identical_pair_is_zero():
    value, grad = L.scl_loss(np.array([[0.6, 0.8], [0.6, 0.8]]), [3, 3], L.SCLConfig(1.0))
    assert value == pytest.approx(0.0, abs=1e-15)


def test_scl_no_positives_is_zero_with_zero_grad(rng):
    value, grad = L.scl_loss(unit(rng, 4, 3), [0, 1, 2, 3])
    assert value == 0.0 and not grad.any()


def test_scl_singleton_anchor_contributes_nothing(rng):
    z = unit(rng, 3, 4)
    with_single, _ = L.scl_loss(np.vstack([z[:2], z[2:]]), [0, 0, 1], L.SCLConfig(0.5))
    # the singleton still sits in the pair's denominators, so compare anchors directly
    sim = z @ z.T / 0.5
    anchor0 = np.log(np.exp(sim[0, 1]) + np.exp(sim[0, 2])) - sim[0, 1]
    anchor1 = np.log(np.exp(sim[1, 0]) + np.exp(sim[1, 2])) - sim[1, 0]
    assert with_single == pytest.approx((anchor0 + anchor1) / 2, rel=1e-12)


@pytest.mark.parametrize("bad", [np.zeros((1, 3)), np.array([[np.nan, 0.0], [1.0, 0.0]])])
def test_scl_rejects(bad):
    with pytest.raises(ValueError):
        L.scl_loss(bad, np.zeros(len(bad), dtype=int))


@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(2, 8), st.floats(0.05, 2.0))
def test_scl_nonnegative_and_permutation_invariant(seed, b, d, tau):
    rng = np.random.default_rng(seed)
    z = unit(rng, b, d)
    y = rng.integers(0, 3, size=b)
    v, g = L.scl_loss(z, y, L.SCLConfig(tau))
    assert v >= -1e-12
    perm = rng.permutation(b)
    v2, g2 = L.scl_loss(z[perm], y[perm], L.SCLConfig(tau))
    assert abs(v - v2) <= 1e-12
    np.testing.assert_allclose(g[perm], g2, atol=1e-12)


@given(st.integers(0, 10_000))
def test_scl_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = unit(rng, 6, 4)
    y = rng.integers(0, 2, size=6)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert L.scl_loss(z, y)[0] == pytest.approx(L.scl_loss(z @ q, y)[0], abs=1e-10)


# --- LDAM ------------------------------------------------------------------


def test_ldam_margins_example():
    m = L.ldam_margins([5000, 50], 0.5)
    assert m.deltas[1] == pytest.approx(0.5)
    assert m.deltas[0] == pytest.approx(0.5 * 5000 ** -0.25 / 50 ** -0.25, rel=1e-12)
    assert m.deltas[0] == pytest.approx(0.15811, abs=1e-5)
    assert L.ldam_margins([7, 7, 7]).deltas == (0.5, 0.5, 0.5)
    assert (m.max_m, m.s) == (0.5, 30.0)


@given(st.lists(st.integers(1, 10_000), min_size=2, max_size=20, unique=True))
def test_ldam_margins_order_reverses_counts(counts):
    d = np.array(L.ldam_margins(counts).deltas)
    assert d.max() == pytest.approx(0.5)
    assert list(np.argsort(d)) == list(np.argsort(counts)[::-1])


def test_ldam_closed_forms():
    zero = L.MarginTable((0.0, 0.0), 0.5, 1.0)
    assert L.ldam_loss([[0.0, 0.0]], [0], zero)[0] == pytest.approx(math.log(2), abs=1e-12)
    m = L.MarginTable((0.5, 0.0), 0.5, 1.0)
    assert L.ldam_loss([[2.0, 0.0]], [0], m)[0] == pytest.approx(math.log1p(math.exp(-1.5)), abs=1e-12)
    assert L.ldam_loss([[2.0, 0.0]], [0], m)[0] == pytest.approx(0.201413, abs=1e-6)


def test_ldam_monotone_in_true_margin(rng):
    z = np.clip(rng.standard_normal((4, 3)) * 0.4, -1, 1)
    y = np.array([0, 1, 2, 0])
    vals = [L.ldam_loss(z, y, L.MarginTable((d, 0.1, 0.2), 0.5, 30))[0] for d in (0.0, 0.2, 0.4)]
    assert vals[0] < vals[1] < vals[2]


def test_ldam_errors():
    m = L.MarginTable((0.1, 0.2), 0.2, 1.0)
    with pytest.raises(ValueError, match="range"):
        L.ldam_loss([[0.0, 0.0]], [2], m)
    with pytest.raises(ValueError, match="margins"):
        L.ldam_loss([[0.0, 0.0, 0.0]], [0], m)


def test_ldam_zero_margin_matches_cross_entropy(rng):
    for _ in range(200):
        b, c = rng.integers(1, 9), rng.integers(2, 12)
        z = rng.standard_normal((b, c)) * 3
        y = rng.integers(0, c, size=b)
        ce = torch.nn.functional.cross_entropy(torch.tensor(z), torch.tensor(y)).item()
        assert abs(L.ldam_loss(z, y, L.MarginTable((0.0,) * c, 0.5, 1.0))[0] - ce) < 1e-9


# --- CESC ------------------------------------------------------------------


def test_cesc_exact_center_and_certain_pair_is_zero():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    centers = np.stack([np.zeros((1, 2, 2)), x[0]])[None]  # (1 class, K=2, C, h, w)
    v, _ = L.cesc_loss(x, [0], centers, [[0.0, 1.0]], [1.0], [1.0], epoch=0, t_th=1)
    assert v == 0.0


def test_cesc_first_term_is_summed_squared_distance():
    x = np.zeros((1, 2, 2, 2))
    centers = np.full((1, 1, 2, 2, 2), 1.5)
    v, _ = L.cesc_loss(x, [0], centers, [[1.0]], [], [], epoch=0, t_th=0)
    assert v == pytest.approx(8 * 1.5 ** 2)


def test_cesc_center_upsampling():
    x = np.ones((1, 1, 4, 4))
    centers = np.zeros((1, 1, 1, 2, 2))
    v, g = L.cesc_loss(x, [0], centers, [[1.0]], [], [], 0, 0)
    assert v == pytest.approx(16.0)
    np.testing.assert_allclose(g["centers"], np.full((1, 1, 1, 2, 2), -8.0))


def test_cesc_pair_gradient_frozen_after_threshold(rng):
    x = rng.standard_normal((4, 2, 1, 1))
    centers = rng.standard_normal((2, 3, 2, 1, 1))
    gamma = rng.dirichlet(np.ones(3), size=4)
    args = (x, [0, 1, 0, 1], centers, gamma, [0.3, 0.8], [1.0, 0.0])
    v_a, g_a = L.cesc_loss(*args, epoch=5, t_th=5)
    v_b, g_b = L.cesc_loss(*args, epoch=6, t_th=5)
    assert v_a == v_b
    assert g_a["pair_probs"].any() and not g_b["pair_probs"].any()


@pytest.mark.parametrize("probs,targets", [([1.2], [1.0]), ([0.0], [1.0]), ([1.0], [0.0])])
def test_cesc_rejects_bad_pair_probs(probs, targets):
    with pytest.raises(ValueError):
        L.cesc_loss(np.zeros((1, 1, 1, 1)), [0], np.zeros((1, 1, 1, 1, 1)), [[1.0]], probs, targets, 0, 0)


def test_cesc_rejects_unnormalised_gamma():
    with pytest.raises(ValueError, match="gamma"):
        L.cesc_loss(np.zeros((1, 1, 1, 1)), [0], np.zeros((1, 2, 1, 1, 1)), [[0.5, 0.4]], [], [], 0, 0)


# --- MV --------------------------------------------------------------------


def test_mv_aligned_is_zero():
    rare = np.array([[[[1.0]], [[2.0]]]])
    freq = np.array([[[[0.0]], [[math.sqrt(5) * 3]]]])
    tr = rare * 3
    v, _ = L.mv_loss(tr, rare, freq, [1.0])
    assert v == pytest.approx(0.0, abs=1e-12)


def test_mv_orthogonal_example():
    tr = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
    rare = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    freq = np.array([0.0, -1.0]).reshape(1, 2, 1, 1)
    assert L.mv_loss(tr, rare, freq, [1.0])[0] == pytest.approx(1.0, abs=1e-12)


def test_mv_zero_vectors_floor():
    z = np.zeros((1, 3, 2, 2))
    v, g = L.mv_loss(z, z, z, [1.0])
    assert v == 0.0 and all(np.isfinite(a).all() for a in g.values())


@given(hnp.arrays(np.float64, (2, 3, 2, 1), elements=st.floats(-5, 5)), st.floats(1e-6, 1.0))
def test_mv_nonnegative(arr, p):
    v, _ = L.mv_loss(arr, arr[::-1], arr * 0.5, [p, p])
    assert v >= -1e-12


def test_mv_errors():
    x = np.zeros((1, 2, 1, 1))
    with pytest.raises(ValueError):
        L.mv_loss(x, x, x, [0.0])
    with pytest.raises(ValueError):
        L.mv_loss(np.zeros((0, 2, 1, 1)), np.zeros((0, 2, 1, 1)), np.zeros((0, 2, 1, 1)), [])


# --- gradients vs central differences --------------------------------------


def test_scl_gradient_fd(rng):
    for _ in range(5):
        z = rng.standard_normal((8, 6))
        y = rng.integers(0, 3, size=8)
        _, g = L.scl_loss(z, y, L.SCLConfig(0.3))
        assert rel_err(g, central_diff(lambda a: L.scl_loss(a, y, L.SCLConfig(0.3))[0], z)) < 1e-4


def test_ldam_gradient_fd(rng):
    m = L.ldam_margins([50, 20, 5, 2], 0.5, 30)
    for _ in range(5):
        z = np.clip(rng.standard_normal((8, 4)) * 0.3, -1, 1)
        y = rng.integers(0, 4, size=8)
        _, g = L.ldam_loss(z, y, m)
        assert rel_err(g, central_diff(lambda a: L.ldam_loss(a, y, m)[0], z)) < 1e-4


def test_cesc_gradient_fd(rng):
    b, c, k = 6, 3, 2
    x = rng.standard_normal((b, c, 2, 2))
    y = rng.integers(0, 2, size=b)
    cen = rng.standard_normal((2, k, c, 1, 1))
    gam = rng.dirichlet(np.ones(k), size=b)
    p = rng.uniform(0.1, 0.9, size=3)
    t = np.array([1.0, 0.0, 1.0])

    def f(**kw):
        a = dict(feature_maps=x, centers=cen, gamma=gam, pair_probs=p)
        a.update(kw)
        return L.cesc_loss(a["feature_maps"], y, a["centers"], a["gamma"], a["pair_probs"], t, 0, 1)[0]

    _, g = L.cesc_loss(x, y, cen, gam, p, t, 0, 1)
    assert rel_err(g["features"], central_diff(lambda a: f(feature_maps=a), x)) < 1e-4
    assert rel_err(g["centers"], central_diff(lambda a: f(centers=a), cen)) < 1e-4
    # gamma enters linearly; perturb entries freely (bypass the row-sum check)
    dist = ((x[:, None] - np.repeat(np.repeat(cen, 2, -2), 2, -1)[y]) ** 2).reshape(b, k, -1).sum(-1) / b
    np.testing.assert_allclose(g["gamma"], dist, rtol=1e-12)
    assert rel_err(g["pair_probs"], central_diff(lambda a: f(pair_probs=a), p)) < 1e-4


def test_mv_gradient_fd(rng):
    n, c = 3, 4
    tr, ra, fr = (rng.standard_normal((n, c, 2, 1)) for _ in range(3))
    p = rng.uniform(0.2, 0.9, size=n)
    _, g = L.mv_loss(tr, ra, fr, p)
    assert rel_err(g["transformed"], central_diff(lambda a: L.mv_loss(a, ra, fr, p)[0], tr)) < 1e-4
    assert rel_err(g["rare"], central_diff(lambda a: L.mv_loss(tr, a, fr, p)[0], ra)) < 1e-4
    assert rel_err(g["freq"], central_diff(lambda a: L.mv_loss(tr, ra, a, p)[0], fr)) < 1e-4
    assert rel_err(g["pair_probs"], central_diff(lambda a: L.mv_loss(tr, ra, fr, a)[0], p)) < 1e-4


# --- torch wrappers and total ----------------------------------------------


def test_torch_wrappers_match_numpy(rng):
    z = torch.tensor(unit(rng, 6, 4), requires_grad=True)
    y = torch.tensor([0, 1, 0, 1, 2, 2])
    L.scl_loss_t(z, y, 0.2).backward()
    np.testing.assert_allclose(z.grad.numpy(), L.scl_loss(z.detach().numpy(), y.numpy(), L.SCLConfig(0.2))[1])

    m = L.ldam_margins([10, 5, 2])
    logits = torch.tensor(np.clip(rng.standard_normal((6, 3)), -1, 1), requires_grad=True)
    v = L.ldam_loss_t(logits, y, m)
    v.backward()
    assert v.item() == pytest.approx(L.ldam_loss(logits.detach().numpy(), y.numpy(), m)[0])
    assert logits.grad.abs().sum() > 0


def test_total_loss_phases():
    parts = {"scl": 2.0, "ldam": 1.0, "cesc": 100.0, "mv": 10.0}
    w = L.LossWeights(1.0, 0.5, 1e-5, 1e-6)
    assert L.total_loss(parts, w, epoch=6, t_th=5) == pytest.approx(2.50101, abs=1e-12)
    assert L.total_loss(parts, w, epoch=5, t_th=5) == pytest.approx(2.5 + 1e-3, abs=1e-12)
    assert L.total_loss(parts, L.LossWeights(1, 1, 0, 0), 9, 0) == 3.0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1e3))
def test_total_loss_linear_in_parts(a, b, scale):
    w = L.LossWeights(a, b)
    p1 = {"scl": 1.0, "ldam": 2.0, "cesc": 3.0, "mv": 4.0}
    p2 = {k: v * scale for k, v in p1.items()}
    assert L.total_loss(p2, w, 3, 1) == pytest.approx(scale * L.total_loss(p1, w, 3, 1), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("bad", [-1.0, float("nan"), float("inf")])
def test_loss_weights_validation(bad):
    with pytest.raises(ValueError):
        L.LossWeights(bad, 1.0)


def test_tuned_weights_table():
    assert L.TUNED_WEIGHTS[("cifar10-lt", 100)] == (6.299, 0.709)
    assert L.TUNED_WEIGHTS[("cifar100-lt", 50)] == (8.819, 0.315)
