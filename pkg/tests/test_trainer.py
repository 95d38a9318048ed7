import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from xbarnet.core_model import SynapseTemplate, binarize_crossbar
from xbarnet.dataio import ImageBatch, load_mnist
from xbarnet.errors import DivergenceError, NumericalError, XbarError
from xbarnet.topology import PRESETS, plan_from_spec
from xbarnet.trainer import (TrainConfig, TrainRun, backward, backward_from_outputs,
                             batch_indices, core_backward, core_forward_train, init_network,
                             load_checkpoint, loss, lr_at, make_batch, network_forward_train,
                             normal_cdf, save_checkpoint, sgd_update, train)

from conftest import needs_mnist

S1 = np.array([-1.0, 1.0])


# ---------------------------------------------------------------------------
# forward

def test_single_axon_example():
    mu, sigma, out = core_forward_train(np.array([0.5]), np.array([[1.0]]), np.array([2.0]),
                                        np.array([0.0]), 1e-3)
    assert mu[0] == pytest.approx(1.0)
    assert sigma[0] ** 2 == pytest.approx(1.0)
    assert out[0] == pytest.approx(0.8413447460685429, abs=1e-7)


def test_zero_input_gives_half():
    conn = np.ones((4, 3))
    mu, sigma, out = core_forward_train(np.zeros(4), conn, np.tile(S1, 2), np.zeros(3), 1e-3)
    assert np.all(mu == 0) and np.allclose(sigma, 1e-3) and np.allclose(out, 0.5)


@given(st.floats(-30, 30))
def test_cdf_symmetry_and_accuracy(z):
    assert abs(normal_cdf(z) - norm.cdf(z)) <= 1e-7
    assert normal_cdf(0.0) == 0.5


def test_forward_formulas_match_direct_sums(rng):
    x = rng.random(8)
    cbin = (rng.random((8, 4)) > 0.5).astype(float)
    s = np.array([-2.0, -1.0, 1.0, 2.0, -2.0, -1.0, 1.0, 2.0])
    b = rng.normal(size=4)
    mu, sigma, out = core_forward_train(x, cbin, s, b, 1e-3)
    for j in range(4):
        m = b[j] + sum(x[i] * cbin[i, j] * s[i] for i in range(8))
        v = sum(x[i] * cbin[i, j] * (1 - x[i] * cbin[i, j]) * s[i] ** 2 for i in range(8))
        sd = math.sqrt(max(v, 1e-6))
        assert mu[j] == pytest.approx(m)
        assert sigma[j] == pytest.approx(sd)
        assert out[j] == pytest.approx(norm.cdf(m / sd))


def test_limit_equivalence_binary_inputs(rng):
    x = (rng.random((200, 64)) > 0.5).astype(float)
    cbin = (rng.random((64, 32)) > 0.5).astype(float)
    s = np.tile(S1, 32)
    mu, sigma, out = core_forward_train(x, cbin, s, np.zeros(32), 1e-6)
    assert np.all(sigma == 1e-6)  # variance is exactly zero before flooring
    far = np.abs(mu) >= 1
    assert np.all(np.abs(out - (mu > 0))[far] < 1e-12)


def test_all_zero_image_scores(small_net):
    tr = network_forward_train(small_net, np.zeros((1, 784)), 1e-3)
    assert np.all(tr.layers[0].out == 0.5)
    for lt in tr.layers:
        assert np.all(lt.sigma >= 1e-3) and np.all((lt.out > 0) & (lt.out < 1))
    # with an empty output crossbar the constant 0.5 reaches the readout unchanged
    small_net.c[1][:] = 0.0
    tr = network_forward_train(small_net, np.zeros((1, 784)), 1e-3)
    assert np.allclose(tr.scores[0], [13.0] * 6 + [12.5] * 4)


def test_forward_deterministic_and_ranges(small_net, rng):
    imgs = rng.random((3, 784))
    a = network_forward_train(small_net, imgs, 1e-3)
    b = network_forward_train(small_net, imgs, 1e-3)
    assert np.array_equal(a.scores, b.scores)
    assert a.scores.shape == (3, 10)
    assert np.all((a.scores >= 0) & (a.scores <= 26))


def test_forward_rejects_wrong_shape(small_net):
    with pytest.raises(XbarError):
        network_forward_train(small_net, np.zeros((1, 100)), 1e-3)


def test_non_finite_reports_location(small_net):
    small_net.b[1][0, 37] = np.nan
    with pytest.raises(NumericalError, match="layer 2, core 0, neuron 37"):
        network_forward_train(small_net, np.zeros((1, 784)), 1e-3)


# ---------------------------------------------------------------------------
# loss

def test_loss_examples():
    assert loss(np.zeros(10), 3) == pytest.approx(math.log(10))
    assert loss([1.0, 0.0], 1) == pytest.approx(1.313262, abs=1e-6)
    assert loss([1000.0, 0.0, 0.0], 0) == pytest.approx(0.0, abs=1e-12)
    assert math.isfinite(loss([1e6, -1e6], 1))


# ---------------------------------------------------------------------------
# backward: finite-difference oracles on the smooth surrogate

def toy_objective(x, c, s, b, r, floor, sigma_fixed=None):
    """sum(r * out) of the surrogate core, optionally with sigma frozen."""
    mu, sigma, out = core_forward_train(x, c, s, b, floor, binary=False)
    if sigma_fixed is not None:
        out = normal_cdf(mu / sigma_fixed)
    return float(np.sum(r * out))


def fd_grad(f, arr, h=1e-4):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        keep = arr[idx]
        arr[idx] = keep + h
        up = f()
        arr[idx] = keep - h
        down = f()
        arr[idx] = keep
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_toy_core(rng):
    x = rng.uniform(0.05, 0.95, (3, 8))
    c = rng.uniform(0.05, 0.95, (8, 4))
    s = np.tile(np.array([-2.0, -1.0, 1.0, 2.0]), 2)
    b = rng.normal(scale=0.5, size=4)
    r = rng.normal(size=(3, 4))
    return x, c, s, b, r


def analytic(x, c, s, b, r, sigma_path):
    mu, sigma, _ = core_forward_train(x, c, s, b, 1e-3, binary=False)
    return core_backward(x, c, s, mu, sigma, r, sigma <= 1e-3, sigma_path=sigma_path)


def test_surrogate_gradient_full_chain_toy_cores():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        x, c, s, b, r = random_toy_core(rng)
        gc, gb, gx = analytic(x, c, s, b, r, sigma_path=True)
        f = lambda: toy_objective(x, c, s, b, r, 1e-3)  # noqa: E731
        worst = max(worst, rel_err(gc, fd_grad(f, c)), rel_err(gb, fd_grad(f, b)),
                    rel_err(gx, fd_grad(f, x)))
    assert worst <= 1e-4, worst


def test_mean_path_gradient_matches_frozen_sigma():
    rng = np.random.default_rng(99)
    for _ in range(20):
        x, c, s, b, r = random_toy_core(rng)
        _, sigma, _ = core_forward_train(x, c, s, b, 1e-3, binary=False)
        gc, gb, gx = analytic(x, c, s, b, r, sigma_path=False)
        f = lambda: toy_objective(x, c, s, b, r, 1e-3, sigma_fixed=sigma)  # noqa: E731
        assert rel_err(gc, fd_grad(f, c)) <= 1e-4
        assert rel_err(gb, fd_grad(f, b)) <= 1e-4
        assert rel_err(gx, fd_grad(f, x)) <= 1e-4


def test_bias_gradient_example():
    mu, sigma = np.array([[0.0]]), np.array([[1.0]])
    _, gb, _ = core_backward(np.zeros((1, 1)), np.zeros((1, 1)), np.array([1.0]), mu, sigma,
                             np.array([[1.0]]))
    assert gb[0] == pytest.approx(0.398942, abs=1e-6)


def test_zero_upstream_gives_zero_gradients(small_net, rng):
    tr = network_forward_train(small_net, rng.random((2, 784)), 1e-3)
    gc, gb = backward_from_outputs(small_net, tr, np.zeros((2, 256)))
    assert all(not g.any() for g in gc + gb)


def test_network_surrogate_gradient_matches_fd(small_net, rng):
    net = small_net
    for li in range(2):  # move c away from the binarization-free corners
        net.c[li] = np.where(net.c[li] > 0, 0.1 + 0.8 * net.c[li], 0.0)
    imgs, labels = rng.random((2, 784)), np.array([3, 8])

    def objective():
        tr = network_forward_train(net, imgs, 1e-3, surrogate=True)
        return float(np.mean(loss(tr.scores, labels)))

    tr = network_forward_train(net, imgs, 1e-3, surrogate=True)
    gc, gb = backward(net, tr, labels, sigma_path=True)
    h = 1e-4
    for li in range(2):
        used = np.argwhere(net.c[li] > 0)
        for k, i, j in used[rng.choice(len(used), 15, replace=False)]:
            keep = net.c[li][k, i, j]
            net.c[li][k, i, j] = keep + h
            up = objective()
            net.c[li][k, i, j] = keep - h
            down = objective()
            net.c[li][k, i, j] = keep
            fd = (up - down) / (2 * h)
            assert abs(fd - gc[li][k, i, j]) <= 1e-4 * max(abs(fd), abs(gc[li][k, i, j]), 1e-6)
        k, j = rng.integers(net.b[li].shape[0]), rng.integers(256)
        keep = net.b[li][k, j]
        net.b[li][k, j] = keep + h
        up = objective()
        net.b[li][k, j] = keep - h
        down = objective()
        net.b[li][k, j] = keep
        fd = (up - down) / (2 * h)
        assert abs(fd - gb[li][k, j]) <= 1e-4 * max(abs(fd), abs(gb[li][k, j]), 1e-6)


def test_straight_through_uses_binary_forward(small_net, rng):
    # d mu / d c = x s regardless of c: moving c without crossing 0.5 keeps the gradient
    imgs, labels = rng.random((2, 784)), np.array([1, 2])
    g1 = backward(small_net, network_forward_train(small_net, imgs, 1e-3), labels)
    nudged = small_net.copy()
    for li in range(2):
        c = nudged.c[li]
        nudged.c[li] = np.where(c > 0.5, 0.5 + (c - 0.5) * 0.5, c * 0.5)
    g2 = backward(nudged, network_forward_train(nudged, imgs, 1e-3), labels)
    for a, b in zip(g1[0] + g1[1], g2[0] + g2[1]):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# update and schedule

def test_sgd_examples(small_plan):
    net = init_network(small_plan, SynapseTemplate.named("s1"), 0)
    net.c[0][0, 0, 0], net.c[0][0, 0, 1], net.b[0][0, 0] = 0.05, 0.6, 0.2
    gc = [np.zeros_like(c) for c in net.c]
    gb = [np.zeros_like(b) for b in net.b]
    gc[0][0, 0, 0], gb[0][0, 0] = 1.0, 0.5
    sgd_update(net, (gc, gb), 0.1)
    assert net.c[0][0, 0, 0] == 0.0
    assert net.c[0][0, 0, 1] == 0.6
    assert net.b[0][0, 0] == pytest.approx(0.15)


@given(st.floats(-100, 100), st.floats(0, 1), st.floats(0, 10))
def test_sgd_keeps_c_in_unit_interval(g, c0, lr):
    plan = plan_from_spec(PRESETS["mnist-small"])
    net = init_network(plan, SynapseTemplate.named("s1"), 0)
    net.c[1][0, 0, 0] = c0
    gc = [np.full_like(c, g) for c in net.c]
    gb = [np.zeros_like(b) for b in net.b]
    sgd_update(net, (gc, gb), lr)
    assert all(c.min() >= 0 and c.max() <= 1 for c in net.c)


def test_lr_schedule():
    cfg = TrainConfig(total_iterations=0)
    assert lr_at(0, cfg) == 0.1
    assert lr_at(999_999, cfg) == 0.1
    assert lr_at(1_000_000, cfg) == pytest.approx(0.01)
    assert lr_at(2_500_000, cfg) == pytest.approx(0.001)


def test_config_validation():
    with pytest.raises(XbarError):
        TrainConfig(total_iterations=1, batch_size=0)
    with pytest.raises(XbarError):
        TrainConfig(total_iterations=1, lr0=0)
    with pytest.raises(XbarError):
        TrainConfig(total_iterations=1, sigma_floor=0)
    for width in (0, -0.1, 1.5):
        with pytest.raises(XbarError):
            TrainConfig(total_iterations=1, init_width=width)


def test_init_width_keeps_initial_connections(small_plan):
    wide = init_network(small_plan, SynapseTemplate.named("s1"), 4, width=1.0)
    narrow = init_network(small_plan, SynapseTemplate.named("s1"), 4, width=0.1)
    for cw, cn, layer in zip(wide.c, narrow.c, small_plan.layers):
        assert np.array_equal(binarize_crossbar(cw), binarize_crossbar(cn))
        used = np.broadcast_to((layer.sources >= 0)[:, :, None], cn.shape)
        assert np.all((cn[used] >= 0.45) & (cn[used] <= 0.55))


# ---------------------------------------------------------------------------
# training loop

def synthetic_data(n=300, seed=0):
    """Two-class stripes that a tiny run can separate."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    imgs = rng.random((n, 28, 28, 1)).astype(np.float32) * 0.2
    for i, y in enumerate(labels):
        imgs[i, 2 * y:2 * y + 3, :, 0] = 1.0
    return ImageBatch(imgs, labels.astype(np.int64))


def test_init_network(small_plan):
    net = init_network(small_plan, SynapseTemplate.named("s1"), 5)
    for layer, c, b in zip(small_plan.layers, net.c, net.b):
        unused = layer.sources < 0
        assert np.all(c[unused] == 0)
        assert np.all((c >= 0) & (c <= 1)) and not b.any()
    again = init_network(small_plan, SynapseTemplate.named("s1"), 5)
    assert all(np.array_equal(a, b) for a, b in zip(net.c, again.c))


@needs_mnist
def test_fresh_network_loss_near_uniform(mnist_dir, small_plan):
    test = load_mnist(mnist_dir, "test").subset(np.arange(100))
    net = init_network(small_plan, SynapseTemplate.named("s1"), 0)
    tr = network_forward_train(net, test.flat(), 1e-3)
    assert abs(float(np.mean(loss(tr.scores, test.labels))) - math.log(10)) <= 0.5


def test_zero_iterations(small_plan):
    run = train(TrainConfig(total_iterations=0), small_plan, synthetic_data())
    assert run.iteration == 0 and run.history == []


def test_batches_cover_each_epoch_once():
    seen = np.concatenate([batch_indices(i, 30, 300, 1)[0] for i in range(10)])
    assert sorted(seen.tolist()) == list(range(300))
    nxt = np.concatenate([batch_indices(i, 30, 300, 1)[0] for i in range(10, 20)])
    assert sorted(nxt.tolist()) == list(range(300))
    assert not np.array_equal(seen, nxt)


def test_augmented_batches_are_reproducible():
    from xbarnet.dataio import AUGMENT_PRESETS
    cfg = TrainConfig(total_iterations=1, batch_size=4, augment=AUGMENT_PRESETS["aug1"])
    data = synthetic_data(20)
    a, ya = make_batch(data, 3, cfg)
    b, yb = make_batch(data, 3, cfg)
    assert np.array_equal(a, b) and np.array_equal(ya, yb)


def test_training_is_bit_reproducible_and_learns(small_plan):
    data = synthetic_data()
    cfg = TrainConfig(total_iterations=60, batch_size=20, log_every=20, seed=3)
    r1 = train(cfg, small_plan, data)
    r2 = train(cfg, small_plan, data)
    for a, b in zip(r1.net.c + r1.net.b, r2.net.c + r2.net.b):
        assert np.array_equal(a, b)
    assert [h[1] for h in r1.history] == [h[1] for h in r2.history]
    assert r1.history[-1][1] < r1.history[0][1]
    assert all(c.min() >= 0 and c.max() <= 1 for c in r1.net.c)


def test_resume_matches_uninterrupted(small_plan, tmp_path):
    data = synthetic_data()
    full = train(TrainConfig(total_iterations=30, batch_size=20, log_every=10), small_plan, data)
    half = train(TrainConfig(total_iterations=15, batch_size=20, log_every=10), small_plan, data)
    save_checkpoint(half, tmp_path / "ck.json")
    resumed = load_checkpoint(tmp_path / "ck.json")
    assert resumed.iteration == 15
    resumed.config = TrainConfig(total_iterations=30, batch_size=20, log_every=10)
    resumed = train(resumed.config, small_plan, data, run=resumed)
    for a, b in zip(full.net.c + full.net.b, resumed.net.c + resumed.net.b):
        assert np.array_equal(a, b)


def test_divergence_aborts_with_last_good(small_plan):
    data = synthetic_data(40)
    run = train(TrainConfig(total_iterations=2, batch_size=10), small_plan, data)
    run.net.b[1][:] = np.inf
    with pytest.raises(DivergenceError) as info:
        train(TrainConfig(total_iterations=4, batch_size=10), small_plan, data, run=run)
    assert info.value.last_good is run and run.iteration == 2


def test_non_finite_update_leaves_parameters(small_net):
    before = small_net.copy()
    gc = [np.zeros_like(c) for c in small_net.c]
    gb = [np.zeros_like(b) for b in small_net.b]
    gb[1][0, 0] = np.nan
    with pytest.raises(NumericalError):
        sgd_update(small_net, (gc, gb), 0.1)
    for a, b in zip(before.c + before.b, small_net.c + small_net.b):
        assert np.array_equal(a, b)
