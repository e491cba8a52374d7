import math

import numpy as np
import pytest

from certbound import autodiff as ad
from certbound.bounds import PerturbationSpec
from certbound.model import logits, random_network
from certbound.training import (
    TrainConfig,
    ToyDatasetSpec,
    TrainingDiverged,
    evaluate,
    loss_and_grad,
    make_toy_dataset,
    robust_loss,
    sample_toy,
    schedule,
    toy_label,
    train,
)

from conftest import fd_check


def test_schedule_endpoints():
    cfg = TrainConfig(eps=0.1, lam=5e-3, gamma=0.5, warmup_epochs=20, epochs=60, lr=1e-3)
    assert schedule(0, cfg) == (pytest.approx(0.001), 0.0, 0.0, 1e-3)
    eps, lam, gamma, lr = schedule(20, cfg)
    assert (eps, lam, gamma, lr) == (pytest.approx(0.1), pytest.approx(5e-3), pytest.approx(0.5), 1e-3)
    eps, lam, gamma, _ = schedule(10, cfg)
    assert eps == pytest.approx(0.0505) and lam == pytest.approx(2.5e-3) and gamma == pytest.approx(0.25)
    assert schedule(30, cfg)[3] == pytest.approx(5e-4)
    assert schedule(59, cfg)[3] == pytest.approx(1.25e-4)
    with pytest.raises(ValueError):
        schedule(-1, cfg)


def test_toy_labels():
    assert toy_label([0.1, 0.42], 0.3) == 1
    assert toy_label([0.0, -0.4], 0.3) == 0
    assert toy_label([0.0, 0.0], 0.3) == -1


def test_toy_class_balance():
    b = 0.3
    X, y = make_toy_dataset(ToyDatasetSpec(b=b, n=10_000, seed=0))
    assert set(np.unique(toy_label(X, b))) <= {0, 1}
    assert np.array_equal(toy_label(X, b), y)
    # S1 is a triangle of area (1-b)^2; S0 is the square minus the band below the V, area 3 - 2b.
    frac = (1 - b) ** 2 / ((1 - b) ** 2 + 3 - 2 * b)
    sigma = math.sqrt(frac * (1 - frac) / len(y))
    assert abs(np.mean(y) - frac) <= 3 * sigma


def test_sample_toy_single_class():
    X, y = sample_toy(np.random.default_rng(1), 500, 0.3, labels=(1,))
    assert X.shape == (500, 2) and np.all(y == 1)
    assert np.all(X[:, 1] >= np.abs(X[:, 0]) + 0.3)


def test_loss_reduces_to_cross_entropy_at_zero_radius(rng):
    net = random_network([2, 5, 3], rng)
    X = rng.normal(size=(6, 2))
    y = rng.integers(0, 3, size=6)
    h = logits(net, X)
    lse = np.log(np.sum(np.exp(h - h.max(1, keepdims=True)), axis=1)) + h.max(1)
    ce = np.mean(lse - h[np.arange(6), y])
    assert float(ad.value(robust_loss(net, X, y, PerturbationSpec(0.0)))) == pytest.approx(ce, abs=1e-12)


def test_binary_loss_at_zero_radius(rng):
    net = random_network([2, 4, 1], rng)
    X = rng.normal(size=(5, 2))
    y = np.array([0, 1, 1, 0, 1])
    h = logits(net, X)[:, 0]
    m = np.where(y == 1, h, -h)
    expected = np.mean(np.log1p(np.exp(-m)))
    assert float(ad.value(robust_loss(net, X, y, PerturbationSpec(0.0)))) == pytest.approx(expected, abs=1e-12)


def test_regularizers_vanish_on_toy_claim(toy):
    X, y = sample_toy(np.random.default_rng(0), 100, 0.3, labels=(1,))
    spec = PerturbationSpec(0.2)
    base = float(ad.value(robust_loss(toy, X, y, spec)))
    reg = float(ad.value(robust_loss(toy, X, y, spec, lam=5e-3, gamma=0.5)))
    assert reg == pytest.approx(base, abs=1e-12)


def test_regularizers_only_add(rng):
    net = random_network([2, 6, 6, 1], rng, scale=1.0)
    X, y = make_toy_dataset(ToyDatasetSpec(n=40, seed=2))
    spec = PerturbationSpec(0.2)
    base = float(ad.value(robust_loss(net, X, y, spec)))
    assert base >= 0
    assert float(ad.value(robust_loss(net, X, y, spec, 5e-3, 0.5))) >= base


def test_zero_coefficients_give_unregularized_gradient(rng):
    net = random_network([2, 5, 1], rng, scale=1.0)
    X, y = make_toy_dataset(ToyDatasetSpec(n=20, seed=4))
    spec = PerturbationSpec(0.2)
    _, g0 = loss_and_grad(net, X, y, spec, 0.0, 0.0)
    tape = ad.Tape()
    leaves = [tape.var(a) for layer in net.layers for a in (layer.weight, layer.bias)]
    from certbound.training import _assemble
    from certbound.bounds import _batched_certify
    from certbound.model import margin_tensor
    C, _ = margin_tensor(y, 1)
    p = _batched_certify(_assemble(leaves), X, spec, C, "fastlin").p_c_star
    loss = ad.mean(ad.logsumexp(ad.concatenate([np.zeros((len(y), 1)), -p], axis=1), axis=-1))
    for a, b in zip(g0, tape.grad(loss, leaves)):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("engine", ["fastlin", "crown", "crown-ibp"])
@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_gradient_matches_finite_differences(engine, norm):
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 2:
        net = random_network([2, 3, 2], rng, scale=1.0)
        X = rng.normal(size=(3, 2))
        y = rng.integers(0, 2, size=3)
        err = fd_check(net, X, y, PerturbationSpec(0.3, norm), 5e-3, 0.5, engine)
        if err is None:
            continue
        assert err < 1e-4
        checked += 1


def test_max_margin_network_below_half_gap(toy):
    from certbound.model import MarginSpec
    from certbound.oracles import pattern_oracle
    X, y = make_toy_dataset(ToyDatasetSpec(b=0.3, n=2000, seed=0))
    spec = PerturbationSpec(0.14)
    s1 = y == 1
    # Fast-Lin is exact on S1, so every class-1 sample is certified.
    assert evaluate(toy, X[s1], y[s1], spec)["cert_err"] == 0.0
    # On S0 the network is still truly robust (exact margin >= b - 2 eps > 0).
    for x in X[~s1][:300]:
        assert pattern_oracle(toy, x, spec, MarginSpec(0, 1, 1)) >= 0.3 - 2 * 0.14 - 1e-12


def _small_config(**kw):
    base = dict(eps=0.1, hidden=[4], epochs=3, warmup_epochs=2, lam=5e-3, gamma=0.5, batch_size=25, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_reproducible():
    X, y = make_toy_dataset(ToyDatasetSpec(n=100, seed=0))
    net_a, hist_a = train(_small_config(), X, y)
    net_b, hist_b = train(_small_config(), X, y)
    assert hist_a == hist_b
    assert all(np.array_equal(a, b) for a, b in zip(net_a.weights, net_b.weights))
    keys = {"epoch", "eps", "lambda", "gamma", "lr", "std_err", "cert_err", "pgd_err", "mean_d", "mean_r", "loss"}
    assert set(hist_a[0]) == keys and [h["epoch"] for h in hist_a] == [1, 2, 3]


def test_sgd_and_crown_training_run():
    X, y = make_toy_dataset(ToyDatasetSpec(n=60, seed=1))
    _, hist = train(_small_config(optimizer="sgd", engine="crown", lr=1e-2), X, y)
    assert all(math.isfinite(h["loss"]) for h in hist)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    X, y = make_toy_dataset(ToyDatasetSpec(n=50, seed=1))
    with pytest.raises(TrainingDiverged) as info:
        train(_small_config(optimizer="sgd", lr=1e300, momentum=0.0), X, y)
    assert info.value.epoch >= 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eps=0.1, engine="ibp")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"eps": 0.1, "bogus": 1})
    assert TrainConfig.from_dict(TrainConfig(eps=0.2).to_dict()) == TrainConfig(eps=0.2)
