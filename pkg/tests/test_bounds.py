import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certbound.bounds import (
    ENGINES,
    PerturbationSpec,
    certify,
    crown_certify,
    fastlin_certify,
    ibp_bounds,
    ibp_certify,
    optimal_input_perturbation,
    optimal_intercepts,
    relu_groups,
)
from certbound.model import MarginSpec, Network, logits, margin, margin_specs, random_network
from certbound.oracles import pattern_oracle, random_in_ball

from conftest import random_nets

X0 = np.array([0.1, 0.42])
C1 = [MarginSpec(1, 0, 1)]


def test_toy_fastlin(toy):
    res = fastlin_certify(toy, X0, PerturbationSpec(0.2), C1)
    relax = res.relaxation
    np.testing.assert_allclose(relax.coef_input[0], [-0.5, 1.0], atol=1e-12)
    assert relax.clean_value[0] == pytest.approx(0.37, abs=1e-12)
    assert res.p_c_star[0] == pytest.approx(-0.08, abs=1e-12)
    np.testing.assert_allclose(res.bounds.lower[0], [-0.1, -0.3, 0.22, -0.62], atol=1e-12)
    np.testing.assert_allclose(res.bounds.upper[0], [0.3, 0.1, 0.62, -0.22], atol=1e-12)
    assert res.bounds.unstable(0).tolist() == [True, True, False, False]


def test_toy_optimal_perturbation_and_intercepts(toy):
    relax = fastlin_certify(toy, X0, PerturbationSpec(0.2), C1).relaxation
    np.testing.assert_allclose(optimal_input_perturbation(relax)[0], [0.2, -0.2], atol=1e-12)
    np.testing.assert_allclose(relax.coef_hidden[0][0], [-1, -1, 1, -1], atol=1e-12)
    np.testing.assert_allclose(optimal_intercepts(relax)[0][0], [0.075, 0.075, 0, 0], atol=1e-12)


def test_toy_ibp_and_crown(toy):
    spec = PerturbationSpec(0.2)
    assert ibp_certify(toy, X0, spec, C1).p_c_star[0] == pytest.approx(-0.18, abs=1e-12)
    for mode in ("crown", "ibp"):
        assert crown_certify(toy, X0, spec, C1, intermediate=mode).p_c_star[0] == pytest.approx(-0.08, abs=1e-12)


def test_ibp_l2_first_layer():
    net = Network.from_arrays([np.array([[1.0, 1.0]]), np.array([[1.0]])])
    state = ibp_bounds(net, np.zeros(2), PerturbationSpec(1.0, "l2"))
    assert state.lower[0][0] == pytest.approx(-math.sqrt(2), abs=1e-15)
    assert state.upper[0][0] == pytest.approx(math.sqrt(2), abs=1e-15)


def test_l2_optimal_perturbation():
    net = Network.from_arrays([np.eye(2), np.array([[3.0, 4.0]])])
    relax = fastlin_certify(net, np.array([10.0, 10.0]), PerturbationSpec(1.0, "l2"), [MarginSpec(1, 0, 1)]).relaxation
    np.testing.assert_allclose(optimal_input_perturbation(relax)[0], [-0.6, -0.8], atol=1e-15)


def test_zero_coefficient_l2_gives_zero_perturbation():
    net = Network.from_arrays([np.eye(2), np.zeros((1, 2))])
    relax = fastlin_certify(net, np.zeros(2), PerturbationSpec(0.5, "l2"), [MarginSpec(1, 0, 1)]).relaxation
    assert optimal_input_perturbation(relax)[0].tolist() == [0.0, 0.0]


def test_ibp_zero_radius_is_exact(rng):
    net = random_network([3, 5, 4, 2], rng)
    x = rng.normal(size=3)
    state = ibp_bounds(net, x, PerturbationSpec(0.0))
    from certbound.model import pre_activations
    for lo, up, pre in zip(state.lower, state.upper, pre_activations(net, x)):
        np.testing.assert_array_equal(lo, up)
        np.testing.assert_allclose(lo, pre, atol=1e-15)


@pytest.mark.parametrize("engine", ENGINES)
def test_zero_radius_equals_clean_margin(engine, rng):
    for net, x, _ in random_nets(5, 20):
        specs = margin_specs(0, net.n_out)
        p = certify(net, x, PerturbationSpec(0.0), specs, engine=engine).p_c_star
        clean = [float(margin(net, x, s)) for s in specs]
        np.testing.assert_allclose(p, clean, atol=1e-12)


def test_relu_groups_partition():
    lo = np.array([-1.0, 0.0, -2.0, 0.5, -1.0])
    up = np.array([0.0, 1.0, 3.0, 0.7, -0.5])
    inactive, active, unstable = relu_groups(lo, up)
    assert inactive.tolist() == [True, False, False, False, True]
    assert active.tolist() == [False, True, False, True, False]
    assert unstable.tolist() == [False, False, True, False, False]


def test_intercepts_follow_backward_sign(rng):
    for net, x, _ in random_nets(11, 30, widths_choices=((2, 5, 4, 1),)):
        spec = PerturbationSpec(0.3)
        res = fastlin_certify(net, x, spec, [MarginSpec(1, 0, 1)])
        relax, state = res.relaxation, res.bounds
        W2, W3 = net.weights[1], net.weights[2]
        back2 = W3[0]
        back1 = (W3[0] * relax.slopes[1]) @ W2
        for layer, back in ((0, back1), (1, back2)):
            delta = optimal_intercepts(relax)[layer][0]
            unstable = state.unstable(layer)
            lo, up = state.lower[layer], state.upper[layer]
            bar = np.where(unstable, -up * lo / np.where(unstable, up - lo, 1.0), 0.0)
            expect = np.where(unstable & (back < 0), bar, 0.0)
            np.testing.assert_allclose(delta, expect, atol=1e-12)


def test_crown_equals_fastlin_without_unstable(rng):
    hits = 0
    for net, x, _ in random_nets(3, 60):
        spec = PerturbationSpec(1e-3)
        res = fastlin_certify(net, x, spec, margin_specs(0, net.n_out))
        if any(res.bounds.unstable(i).any() for i in range(net.depth - 1)):
            continue
        hits += 1
        cr = crown_certify(net, x, spec, margin_specs(0, net.n_out))
        np.testing.assert_allclose(cr.p_c_star, res.p_c_star, atol=1e-12, rtol=0)
    assert hits > 10


def _homogeneous_net(rng):
    return Network.from_arrays([rng.normal(size=(4, 2)), rng.normal(size=(3, 4)), rng.normal(size=(2, 3))])


@pytest.mark.parametrize("engine", ENGINES)
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10.0))
def test_positive_homogeneity(engine, seed, scale):
    rng = np.random.default_rng(seed)
    net = _homogeneous_net(rng)
    x = rng.normal(size=2)
    specs = margin_specs(0, 2)
    a = certify(net, x, PerturbationSpec(0.1), specs, engine=engine).p_c_star
    b = certify(net, scale * x, PerturbationSpec(0.1 * scale), specs, engine=engine).p_c_star
    np.testing.assert_allclose(b, scale * np.asarray(a), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("engine", ENGINES)
@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_sound_against_samples(engine, norm):
    rng = np.random.default_rng(99)
    for net, x, _ in random_nets(21, 15):
        specs = margin_specs(0, net.n_out)
        for eps in (0.0, 0.05, 0.1, 0.2):
            spec = PerturbationSpec(eps, norm)
            p = np.asarray(certify(net, x, spec, specs, engine=engine).p_c_star)
            deltas = random_in_ball(rng, (200, net.n_in), spec)
            vals = logits(net, x + deltas) @ np.stack([s.c for s in specs]).T
            assert np.all(p <= vals.min(axis=0) + 1e-9)


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_ibp_is_monotone_in_eps(norm):
    for net, x, _ in random_nets(22, 20):
        specs = margin_specs(0, net.n_out)
        prev_state, prev_p = None, None
        for eps in np.linspace(0, 0.3, 13):
            spec = PerturbationSpec(float(eps), norm)
            state = ibp_bounds(net, x, spec)
            p = np.asarray(ibp_certify(net, x, spec, specs).p_c_star)
            if prev_state is not None:
                assert np.all(p <= prev_p + 1e-12)
                for lo0, up0, lo1, up1 in zip(prev_state.lower, prev_state.upper, state.lower, state.upper):
                    assert np.all(lo1 <= lo0 + 1e-12) and np.all(up1 >= up0 - 1e-12)
            prev_state, prev_p = state, p


def test_fastlin_can_increase_with_eps():
    # Fast-Lin's parallel lower line D*x does not shrink monotonically as the
    # intermediate bounds widen, so the bound is not monotone in eps. Values
    # below were reproduced by an independent loop-based implementation.
    rng = np.random.default_rng(5)
    for _ in range(41):
        widths = [int(w) for w in rng.integers(1, 7, size=int(rng.integers(3, 5)))]
        net = random_network(widths, rng, scale=1.0)
        x = rng.uniform(-1, 1, size=widths[0])
    s = margin_specs(0, net.n_out)[1]
    p07 = fastlin_certify(net, x, PerturbationSpec(0.07), [s]).p_c_star[0]
    p09 = fastlin_certify(net, x, PerturbationSpec(0.09), [s]).p_c_star[0]
    assert p07 == pytest.approx(-0.49190708142631917, abs=1e-12)
    assert p09 == pytest.approx(-0.49105164951809754, abs=1e-12)
    assert p09 > p07


@pytest.mark.parametrize("engine", ["fastlin", "crown", "crown-ibp"])
def test_below_exact_oracle(engine):
    for net, x, _ in random_nets(8, 20, widths_choices=((2, 4, 2), (2, 4, 4, 2))):
        spec = PerturbationSpec(0.1)
        for s in margin_specs(0, net.n_out):
            p = certify(net, x, spec, [s], engine=engine).p_c_star[0]
            assert p <= pattern_oracle(net, x, spec, s) + 1e-9


def test_engines_ordered_above_ibp_on_toy(toy):
    spec = PerturbationSpec(0.2)
    ibp = ibp_certify(toy, X0, spec, C1).p_c_star[0]
    assert fastlin_certify(toy, X0, spec, C1).p_c_star[0] >= ibp


def test_invalid_spec():
    with pytest.raises(ValueError):
        PerturbationSpec(-0.1)
    with pytest.raises(ValueError):
        PerturbationSpec(0.1, 1)
