"""LIF dynamics, surrogate gradients, and the differentiable proxy mode."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spikeshort import tensor as T
from spikeshort.errors import ConfigError, InputError
from spikeshort.gradcheck import fd_check
from spikeshort.neuron import (
    MembraneState,
    NeuronConfig,
    SurrogateSpec,
    fire,
    lif_charge,
    lif_reset,
    lif_unroll,
    proxy_fire,
    proxy_fire_values,
    surrogate_grad_values,
)

CFG = NeuronConfig()
TRI = SurrogateSpec(kind="triangular")


def t64(values, requires_grad=False):
    return T.Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


def state_of(u):
    u = t64(u)
    return MembraneState(u_pre=u, u=u)


# ---------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize("tau", [0.0, -0.1, 1.5])
def test_tau_out_of_range(tau):
    with pytest.raises(ConfigError):
        NeuronConfig(tau=tau)


def test_threshold_must_be_positive():
    with pytest.raises(ConfigError):
        NeuronConfig(v_th=0.0)


def test_unknown_surrogate_kind():
    with pytest.raises(ConfigError):
        SurrogateSpec(kind="sigmoid")


def test_surrogate_json_roundtrip():
    for spec in (
        SurrogateSpec("triangular", gamma=0.5),
        SurrogateSpec("rectangular", a=2.0),
        SurrogateSpec("tanh_like", k=3.0),
    ):
        assert SurrogateSpec.from_json(spec.to_json()) == spec


def test_surrogate_json_rejects_mismatched_param():
    with pytest.raises(ConfigError):
        SurrogateSpec.from_json({"kind": "triangular", "a": 1.0})


# ---------------------------------------------------------------------------
# charge / fire / reset


def test_charge_direct_evaluation():
    u_pre = lif_charge(state_of([0.6]), t64([0.8]), CFG)
    assert u_pre.values[0] == pytest.approx(1.1, abs=1e-15)


def test_charge_zero_state_zero_current():
    assert lif_charge(state_of([0.0]), t64([0.0]), CFG).values[0] == 0.0


def test_charge_if_mode():
    cfg = NeuronConfig(tau=1.0)
    assert lif_charge(state_of([0.3]), t64([0.3]), cfg).values[0] == pytest.approx(0.6)


def test_fire_above_threshold():
    assert fire(t64([1.1]), CFG, TRI).values[0] == 1.0


def test_fire_tie_at_threshold_does_not_fire():
    assert fire(t64([1.0]), CFG, TRI).values[0] == 0.0


def test_fire_far_below_threshold_zero_spike_zero_surrogate():
    u = np.array([-5.0])
    assert fire(t64(u), CFG, TRI).values[0] == 0.0
    assert surrogate_grad_values(u, CFG, TRI)[0] == 0.0
    assert surrogate_grad_values(u, CFG, SurrogateSpec("rectangular"))[0] == 0.0


def test_surrogate_peaks_at_threshold():
    u = np.array([1.0])
    assert surrogate_grad_values(u, CFG, TRI)[0] == 1.0
    assert surrogate_grad_values(u, CFG, SurrogateSpec("rectangular"))[0] == 1.0
    assert surrogate_grad_values(u, CFG, SurrogateSpec("tanh_like"))[0] == 1.0


def test_surrogate_triangular_formula():
    u = np.array([0.5, 1.5, 2.5])
    got = surrogate_grad_values(u, CFG, SurrogateSpec("triangular", gamma=2.0))
    assert np.allclose(got, [1.0, 1.0, 0.0])


def test_reset_spike_clears_potential():
    u = lif_reset(t64([1.1]), t64([1.0]), CFG)
    assert u.values[0] == 0.0


def test_reset_no_spike_keeps_potential():
    u = lif_reset(t64([0.7]), t64([0.0]), CFG)
    assert u.values[0] == 0.7


def test_reset_grad_includes_product_term():
    # d/du [u * (1 - o(u))] = (1 - o) - u * s(u); with u=0.5 (o=0, s=0.5): 0.75
    u = t64([0.5], requires_grad=True)
    o = fire(u, CFG, TRI)
    T.backward(T.tsum(lif_reset(u, o, CFG)))
    assert u.grad[0] == pytest.approx(1.0 - 0.5 * 0.5, abs=1e-12)
    # with reset_grad off the o factor is constant: plain (1 - o)
    cfg = NeuronConfig(reset_grad=False)
    u2 = t64([0.5], requires_grad=True)
    T.backward(T.tsum(lif_reset(u2, fire(u2, cfg, TRI), cfg)))
    assert u2.grad[0] == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# unroll


def test_unroll_single_step_is_fire_of_input():
    c = t64([[0.4, 1.2]])
    spikes = lif_unroll([c], CFG, TRI)
    assert len(spikes) == 1
    assert np.array_equal(spikes[0].values, fire(c, CFG, TRI).values)


def test_unroll_hand_iterated_trace():
    # tau=0.5, v_th=1, constant current 0.6: spike exactly at t=3
    inputs = [t64([0.6]) for _ in range(4)]
    spikes = lif_unroll(inputs, CFG, TRI)
    assert [s.values[0] for s in spikes] == [0.0, 0.0, 1.0, 0.0]


def test_unroll_membrane_values_match_hand_iteration():
    state = MembraneState(u_pre=t64([0.0]), u=t64([0.0]))
    expected_u_pre = [0.6, 0.9, 1.05, 0.6]
    for expected in expected_u_pre:
        u_pre = lif_charge(state, t64([0.6]), CFG)
        assert u_pre.values[0] == pytest.approx(expected, abs=1e-12)
        o = fire(u_pre, CFG, TRI)
        state = MembraneState(u_pre=u_pre, u=lif_reset(u_pre, o, CFG))


def test_unroll_empty_inputs_rejected():
    with pytest.raises(InputError):
        lif_unroll([], CFG, TRI)


def test_unroll_gradient_matches_proxy_fd():
    rng = np.random.default_rng(21)
    x = T.Tensor(rng.uniform(0.0, 2.0, size=(8, 3)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(8, 3)))

    def f(v):
        per_t = [T.slice_rows(v, i * 2, (i + 1) * 2) for i in range(4)]
        spikes = lif_unroll(per_t, CFG, TRI, fire_fn=proxy_fire)
        return T.tsum(T.mul(T.concat_rows(spikes), w))

    assert fd_check(f, x) < 1e-4


def test_detach_temporal_equals_independent_per_step_fire():
    cfg = NeuronConfig(detach_temporal=True)
    rng = np.random.default_rng(4)
    currents = rng.uniform(0.0, 2.0, size=(3, 5))
    inputs = [T.Tensor(c.copy(), requires_grad=True) for c in currents]
    spikes = lif_unroll(inputs, cfg, TRI)
    T.backward(T.tsum(T.concat_rows(spikes)))
    # with the temporal path cut, each input's grad is the surrogate at its
    # own u_pre (u still evolves forward, but no gradient crosses timesteps)
    u = np.zeros(5)
    for t, c in enumerate(currents):
        u_pre = cfg.tau * u + c
        expected = surrogate_grad_values(u_pre, cfg, TRI)
        assert np.allclose(inputs[t].grad, expected, atol=1e-12)
        u = u_pre * (1.0 - (u_pre > cfg.v_th))


def test_no_reset_grad_drops_product_term_in_recurrence():
    # T=2, scalar: grad wrt c1 of o2 via the temporal path.
    # full:      s(u2) * tau * ((1-o1) - u1*s(u1))
    # no reset grad: s(u2) * tau * (1-o1)
    c1v, c2v = 0.8, 0.3
    for reset_grad, expect_extra in ((True, True), (False, False)):
        cfg = NeuronConfig(reset_grad=reset_grad)
        c1 = t64([c1v], requires_grad=True)
        c2 = t64([c2v])
        o1, o2 = lif_unroll([c1, c2], cfg, TRI)
        T.backward(T.tsum(o2))
        u1 = c1v
        s1 = surrogate_grad_values(np.array([u1]), cfg, TRI)[0]
        o1v = float(u1 > 1.0)
        u2 = cfg.tau * u1 * (1 - o1v) + c2v
        s2 = surrogate_grad_values(np.array([u2]), cfg, TRI)[0]
        term = (1 - o1v) - u1 * s1 if expect_extra else (1 - o1v)
        assert c1.grad[0] == pytest.approx(s2 * cfg.tau * term, abs=1e-12)


# ---------------------------------------------------------------------------
# proxy fire


def test_proxy_triangular_ramp_values():
    u = np.array([0.0, 1.0, 2.0, -3.0, 5.0])
    got = proxy_fire_values(u, CFG, TRI)
    assert np.allclose(got, [0.0, 0.5, 1.0, 0.0, 1.0])


def test_proxy_derivative_equals_surrogate_at_threshold():
    u = T.Tensor(np.array([1.0]), requires_grad=True)
    h = 1e-6
    fd = (
        proxy_fire_values(np.array([1.0 + h]), CFG, TRI)
        - proxy_fire_values(np.array([1.0 - h]), CFG, TRI)
    ) / (2 * h)
    assert fd[0] == pytest.approx(surrogate_grad_values(np.array([1.0]), CFG, TRI)[0], abs=1e-6)
    T.backward(T.tsum(proxy_fire(u, CFG, TRI)))
    assert u.grad[0] == 1.0


@pytest.mark.parametrize("kind", ["triangular", "rectangular", "tanh_like"])
def test_proxy_antiderivative_matches_quadrature(kind):
    # independent oracle: integrate the surrogate numerically from far left
    sg = SurrogateSpec(kind=kind)
    lo = -6.0
    grid = np.linspace(lo, 4.0, 20001)
    vals = surrogate_grad_values(grid, CFG, sg)
    integral = np.concatenate([[0.0], np.cumsum((vals[1:] + vals[:-1]) / 2.0 * np.diff(grid))])
    probe = np.array([-1.0, 0.3, 1.0, 1.4, 2.5])
    got = proxy_fire_values(probe, CFG, sg)
    want = np.interp(probe, grid, integral)
    # both are antiderivatives; they may differ by one constant
    shift = got[2] - want[2]
    assert np.allclose(got - shift, want, atol=5e-4)


# ---------------------------------------------------------------------------
# invariants


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(
        np.float64,
        hnp.array_shapes(max_dims=2, max_side=6),
        elements=st.floats(-50, 50),
    )
)
def test_spikes_are_binary(u):
    o = fire(t64(u), CFG, TRI).values
    assert set(np.unique(o)) <= {0.0, 1.0}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_reset_invariant_u_times_o_is_zero(seed):
    rng = np.random.default_rng(seed)
    inputs = [t64(rng.uniform(-1, 2, size=7)) for _ in range(3)]
    spikes = lif_unroll(inputs, CFG, TRI)
    state = MembraneState(u_pre=t64(np.zeros(7)), u=t64(np.zeros(7)))
    for c, o in zip(inputs, spikes):
        u_pre = lif_charge(state, c, CFG)
        u = lif_reset(u_pre, o, CFG)
        assert np.all(u.values * o.values == 0.0)
        state = MembraneState(u_pre=u_pre, u=u)


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 100), st.floats(0.1, 5.0))
def test_surrogate_support_bounds(u, v_th):
    cfg = NeuronConfig(v_th=v_th)
    arr = np.array([u])
    tri = surrogate_grad_values(arr, cfg, TRI)[0]
    rect = surrogate_grad_values(arr, cfg, SurrogateSpec("rectangular"))[0]
    assert tri >= 0.0 and rect >= 0.0
    if not 0.0 < u < 2.0 * v_th:
        assert tri == 0.0
    if not v_th - 0.5 < u < v_th + 0.5:
        assert rect == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 8))
def test_if_mode_accumulates_subthreshold_current_exactly(seed, steps):
    rng = np.random.default_rng(seed)
    cfg = NeuronConfig(tau=1.0, v_th=1e9)  # never fires
    currents = rng.uniform(-0.5, 0.5, size=(steps, 4))
    state = MembraneState(u_pre=t64(np.zeros(4)), u=t64(np.zeros(4)))
    for c in currents:
        u_pre = lif_charge(state, t64(c), cfg)
        o = fire(u_pre, cfg, TRI)
        state = MembraneState(u_pre=u_pre, u=lif_reset(u_pre, o, cfg))
    assert np.allclose(state.u.values, currents.sum(axis=0), atol=1e-12)
