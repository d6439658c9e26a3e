import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqspike import autodiff as ad
from vqspike.autodiff import Tensor
from vqspike.snn import (
    LifParams,
    NonFiniteMembrane,
    SpikingConv,
    SpikingLinear,
    direct_input_encode,
    lif_sequence,
    lif_sequence_reference,
    lif_step,
    run_spiking_layer,
)

F32 = np.float32


def scalar_lif(xs, tau=2.0, v_th=1.0, v_reset=0.0, v0=None):
    """Per-neuron simulator written directly from the update equations, in float32 scalars."""
    inv = F32(1.0 / tau)
    v = F32(v_reset if v0 is None else v0)
    spikes = []
    for x in xs:
        h = F32(v + F32(F32(x) - F32(v - F32(v_reset))) * inv)
        s = F32(1.0) if F32(h - F32(v_th)) >= 0 else F32(0.0)
        v = F32(F32(h * F32(F32(1) - s)) + F32(F32(v_reset) * s))
        spikes.append(s)
    return spikes


def test_lif_step_examples():
    p = LifParams()
    s, v = lif_step(Tensor([2.0]), Tensor([0.0]), p)
    assert (s.item(), v.item()) == (1.0, 0.0)  # H = 1.0 fires exactly at threshold
    s, v = lif_step(Tensor([1.0]), Tensor([0.0]), p)
    assert (s.item(), v.item()) == (0.0, 0.5)
    s, v = lif_step(Tensor([1.0]), Tensor([0.5]), p)
    assert (s.item(), v.item()) == (0.0, 0.75)


def test_constant_subthreshold_input_never_fires():
    x = Tensor(np.full((50, 4), 0.99, dtype=F32))
    assert lif_sequence(x, LifParams()).data.sum() == 0


def test_lif_params_validation():
    with pytest.raises(ValueError, match="tau"):
        LifParams(tau=0.5)
    with pytest.raises(ValueError, match="v_th"):
        LifParams(v_th=0.0, v_reset=0.0)


def test_non_finite_membrane_names_layer():
    x = Tensor(np.array([[np.nan, 0.0]], dtype=F32))
    with pytest.raises(NonFiniteMembrane, match="enc1"):
        lif_sequence(x, LifParams(), "enc1")
    with pytest.raises(NonFiniteMembrane, match="enc1"):
        lif_step(x[0], Tensor(np.zeros(2)), LifParams(), "enc1")


@given(
    st.lists(st.floats(-3, 5, allow_nan=False, width=32), min_size=1, max_size=12),
    st.sampled_from([1.0, 2.0, 3.0]),
)
@settings(max_examples=200, deadline=None)
def test_fused_kernel_matches_scalar_simulator(xs, tau):
    p = LifParams(tau=tau)
    x = Tensor(np.array(xs, dtype=F32)[:, None])
    assert lif_sequence(x, p).data[:, 0].tolist() == scalar_lif(xs, tau=tau)


def test_fused_matches_step_reference(rng):
    x = rng.normal(0.7, 1.0, (6, 3, 5)).astype(F32)
    for detach in (True, False):
        p = LifParams(detach_reset=detach)
        a, b = Tensor(x, requires_grad=True), Tensor(x, requires_grad=True)
        fa, fb = lif_sequence(a, p), lif_sequence_reference(b, p)
        np.testing.assert_array_equal(fa.data, fb.data)
        w = rng.standard_normal(x.shape).astype(F32)
        (fa * w).sum().backward()
        (fb * w).sum().backward()
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-6)


def test_outputs_are_binary(rng):
    layer = SpikingConv(2, 3, 3, LifParams(), rng, padding=1, gain=3.0)
    s = layer(rng.random((2, 2, 6, 6)).astype(F32), steps=5)
    assert s.shape == (5, 2, 3, 6, 6)
    assert set(np.unique(s.data)) <= {0.0, 1.0}


def test_direct_encoding_repeats_input(rng):
    x = rng.random((2, 1, 4, 4)).astype(F32)
    enc = direct_input_encode(x, 5)
    assert enc.shape == (5, 2, 1, 4, 4)
    for t in range(5):
        np.testing.assert_array_equal(enc.data[t], x)
    with pytest.raises(ValueError):
        direct_input_encode(x, 0)


def test_static_input_equals_repeated_train(rng):
    layer = SpikingConv(1, 4, 4, LifParams(), rng, stride=2, padding=1, gain=3.0)
    x = rng.random((3, 1, 8, 8)).astype(F32)
    np.testing.assert_array_equal(layer(x, steps=4).data, layer(direct_input_encode(x, 4)).data)


def test_state_resets_between_samples(rng):
    layer = SpikingLinear(3, 5, LifParams(), rng, gain=3.0)
    a, b = rng.random((1, 3)).astype(F32), rng.random((1, 3)).astype(F32)
    alone = run_spiking_layer(layer, b, steps=6).data
    run_spiking_layer(layer, a, steps=6)
    np.testing.assert_array_equal(run_spiking_layer(layer, b, steps=6).data, alone)
    both = run_spiking_layer(layer, np.concatenate([a, b]), steps=6).data
    np.testing.assert_array_equal(both[:, 1:], alone)


def test_layer_oracle_bit_exact(rng):
    """Spiking linear layer vs scalar simulation of each neuron on its own input current."""
    layer = SpikingLinear(4, 6, LifParams(), rng, gain=3.0)
    x = rng.random((7, 4)).astype(F32)
    spikes = run_spiking_layer(layer, x, steps=5).data
    cur = ad.linear(Tensor(x), layer.weight, layer.bias).data
    for n in range(7):
        for j in range(6):
            assert spikes[:, n, j].tolist() == scalar_lif([cur[n, j]] * 5)


# ------------------------------------------------------------------ surrogate chain


def g_prime(x, alpha=2.0):
    return alpha / (2 * (1 + (math.pi / 2 * alpha * x) ** 2))


def test_two_layer_net_matches_manual_chain():
    """Two neurons in series, single step: y = S(w2 * S(w1 * x) - th)."""
    p = LifParams(tau=1.0)  # H = X at the first step
    x, w1, w2 = 1.3, 0.9, 1.6
    tw1 = Tensor([[w1]], requires_grad=True)
    tw2 = Tensor([[w2]], requires_grad=True)
    s1 = lif_sequence(ad.reshape(Tensor([[x]]) @ tw1, (1, 1, 1)), p)
    s2 = lif_sequence(ad.reshape(ad.reshape(s1, (1, 1)) @ tw2, (1, 1, 1)), p)
    s2.sum().backward()
    h1 = x * w1
    a1 = 1.0 if h1 >= 1 else 0.0
    h2 = a1 * w2
    d2 = g_prime(h2 - 1)
    assert tw2.grad[0, 0] == pytest.approx(d2 * a1, abs=1e-5)
    assert tw1.grad[0, 0] == pytest.approx(d2 * w2 * g_prime(h1 - 1) * x, abs=1e-5)


def test_bptt_two_steps_manual_chain():
    """One neuron over two steps with tau=2; the reset path is detached."""
    p = LifParams()
    xs = Tensor([[0.8], [1.5]], requires_grad=True)
    out = lif_sequence(xs, p)
    (out * np.float32([[2.0], [3.0]])).sum().backward()
    h1 = 0.4
    h2 = h1 + (1.5 - h1) / 2  # 0.95, no spike at step 1 so V1 = H1
    gh2 = 3.0 * g_prime(h2 - 1)
    gh1 = 2.0 * g_prime(h1 - 1) + gh2 * 0.5 * (1 - 0)  # dH2/dV1 = 1 - 1/tau, dV1/dH1 = 1 - S1
    assert xs.grad[1, 0] == pytest.approx(gh2 * 0.5, abs=1e-6)
    assert xs.grad[0, 0] == pytest.approx(gh1 * 0.5, abs=1e-6)


def test_bptt_through_reset_without_detach():
    xs = np.float32([[2.4], [0.6]])
    grads = {}
    for detach in (True, False):
        t = Tensor(xs, requires_grad=True)
        lif_sequence(t, LifParams(detach_reset=detach))[1].sum().backward()
        grads[detach] = t.grad[0, 0]
    h1 = 1.2
    h2 = 0.0 + 0.6 / 2
    gh2 = g_prime(h2 - 1)
    # dV1/dH1 = (1 - S1) + (v_reset - H1) * g'(H1 - th); first term vanishes since S1 = 1
    assert grads[True] == pytest.approx(0.0, abs=1e-7)
    assert grads[False] == pytest.approx(gh2 * 0.5 * (-h1 * g_prime(h1 - 1)) * 0.5, abs=1e-6)


def test_spiking_conv_gradients_reach_weights(rng):
    layer = SpikingConv(1, 2, 3, LifParams(), rng, padding=1, gain=3.0)
    x = rng.random((2, 1, 5, 5)).astype(F32)
    layer(x, steps=4).sum().backward()
    assert np.abs(layer.weight.grad).sum() > 0
    assert layer.bias.grad.shape == (2,)
