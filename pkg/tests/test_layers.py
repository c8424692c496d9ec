import math

import numpy as np
import pytest

from fgcprune import tensor as T
from fgcprune.errors import ConfigError, DimensionError
from fgcprune.layers import (EVAL, GATE_BIAS_INIT, OPEN_SHIFT, TRAIN, GatedNetwork,
                             GatingModuleParams, LayerSpec, NetworkSpec, conv_bn_relu,
                             gate_from_logits, gated_layer_forward, gating_forward,
                             hard_concrete_sample, open_probability)
from fgcprune.objectives import layer_costs
from fgcprune.tensor import Tensor

from conftest import check_grads


def small_spec(**kw):
    layers = [LayerSpec(6), LayerSpec(8, kernel=4, stride=2), LayerSpec(5, fgc=True)]
    return NetworkSpec(kw.pop("in_channels", 2), kw.pop("image_size", 8), 3, layers, **kw)


def test_open_probability_at_zero_logit():
    # sigma(0 - (2/3) log(0.1/1.1))
    expect = 1.0 / (1.0 + math.exp(-(2.0 / 3.0) * math.log(11.0)))
    assert open_probability(Tensor([0.0])).data[0] == pytest.approx(expect, rel=1e-14)
    assert expect == pytest.approx(0.832, abs=5e-4)
    assert OPEN_SHIFT == pytest.approx(1.599, abs=5e-4)


@pytest.mark.parametrize("logit,pi_ok,gate", [(20.0, lambda p: p > 0.999, 1.0),
                                              (-20.0, lambda p: p < 0.001, 0.0)])
def test_saturated_gates(logit, pi_ok, gate):
    st = gate_from_logits(Tensor([[logit]]), EVAL)
    assert pi_ok(st.pi.data[0, 0])
    assert st.gate.data[0, 0] == gate


def test_eval_threshold_tie_opens():
    st = gate_from_logits(Tensor([[-OPEN_SHIFT]]), EVAL)
    assert st.pi.data[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert st.gate.data[0, 0] == 1.0


def test_train_gate_in_unit_interval_and_eval_gate_binary(rng):
    logits = Tensor(rng.normal(0, 3, (50, 7)))
    g_train = gate_from_logits(logits, TRAIN, rng).gate.data
    g_eval = gate_from_logits(logits, EVAL).gate.data
    assert g_train.min() >= 0.0 and g_train.max() <= 1.0
    assert set(np.unique(g_eval)) <= {0.0, 1.0}


def test_train_mode_needs_rng():
    with pytest.raises(ConfigError):
        gate_from_logits(Tensor([[0.0]]), TRAIN)


def test_hard_concrete_sample_frequency_matches_open_probability():
    rng = np.random.default_rng(7)
    logits = np.array([-1.0, 0.0, 1.5])
    draws = np.stack([hard_concrete_sample(Tensor(logits), rng).data for _ in range(20000)])
    pi = open_probability(Tensor(logits)).data
    np.testing.assert_allclose((draws > 0).mean(axis=0), pi, atol=0.01)


def test_hard_concrete_grad_wrt_logits(rng):
    logits = rng.uniform(-1, 1, (3, 4))
    r = rng.uniform(-1, 1, (3, 4))

    def build(lg):
        return T.tsum(T.mul(hard_concrete_sample(lg, np.random.default_rng(5)), Tensor(r)))

    assert check_grads(build, [logits]) < 1e-5


def gating_params(rng, c_in, hidden, c_out, bias=0.0):
    return GatingModuleParams(Tensor(rng.normal(size=(c_in, hidden)), requires_grad=True),
                              Tensor(np.zeros(hidden), requires_grad=True),
                              Tensor(rng.normal(size=(hidden, c_out)), requires_grad=True),
                              Tensor(np.full(c_out, bias), requires_grad=True))


def test_gating_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        gating_forward(Tensor(np.ones((2, 3, 4, 4))), gating_params(rng, 4, 8, 5), EVAL)


def test_gating_module_params_get_nonzero_grads(rng):
    x = Tensor(rng.normal(size=(4, 3, 5, 5)))
    params = gating_params(rng, 3, 8, 6)
    st = gating_forward(x, params, TRAIN, rng)
    T.tsum(st.gate).backward()
    for p in (params.w1, params.b1, params.w2, params.b2):
        assert p.grad is not None and np.abs(p.grad).sum() > 0


def net_and_input(rng, spec=None):
    spec = spec or small_spec()
    net = GatedNetwork(spec, rng)
    return net, rng.normal(size=(4, spec.in_channels, spec.image_size, spec.image_size))


def test_gate_all_ones_equals_ungated(rng):
    net, x = net_and_input(rng)
    conv = net.conv_params(0)
    gp = net.gating_params(0)
    gp.b2.data[:] = 50.0  # saturate open
    gp.w2.data[:] = 0.0
    out, st, feat = gated_layer_forward(Tensor(x), conv, gp, EVAL)
    assert np.all(st.gate.data == 1.0)
    np.testing.assert_array_equal(out.data, conv_bn_relu(Tensor(x), conv, EVAL).data)


def test_gate_all_zeros_zeroes_output(rng):
    net, x = net_and_input(rng)
    gp = net.gating_params(0)
    gp.b2.data[:] = -50.0
    gp.w2.data[:] = 0.0
    out, _, _ = gated_layer_forward(Tensor(x), net.conv_params(0), gp, EVAL)
    assert not out.data.any()


def test_single_open_channel(rng):
    net, x = net_and_input(rng)
    conv = net.conv_params(0)
    conv.beta.data[:] = 1.0  # relu output strictly positive somewhere in every channel
    gp = net.gating_params(0)
    gp.w2.data[:] = 0.0
    gp.b2.data[:] = -50.0
    gp.b2.data[2] = 50.0
    out, _, _ = gated_layer_forward(Tensor(x), conv, gp, EVAL)
    live = np.flatnonzero(np.abs(out.data).sum(axis=(0, 2, 3)))
    assert live.tolist() == [2]


def test_force_open_matches_ungated_network(rng):
    spec = small_spec()
    net = GatedNetwork(spec, np.random.default_rng(3))
    x = rng.normal(size=(5, 2, 8, 8))
    ungated = NetworkSpec(2, 8, 3, [LayerSpec(l.channels, kernel=l.kernel, stride=l.stride,
                                              padding=l.padding, gated=False) for l in spec.layers])
    plain = GatedNetwork(ungated, np.random.default_rng(0))
    for name, p in plain.params.items():
        p.data = net.params[name].data.copy()
    a = net.forward(x, EVAL, force_open=True).logits.data
    b = plain.forward(x, EVAL).logits.data
    np.testing.assert_array_equal(a, b)


def test_eval_forward_is_repeatable(rng):
    net, x = net_and_input(rng)
    a = net.forward(x, EVAL).logits.data
    b = net.forward(x, EVAL).logits.data
    assert np.array_equal(a, b)


def test_train_forward_deterministic_under_seed(rng):
    spec = small_spec()
    x = rng.normal(size=(4, 2, 8, 8))
    outs = []
    for _ in range(2):
        net = GatedNetwork(spec, np.random.default_rng(11))
        outs.append(net.forward(x, TRAIN, np.random.default_rng(12)).logits.data)
    assert np.array_equal(*outs)


def test_layer_output_shapes_match_spec(rng):
    spec = small_spec()
    net, x = net_and_input(rng, spec)
    res = net.forward(x, EVAL)
    assert [o.shape[1:] for o in res.outputs] == [(6, 8, 8), (8, 4, 4), (5, 4, 4)]
    assert spec.shapes() == [(6, 8, 8), (8, 4, 4), (5, 4, 4)]


def test_records_pool_the_ungated_feature(rng):
    net, x = net_and_input(rng)
    res = net.forward(x, EVAL)
    rec = res.record(2)
    feat = conv_bn_relu(res.outputs[1], net.conv_params(2), EVAL)
    np.testing.assert_array_equal(rec.pooled.data, feat.data.mean(axis=(2, 3)))


def test_gate_head_bias_starts_open(rng):
    net, x = net_and_input(rng)
    assert np.all(net.params["layers.0.gate.b2"].data == GATE_BIAS_INIT)
    assert net.forward(x, EVAL).record(0).state.pi.data.mean() > 0.8


def test_gate_hidden_width():
    spec = small_spec()
    assert spec.gate_hidden(64) == 16
    assert spec.gate_hidden(6) == 8


def test_fc_layer_flattens_input(rng):
    spec = NetworkSpec(1, 8, 2, [LayerSpec(4, kernel=4, stride=2), LayerSpec(3, kind="fc", kernel=1, padding=0)])
    net = GatedNetwork(spec, rng)
    assert net.params["layers.1.conv.w"].shape == (3, 4 * 4 * 4, 1, 1)
    out = net.forward(rng.normal(size=(3, 1, 8, 8)), EVAL)
    assert out.logits.shape == (3, 2)


def test_input_shape_mismatch(rng):
    net, _ = net_and_input(rng)
    with pytest.raises(DimensionError):
        net.forward(np.zeros((2, 3, 8, 8)), EVAL)


def test_spec_rejects_fgc_on_ungated_layer():
    with pytest.raises(ConfigError):
        NetworkSpec(1, 8, 2, [LayerSpec(4, gated=False, fgc=True)]).validate()


def test_spec_roundtrip():
    spec = small_spec()
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_skip_path_matches_dense_eval(rng):
    spec = small_spec()
    net = GatedNetwork(spec, rng)
    for name, p in net.params.items():
        if name.endswith("gate.b2"):
            p.data[:] = rng.normal(0.0, 1.5, p.shape)
    x = rng.normal(size=(12, 2, 8, 8))
    res = net.forward(x, EVAL)
    closed = sum((1 - r.state.gate.data).sum() for r in res.layers)
    assert closed > 0
    skipped, macs = net.forward_skipping(x)
    np.testing.assert_allclose(skipped, res.logits.data, rtol=1e-12, atol=1e-12)
    assert np.array_equal(skipped.argmax(axis=1), res.logits.data.argmax(axis=1))
    assert macs.max() < sum(c.full_macs for c in layer_costs(spec))
