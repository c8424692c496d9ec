import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import normalized_mutual_info_score

from fgcprune import objectives as O
from fgcprune.errors import ConfigError, ContractError
from fgcprune.layers import EVAL, LayerSpec, NetworkSpec, gate_from_logits
from fgcprune.tensor import Tensor

from conftest import check_grads


# -- cross-entropy --------------------------------------------------------------

def test_ce_uniform_logits_is_log_c():
    assert O.cross_entropy(Tensor(np.zeros((3, 5))), [0, 2, 4]).item() == pytest.approx(math.log(5), rel=1e-15)


def test_ce_large_margin_goes_to_zero():
    assert O.cross_entropy(Tensor([[800.0, 0.0]]), [0]).item() == 0.0


def test_ce_direct_oracle(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([2, 0, 1, 1])
    expect = np.mean([-math.log(math.exp(r[y]) / sum(math.exp(v) for v in r)) for r, y in zip(logits, labels)])
    assert abs(O.cross_entropy(Tensor(logits), labels).item() - expect) < 1e-12


def test_ce_grad(rng):
    labels = np.array([1, 0, 2])
    assert check_grads(lambda t: O.cross_entropy(t, labels), [rng.uniform(-1, 1, (3, 3))]) < 1e-6


@pytest.mark.parametrize("labels", [[0, 3], [-1, 0], [0]])
def test_ce_bad_labels(labels):
    with pytest.raises(ContractError):
        O.cross_entropy(Tensor(np.zeros((2, 3))), labels)


# -- L0 surrogate ----------------------------------------------------------------

def test_l0_zero_logits_width_four():
    st_ = gate_from_logits(Tensor(np.zeros((1, 4))), EVAL)
    expect = 4.0 / (1.0 + math.exp(-(2.0 / 3.0) * math.log(11.0)))
    assert O.l0_surrogate(st_).item() == pytest.approx(expect, rel=1e-14)
    assert expect == pytest.approx(3.327, abs=5e-4)


@pytest.mark.parametrize("logit,expect", [(60.0, 6.0), (-60.0, 0.0)])
def test_l0_saturation(logit, expect):
    assert O.l0_surrogate(gate_from_logits(Tensor(np.full((2, 6), logit)), EVAL)).item() == pytest.approx(expect, abs=1e-12)


def test_l0_grad(rng):
    def build(lg):
        return O.l0_surrogate(gate_from_logits(lg, EVAL))
    assert check_grads(build, [rng.uniform(-1, 1, (3, 5))]) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=3, max_size=3), st.integers(0, 2), st.floats(1e-3, 2.0))
def test_l0_monotone_in_each_logit(logits, idx, bump):
    base = np.array([logits])
    up = base.copy()
    up[0, idx] += bump
    a = O.l0_surrogate(gate_from_logits(Tensor(base), EVAL)).item()
    b = O.l0_surrogate(gate_from_logits(Tensor(up), EVAL)).item()
    assert b >= a


def test_open_gate_count():
    st_ = gate_from_logits(Tensor([[5.0, -5.0, 5.0], [-5.0, -5.0, 5.0]]), EVAL)
    assert O.open_gate_count(st_) == 1.5


# -- composite objective ---------------------------------------------------------

def test_total_without_extra_terms_is_ce():
    b = O.total_loss(Tensor(1.25), {2: Tensor(7.0)}, {0: Tensor(3.0)}, eta=0.0, rho=0.0)
    assert b.total == 1.25


def test_total_arithmetic():
    b = O.total_loss(0.0, {1: 2.0}, {0: 3.0, 1: 5.0}, eta=1.0, rho=0.4)
    assert b.total == pytest.approx(2.0 + 0.4 * 8.0, abs=1e-15)


def test_total_recomposes(rng):
    for _ in range(50):
        b = O.total_loss(rng.uniform(0, 3), {i: rng.uniform(0, 500) for i in range(3)},
                         {i: rng.uniform(0, 64) for i in range(4)}, rng.uniform(0, 0.1), rng.uniform(0, 1))
        assert abs(b.recompose() - b.total) < 1e-12


def test_total_rejects_negative_weights():
    with pytest.raises(ConfigError):
        O.total_loss(0.0, {}, {}, eta=-1.0)


# -- mutual-information bound ------------------------------------------------------

def test_mi_bound_zero_loss():
    assert O.mi_lower_bound(0.0, 100, 5) == (math.log(100), math.log(100))


def test_mi_bound_uniform_single_neighbor():
    total, per_pair = O.mi_lower_bound(math.log(50), 50, 1)
    assert total == 0.0 and per_pair == 0.0


def test_mi_per_pair_never_exceeds_log_n(rng):
    for loss in rng.uniform(0, 1e3, 100):
        _, per_pair = O.mi_lower_bound(float(loss), 2000, 20)
        assert per_pair <= math.log(2000)


def test_mi_bound_needs_two_instances():
    with pytest.raises(ConfigError):
        O.mi_lower_bound(1.0, 1, 1)


# -- FLOPs and pruning ratio -------------------------------------------------------

def chain_spec():
    return NetworkSpec(1, 8, 2, [LayerSpec(4), LayerSpec(6, kernel=4, stride=2)])


def test_all_open_is_zero():
    spec = chain_spec()
    masks = [np.ones((5, 4)), np.ones((5, 6))]
    assert O.pruning_ratio(spec, masks).pruning_ratio == 0.0


def test_half_closed_single_layer():
    spec = NetworkSpec(1, 8, 2, [LayerSpec(4)])
    mask = np.tile([1.0, 1.0, 0.0, 0.0], (3, 1))
    rep = O.pruning_ratio(spec, [mask])
    assert rep.gated_flops[0] == rep.full_flops[0] / 2


def test_layer_costs_by_hand():
    costs = O.layer_costs(chain_spec())
    assert [c.full_macs for c in costs] == [1 * 4 * 9 * 64, 4 * 6 * 16 * 16, 6 * 2]
    assert costs[0].gate_overhead_macs == 1 * 8 + 8 * 4


def test_overhead_reported_separately():
    spec = chain_spec()
    rep = O.pruning_ratio(spec, [np.ones((2, 4)), np.ones((2, 6))])
    expect = -sum(rep.gate_overhead_flops) / sum(rep.full_flops)
    assert rep.pruning_ratio_with_overhead == pytest.approx(expect, rel=1e-12)
    assert "1 MAC = 2 FLOPs" in rep.to_record()["convention"]


def test_pruning_ratio_rejects_bad_frequency():
    with pytest.raises(ConfigError):
        O.pruning_ratio(chain_spec(), [np.full((2, 4), 1.5), np.ones((2, 6))])


def test_closing_a_channel_never_lowers_ratio(rng):
    spec = chain_spec()
    masks = [(rng.uniform(size=(10, 4)) < 0.7).astype(float), (rng.uniform(size=(10, 6)) < 0.7).astype(float)]
    base = O.pruning_ratio(spec, masks).pruning_ratio
    for layer in range(2):
        for n, c in zip(*np.nonzero(masks[layer])):
            m = [x.copy() for x in masks]
            m[layer][n, c] = 0.0
            assert O.pruning_ratio(spec, m).pruning_ratio >= base


def test_execution_frequency_recount(rng):
    labels = rng.integers(0, 3, 40)
    mask = (rng.uniform(size=(40, 5)) < 0.5).astype(float)
    freq = O.execution_frequency([mask], labels, 3)[0]
    for c in range(3):
        for ch in range(5):
            sel = [mask[i, ch] for i in range(40) if labels[i] == c]
            assert freq[ch, c] == pytest.approx(sum(sel) / len(sel), rel=1e-15)
    assert freq.min() >= 0 and freq.max() <= 1


# -- NMI ----------------------------------------------------------------------------

def test_nmi_identical():
    assert O.nmi([0, 1, 1, 2], [0, 1, 1, 2]) == pytest.approx(1.0)


def test_nmi_relabel_invariant():
    assert O.nmi([0, 0, 1, 2, 2], [5, 5, 9, 7, 7]) == pytest.approx(1.0)


def test_nmi_independent_uniform_is_small():
    rng = np.random.default_rng(0)
    assert O.nmi(rng.integers(0, 10, 10000), rng.integers(0, 10, 10000)) < 0.02


def test_nmi_constant_assignment_is_error():
    with pytest.raises(ContractError):
        O.nmi([1, 1, 1], [0, 1, 2])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), min_size=4, max_size=60))
def test_nmi_symmetric_bounded_and_matches_sklearn(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    if len(set(a)) < 2 or len(set(b)) < 2:
        return
    ab, ba = O.nmi(a, b), O.nmi(b, a)
    assert abs(ab - ba) < 1e-12
    assert 0.0 <= ab <= 1.0
    assert abs(ab - normalized_mutual_info_score(a, b, average_method="geometric")) < 1e-10


def test_embedding_self_nmi_is_one(rng):
    x = np.concatenate([rng.normal(c * 5, 1, (30, 3)) for c in range(3)])
    assert O.embedding_nmi(x, x, 3, seed=4) == pytest.approx(1.0)


def test_discretize_is_seeded(rng):
    x = rng.normal(size=(60, 4))
    assert np.array_equal(O.discretize(x, 4, 1), O.discretize(x, 4, 1))
