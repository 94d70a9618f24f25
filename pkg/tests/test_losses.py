"""Composite loss: closed-form identities, oracle equivalence, clamp
safety, gradient spot checks."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from branchvit.errors import ConfigError, DimensionError
from branchvit.heads import AdaptiveWeights, BranchOutputs
from branchvit.losses import (
    CLAMP_EPS,
    bce,
    composite_loss,
    consistency_loss,
    mlce,
    softmax_multilabel_ce,
)

from oracles import composite_loss_naive, finite_difference, relative_error


def composite_eval(*args, **kwargs):
    """composite_loss under no_grad for value-only assertions."""
    with torch.no_grad():
        return composite_loss(*args, **kwargs)


def make_weights(w, w_a, alpha, beta, dtype=torch.float64):
    weights = AdaptiveWeights(torch.tensor(w, dtype=dtype), w_a, alpha, beta)
    return weights.to(dtype)


def make_outputs(individual=None, aggregate=None, dtype=torch.float64):
    return BranchOutputs(
        individual=None if individual is None else torch.tensor(individual, dtype=dtype),
        aggregate=None if aggregate is None else torch.tensor(aggregate, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# closed-form identities


def test_bce_of_half_is_ln2():
    value = bce(torch.tensor(1.0, dtype=torch.float64), torch.tensor(0.5, dtype=torch.float64))
    assert abs(float(value) - math.log(2.0)) < 1e-9


def test_mlce_identity():
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    p = torch.tensor([0.5, 0.5], dtype=torch.float64)
    assert abs(float(mlce(y, p)) - math.log(2.0)) < 1e-9


def test_consistency_identity():
    u = torch.tensor([1.0, 0.0], dtype=torch.float64)
    v = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert abs(float(consistency_loss(u, v)) - math.sqrt(2.0)) < 1e-9


def test_consistency_zero_at_equality():
    u = torch.tensor([0.3, 0.7, 0.1], dtype=torch.float64)
    assert float(consistency_loss(u, u.clone())) == 0.0


def test_bce_finite_at_saturated_probabilities():
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    for p in ([0.0, 0.0], [1.0, 1.0]):
        value = bce(y, torch.tensor(p, dtype=torch.float64))
        assert torch.isfinite(value).all()
        # clamp floor: -log(eps) bounds the per-element loss
        assert float(value.max()) <= -math.log(CLAMP_EPS) + 1e-9


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        mlce(torch.zeros(3), torch.zeros(4))
    with pytest.raises(DimensionError):
        consistency_loss(torch.zeros(3), torch.zeros(4))


# ---------------------------------------------------------------------------
# composite loss vs independent oracle


@settings(max_examples=60, deadline=None)
@given(data=st.data(), c=st.integers(1, 6))
def test_composite_matches_naive_oracle(data, c):
    floats = st.floats(0.001, 0.999)
    labels = data.draw(st.lists(st.integers(0, 1), min_size=c, max_size=c))
    individual = data.draw(st.lists(floats, min_size=c, max_size=c))
    aggregate = data.draw(st.lists(floats, min_size=c, max_size=c))
    w = data.draw(st.lists(st.floats(0.1, 4.0), min_size=c, max_size=c))
    w_a, alpha, beta = (data.draw(st.floats(0.05, 4.0)) for _ in range(3))

    weights = make_weights(w, w_a, alpha, beta)
    outputs = make_outputs(individual, aggregate)
    with torch.no_grad():
        got = composite_loss(torch.tensor(labels, dtype=torch.float64), outputs, weights)

    # feed the oracle the values the module actually stores (post float32 init)
    stored_w = [float(x) for x in weights.w.detach()]
    want = composite_loss_naive(
        labels, individual, aggregate, stored_w,
        float(weights.w_a.detach()), float(weights.alpha.detach()),
        float(weights.beta.detach()), CLAMP_EPS,
    )
    assert relative_error(float(got.bce_mean), want[0], 1e-12) < 1e-10
    assert relative_error(float(got.mlce), want[1], 1e-12) < 1e-10
    assert relative_error(float(got.consistency), want[2], 1e-12) < 1e-10
    assert relative_error(float(got.total), want[3], 1e-12) < 1e-10


@settings(max_examples=100, deadline=None)
@given(data=st.data(), c=st.integers(1, 5))
def test_total_is_exact_sum_of_components(data, c):
    floats = st.floats(0.0, 1.0)
    labels = torch.tensor(data.draw(st.lists(st.integers(0, 1), min_size=c, max_size=c)),
                          dtype=torch.float64)
    outputs = make_outputs(
        data.draw(st.lists(floats, min_size=c, max_size=c)),
        data.draw(st.lists(floats, min_size=c, max_size=c)),
    )
    weights = make_weights([1.0] * c, 0.5, 2.0, 1.0)
    got = composite_eval(labels, outputs, weights)
    total = float(got.bce_mean) + float(got.mlce) + float(got.consistency)
    assert float(got.total) == total  # bitwise: total is built as this sum


def test_batch_loss_is_mean_of_singles(torch_gen):
    b, c = 5, 3
    labels = (torch.rand(b, c, generator=torch_gen, dtype=torch.float64) > 0.5).double()
    individual = torch.rand(b, c, generator=torch_gen, dtype=torch.float64)
    aggregate = torch.rand(b, c, generator=torch_gen, dtype=torch.float64)
    weights = make_weights([1.3, 0.7, 2.0], 0.25, 1.5, 0.5)
    batch = composite_eval(labels, BranchOutputs(individual=individual, aggregate=aggregate), weights)
    singles = [
        composite_eval(labels[i], BranchOutputs(individual=individual[i], aggregate=aggregate[i]),
                       weights)
        for i in range(b)
    ]
    for term in ("bce_mean", "mlce", "consistency"):
        mean = float(np.mean([float(getattr(s, term)) for s in singles]))
        assert relative_error(float(getattr(batch, term)), mean, 1e-12) < 1e-12


def test_missing_branches_zero_their_terms():
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
    weights = make_weights([1.0, 1.0], 0.5, 1.0, 1.0)
    indiv_only = composite_eval(labels, make_outputs(individual=[0.8, 0.2]), weights)
    assert float(indiv_only.mlce) == 0.0 and float(indiv_only.consistency) == 0.0
    assert float(indiv_only.bce_mean) > 0.0
    agg_only = composite_eval(labels, make_outputs(aggregate=[0.8, 0.2]), weights)
    assert float(agg_only.bce_mean) == 0.0 and float(agg_only.consistency) == 0.0
    assert float(agg_only.mlce) > 0.0
    with pytest.raises(ConfigError):
        composite_eval(labels, BranchOutputs(), weights)


def test_weight_scaling_modes_differ_and_scale_loss_is_literal():
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
    outputs = make_outputs([0.6, 0.3], [0.5, 0.5])
    weights = make_weights([2.0, 0.5], 0.4, 1.0, 1.0)
    prob_mode = composite_eval(labels, outputs, weights, bce_weight_mode="scale_prob")
    loss_mode = composite_eval(labels, outputs, weights, bce_weight_mode="scale_loss")
    assert float(prob_mode.bce_mean) != float(loss_mode.bce_mean)
    # scale_loss multiplies per-class BCE values by w_c before averaging
    per_class = -np.log(np.clip([0.6, 1 - 0.3], CLAMP_EPS, 1 - CLAMP_EPS))
    want = float(np.mean([2.0 * per_class[0], 0.5 * per_class[1]]))
    assert relative_error(float(loss_mode.bce_mean), want, 1e-12) < 1e-10
    with pytest.raises(ConfigError):
        composite_eval(labels, outputs, weights, bce_weight_mode="nonsense")


def test_scale_prob_clamps_weighted_probability():
    """w_c * y_c above 1 must clamp, keeping the BCE finite and bounded."""
    labels = torch.tensor([1.0], dtype=torch.float64)
    outputs = make_outputs([0.9], [0.9])
    weights = make_weights([50.0], 40.0, 1.0, 1.0)
    got = composite_eval(labels, outputs, weights)
    assert torch.isfinite(got.total)
    # clamp(50 * 0.9) = 1 - eps, so BCE(1, .) = -log(1-eps) ~ eps
    assert float(got.bce_mean) < 1e-6


def test_labels_dtype_follows_outputs():
    labels = torch.tensor([1, 0])  # int64 labels
    outputs = make_outputs([0.5, 0.5], [0.5, 0.5], dtype=torch.float32)
    weights = make_weights([1.0, 1.0], 0.5, 1.0, 1.0, dtype=torch.float32)
    got = composite_eval(labels, outputs, weights)
    assert got.total.dtype == torch.float32


# ---------------------------------------------------------------------------
# gradients of the adaptive weights (finite differences)


def test_weight_gradients_match_finite_differences():
    torch.manual_seed(21)
    c = 3
    labels = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    individual = torch.rand(c, dtype=torch.float64) * 0.8 + 0.1
    aggregate = torch.rand(c, dtype=torch.float64) * 0.8 + 0.1
    weights = make_weights([1.2, 0.6, 0.9], 0.3, 2.0, 1.5)

    def loss_value() -> float:
        with torch.no_grad():
            out = BranchOutputs(individual=individual.clone(), aggregate=aggregate.clone())
            return float(composite_loss(labels, out, weights).total)

    out = BranchOutputs(individual=individual.clone(), aggregate=aggregate.clone())
    total = composite_loss(labels, out, weights).total
    weights.zero_grad()
    total.backward()

    checks = [("w_a", weights.w_a, None), ("alpha", weights.alpha, None), ("beta", weights.beta, None)]
    checks += [(f"w[{i}]", weights.w, i) for i in range(c)]
    for name, param, idx in checks:
        grad = float(param.grad if idx is None else param.grad[idx])

        def get():
            with torch.no_grad():
                return float(param if idx is None else param[idx])

        def set_(value):
            with torch.no_grad():
                if idx is None:
                    param.fill_(value)
                else:
                    param[idx] = value

        fd = finite_difference(loss_value, get, set_, h=1e-6)
        assert relative_error(grad, fd) < 1e-4, name


# ---------------------------------------------------------------------------
# softmax-head objective (no_mbo ablation)


def test_softmax_ce_targets_are_normalized():
    probs = torch.tensor([[0.5, 0.25, 0.25]], dtype=torch.float64)
    two_hot = softmax_multilabel_ce(torch.tensor([[1.0, 1.0, 0.0]]), probs)
    want = -(0.5 * math.log(0.5) + 0.5 * math.log(0.25))
    assert abs(float(two_hot.total) - want) < 1e-12
    one_hot = softmax_multilabel_ce(torch.tensor([[1.0, 0.0, 0.0]]), probs)
    assert abs(float(one_hot.total) - (-math.log(0.5))) < 1e-12


def test_softmax_ce_all_zero_row_is_unsupervised():
    probs = torch.tensor([[0.5, 0.5], [0.9, 0.1]], dtype=torch.float64)
    labels = torch.tensor([[0.0, 0.0], [1.0, 0.0]])
    got = softmax_multilabel_ce(labels, probs)
    # only the second row supervises; the batch mean halves its CE
    assert abs(float(got.total) - (-math.log(0.9)) / 2) < 1e-12
    assert float(got.mlce) == 0.0 and float(got.consistency) == 0.0


def test_softmax_ce_shape_mismatch():
    with pytest.raises(DimensionError):
        softmax_multilabel_ce(torch.zeros(2, 3), torch.zeros(2, 4))
