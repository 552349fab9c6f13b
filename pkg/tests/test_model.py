from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixed_lrmoe import (
    Dataset,
    DegenerateWarning,
    Gamma,
    InvalidArgumentError,
    LogNormal,
    MixedLRMoEModel,
    RandomEffectDesign,
    ZILogNormal,
    conditional_loglik,
    gating_probs,
    latent_class_responsibilities_given_w,
)
from mixed_lrmoe.model import free_beta_rows, identified_pattern
from oracles import row_logliks


def _model(alpha, beta, experts, S=()):
    return MixedLRMoEModel(np.array(alpha, float), np.array(beta, float), experts, RandomEffectDesign(S))


def test_symmetric_gating():
    m = _model(np.zeros((4, 3)), np.zeros((4, 2)), ((Gamma(1, 1),),) * 4, (3, 5))
    np.testing.assert_allclose(gating_probs([1.0, 0.3, -2.0], [0.7, -1.1], m), [0.25] * 4, atol=1e-15)


def test_single_class_gating():
    m = _model([[0.4, -0.2]], [[0.0]], ((Gamma(1, 1),),), (2,))
    assert gating_probs([1.0, 5.0], [3.0], m).tolist() == [1.0]


def test_two_class_hand_value():
    m = _model([[math.log(2.0)], [0.0]], [[1.0], [0.0]], ((Gamma(1, 1),), (Gamma(2, 1),)), (1,))
    np.testing.assert_allclose(gating_probs([1.0], [0.0], m), [2 / 3, 1 / 3], rtol=1e-14)


def test_gating_rejects_non_finite():
    m = _model([[0.0], [0.0]], [[1.0], [0.0]], ((Gamma(1, 1),), (Gamma(2, 1),)), (1,))
    with pytest.raises(InvalidArgumentError):
        gating_probs([np.nan], [0.0], m)
    with pytest.raises(InvalidArgumentError):
        gating_probs([1.0], [np.inf], m)


_finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(
    g=st.integers(1, 5),
    alpha=arrays(float, (5, 3), elements=_finite),
    beta=arrays(float, (5, 2), elements=_finite),
    x=arrays(float, 2, elements=_finite),
    w=arrays(float, 2, elements=_finite),
    shift=arrays(float, 3, elements=st.floats(-5, 5)),
)
def test_gating_is_probability_vector_and_shift_invariant(g, alpha, beta, x, w, shift):
    experts = ((Gamma(1, 1),),) * g
    m = _model(alpha[:g], beta[:g], experts, (4, 4))
    xx = np.r_[1.0, x]
    p = gating_probs(xx, w, m)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12
    p2 = gating_probs(xx, w, m.replace(alpha=alpha[:g] + shift))
    np.testing.assert_allclose(p2, p, atol=1e-12)


def test_gating_overflow_safe():
    m = _model([[800.0], [0.0]], [[1.0], [0.0]], ((Gamma(1, 1),), (Gamma(2, 1),)), (1,))
    p = gating_probs([1.0], [0.0], m)
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def _random_data(rng, n, P, L, S, D=1):
    X = np.ones((n, P))
    X[:, 1:] = rng.normal(size=(n, P - 1))
    Y = rng.gamma(2.0, 2.0, (n, D))
    fi = np.column_stack([rng.integers(0, s, n) for s in S]) if L else None
    return Dataset(X, Y, fi)


def test_single_class_loglik_is_sum_of_expert_terms():
    rng = np.random.default_rng(0)
    d = _random_data(rng, 12, 2, 1, (3,), D=2)
    e = (Gamma(2.0, 1.5), LogNormal(0.5, 0.9))
    m = _model([[0.3, 0.1]], [[0.0]], (e,), (3,))
    w = [rng.normal(size=3)]
    ref = sum(e[k].logpdf(d.Y[:, k]).sum() for k in range(2))
    assert conditional_loglik(d, m, w) == pytest.approx(ref, rel=1e-13)


def test_one_row_two_classes_by_hand():
    d = Dataset([[1.0, 0.5]], [[2.0]], [[1]])
    m = _model([[0.2, -1.0], [0.0, 0.0]], [[1.0], [0.0]], ((Gamma(2, 1),), (LogNormal(0, 1),)), (2,))
    w = [np.array([0.3, -0.4])]
    eta1 = 0.2 - 0.5 - 0.4
    p1 = math.exp(eta1) / (1 + math.exp(eta1))
    f1 = 2.0 * math.exp(-2.0)
    f2 = math.exp(-0.5 * math.log(2.0) ** 2) / (2.0 * math.sqrt(2 * math.pi))
    assert conditional_loglik(d, m, w) == pytest.approx(math.log(p1 * f1 + (1 - p1) * f2), rel=1e-14)


@pytest.mark.parametrize("seed", range(6))
def test_fixed_effects_loglik_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    n, P, g = int(rng.integers(1, 11)), 3, 3
    d = _random_data(rng, n, P, 0, ())
    alpha = rng.normal(size=(g, P))
    experts = ((Gamma(1.5, 2.0),), (LogNormal(1.0, 0.4),), (Gamma(6.0, 0.5),))
    m = _model(alpha, np.zeros((g, 0)), experts)
    ref = row_logliks(d, m, np.zeros((n, 0))).sum()
    assert conditional_loglik(d, m, []) == pytest.approx(ref, rel=1e-13)


def test_zero_density_everywhere_gives_minus_infinity():
    d = Dataset(np.ones((3, 1)), [1.0, 0.0, 2.0])
    m = _model([[0.0], [0.0]], np.zeros((2, 0)), ((Gamma(1, 1),), (LogNormal(0, 1),)))
    with pytest.warns(DegenerateWarning, match=r"rows \[1\]"):
        assert conditional_loglik(d, m, []) == -np.inf


def test_responsibilities_basic_cases():
    rng = np.random.default_rng(2)
    d = _random_data(rng, 8, 2, 1, (2,))
    one = _model([[0.1, 0.2]], [[0.0]], ((Gamma(2, 2),),), (2,))
    w = [rng.normal(size=2)]
    assert np.all(latent_class_responsibilities_given_w(d, one, w) == 1.0)

    same = _model([[0.4, -0.3], [0.0, 0.0]], [[1.0], [0.0]], ((Gamma(2, 2),), (Gamma(2, 2),)), (2,))
    r = latent_class_responsibilities_given_w(d, same, w)
    ref = np.array([gating_probs(d.X[i], [w[0][d.factor_index[i, 0]]], same) for i in range(d.n)])
    np.testing.assert_allclose(r, ref, atol=1e-14)


def test_one_row_responsibility_by_hand():
    d = Dataset([[1.0]], [[3.0]])
    m = _model([[math.log(3.0)], [0.0]], np.zeros((2, 0)), ((Gamma(1, 1),), (Gamma(1, 2),)))
    p1, f1, f2 = 0.75, math.exp(-3.0), 0.5 * math.exp(-1.5)
    r = latent_class_responsibilities_given_w(d, m, [])
    assert r[0, 0] == pytest.approx(p1 * f1 / (p1 * f1 + (1 - p1) * f2), rel=1e-14)


def test_responsibilities_sum_to_one_and_relabel_equivariant():
    rng = np.random.default_rng(3)
    d = _random_data(rng, 30, 2, 1, (4,))
    alpha = np.array([[0.5, -0.2], [-0.3, 0.8], [0.0, 0.0]])
    beta = np.array([[1.0], [0.4], [0.0]])
    experts = ((Gamma(1.0, 1.0),), (Gamma(3.0, 2.0),), (LogNormal(1.0, 0.5),))
    m = _model(alpha, beta, experts, (4,))
    w = [rng.normal(size=4)]
    r = latent_class_responsibilities_given_w(d, m, w)
    assert np.max(np.abs(r.sum(axis=1) - 1.0)) <= 1e-12
    perm = [1, 0, 2]
    mp = _model(alpha[perm], beta[perm], tuple(experts[k] for k in perm), (4,))
    np.testing.assert_allclose(latent_class_responsibilities_given_w(d, mp, w), r[:, perm], atol=1e-14)


def test_degenerate_row_becomes_uniform():
    d = Dataset(np.ones((2, 1)), [0.0, 1.0])
    m = _model([[0.0], [0.0]], np.zeros((2, 0)), ((Gamma(1, 1),), (LogNormal(0, 1),)))
    with pytest.warns(DegenerateWarning):
        r = latent_class_responsibilities_given_w(d, m, [])
    np.testing.assert_array_equal(r[0], [0.5, 0.5])


def test_multivariate_responses_multiply():
    d = Dataset(np.ones((1, 1)), [[1.0, 0.0]])
    m = _model([[0.0]], np.zeros((1, 0)), ((Gamma(2, 1), ZILogNormal(0.25, 0, 1)),))
    assert conditional_loglik(d, m, []) == pytest.approx(-1.0 + math.log(0.25), rel=1e-14)


def test_dataset_validation():
    with pytest.raises(InvalidArgumentError, match="intercept"):
        Dataset([[2.0, 1.0]], [1.0])
    with pytest.raises(InvalidArgumentError):
        Dataset([[1.0]], [1.0], [[-1]])
    with pytest.raises(InvalidArgumentError):
        Dataset(np.ones((2, 1)), [1.0])
    with pytest.raises(InvalidArgumentError):
        Dataset([[1.0]], [np.nan])
    d = Dataset(np.ones((2, 1)), [1.0, 2.0], [[0], [3]])
    with pytest.raises(InvalidArgumentError, match="out of range"):
        d.check_design(RandomEffectDesign((3,)))
    with pytest.raises(ValueError):
        d.X[0, 0] = 5.0


def test_model_validation():
    with pytest.raises(InvalidArgumentError):
        _model([[0.0], [0.0]], np.zeros((2, 0)), ((Gamma(1, 1),),))
    with pytest.raises(InvalidArgumentError):
        _model([[np.inf], [0.0]], np.zeros((2, 0)), ((Gamma(1, 1),), (Gamma(1, 1),)))
    with pytest.raises(InvalidArgumentError):
        RandomEffectDesign((0,))


def test_identifiability_pattern():
    alpha, beta = identified_pattern(np.ones((3, 2)), np.full((3, 2), 0.5))
    assert alpha[-1].tolist() == [0, 0] and beta[0].tolist() == [1, 1] and beta[-1].tolist() == [0, 0]
    assert beta[1].tolist() == [0.5, 0.5]
    _, b1 = identified_pattern(np.ones((1, 2)), np.full((1, 1), 0.5))
    assert b1.tolist() == [[0.0]]
    assert list(free_beta_rows(2)) == [] and list(free_beta_rows(4)) == [1, 2]
