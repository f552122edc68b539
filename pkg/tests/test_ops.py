import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergekin import (MergeError, MergeRecipe, apply_recipe, dare_drop,
                      merge_dare_ties, merge_linear, merge_slerp, merge_ties)
from conftest import tmap


def flat(m):
    return m.flatten()


# -- linear ----------------------------------------------------------------


def test_linear_identical_parents_fixed_point():
    a = tmap({"x": [1.0, -2.5, 3.25]})
    out = merge_linear([a, tmap({"x": [1.0, -2.5, 3.25]})], [0.3, 0.9])
    assert np.array_equal(flat(out), flat(a))


def test_linear_midpoint():
    out = merge_linear([tmap({"x": [1.0, 3.0]}), tmap({"x": [3.0, 1.0]})],
                       [1.0, 1.0])
    assert np.array_equal(flat(out), np.array([2.0, 2.0], np.float32))


def test_linear_three_parent_weighted():
    parents = [tmap({"x": [1.0, 0.0]}), tmap({"x": [0.0, 1.0]}),
               tmap({"x": [1.0, 1.0]})]
    out = merge_linear(parents, [1.0, 1.0, 2.0])
    assert np.allclose(flat(out), [0.75, 0.75], atol=1e-7)


def test_linear_rejects_nonpositive_weight():
    a, b = tmap({"x": [1.0]}), tmap({"x": [2.0]})
    with pytest.raises(MergeError):
        merge_linear([a, b], [1.0, 0.0])


def test_linear_weight_count_mismatch():
    a, b = tmap({"x": [1.0]}), tmap({"x": [2.0]})
    with pytest.raises(MergeError):
        merge_linear([a, b], [1.0])


def test_linear_equal_weights_commutative():
    a = tmap({"x": [1.0, 2.0, 3.0]})
    b = tmap({"x": [-4.0, 5.0, 0.5]})
    assert np.array_equal(flat(merge_linear([a, b], [1, 1])),
                          flat(merge_linear([b, a], [1, 1])))


# -- slerp -----------------------------------------------------------------


def test_slerp_endpoints_exact():
    a = tmap({"x": [1.0, 2.0], "y": [3.0]})
    b = tmap({"x": [-1.0, 0.5], "y": [7.0]})
    assert np.array_equal(flat(merge_slerp(a, b, 0.0)), flat(a))
    assert np.array_equal(flat(merge_slerp(a, b, 1.0)), flat(b))


def test_slerp_orthogonal_unit_midpoint():
    a = tmap({"x": [1.0, 0.0]})
    b = tmap({"x": [0.0, 1.0]})
    out = flat(merge_slerp(a, b, 0.5))
    assert np.allclose(out, [math.sqrt(2) / 2] * 2, atol=1e-7)


def test_slerp_general_against_scalar_formula():
    a_v, b_v = np.array([2.0, 0.0]), np.array([0.0, 1.0])
    out = flat(merge_slerp(tmap({"x": a_v}), tmap({"x": b_v}), 0.5))
    omega = math.pi / 2
    expected = (math.sin(0.5 * omega) / math.sin(omega)) * (a_v + b_v)
    assert np.allclose(out, expected, atol=1e-6)


def test_slerp_symmetry():
    rng = np.random.default_rng(3)
    a = tmap({"x": rng.normal(size=16)})
    b = tmap({"x": rng.normal(size=16)})
    for t in (0.2, 0.5, 0.9):
        lhs, rhs = flat(merge_slerp(a, b, t)), flat(merge_slerp(b, a, 1 - t))
        assert np.allclose(lhs, rhs, rtol=1e-6, atol=1e-6)


def test_slerp_colinear_falls_back_to_lerp():
    a = tmap({"x": [1.0, 1.0]})
    b = tmap({"x": [2.0, 2.0]})
    assert np.allclose(flat(merge_slerp(a, b, 0.25)), [1.25, 1.25], atol=1e-7)


def test_slerp_zero_tensor_falls_back_to_lerp():
    a = tmap({"x": [0.0, 0.0]})
    b = tmap({"x": [4.0, 0.0]})
    assert np.allclose(flat(merge_slerp(a, b, 0.5)), [2.0, 0.0], atol=1e-7)


def test_slerp_t_out_of_range():
    a, b = tmap({"x": [1.0]}), tmap({"x": [2.0]})
    with pytest.raises(MergeError):
        merge_slerp(a, b, 1.5)


# -- ties ------------------------------------------------------------------


def test_ties_hand_trace():
    # tau1=[1.0,-2.0,0.1], tau2=[0.8,3.0,-0.2], density=2/3:
    # trim drops 0.1 and -0.2; elected signs (+,+); means (0.9, 3.0)
    base = tmap({"x": [0.0, 0.0, 0.0]})
    p1 = tmap({"x": [1.0, -2.0, 0.1]})
    p2 = tmap({"x": [0.8, 3.0, -0.2]})
    out = flat(merge_ties([p1, p2], base, density=2 / 3, weight=1.0))
    assert np.array_equal(out, np.array([0.9, 3.0, 0.0], np.float32))


def test_ties_unanimous_identical_parents():
    base = tmap({"x": [1.0, 1.0]})
    p = tmap({"x": [2.0, 0.5]})
    out = flat(merge_ties([p, tmap({"x": [2.0, 0.5]})], base, 1.0, 1.0))
    assert np.allclose(out, [2.0, 0.5], atol=1e-7)


def test_ties_sign_tie_resolves_positive():
    base = tmap({"x": [0.0]})
    p1 = tmap({"x": [1.0]})
    p2 = tmap({"x": [-1.0]})
    out = flat(merge_ties([p1, p2], base, 1.0, 1.0))
    assert np.array_equal(out, np.array([1.0], np.float32))


def test_ties_weight_scales_merged_delta():
    base = tmap({"x": [0.0, 0.0]})
    p1 = tmap({"x": [2.0, 4.0]})
    p2 = tmap({"x": [2.0, 4.0]})
    out = flat(merge_ties([p1, p2], base, 1.0, 0.3))
    assert np.allclose(out, [0.6, 1.2], atol=1e-6)


def test_ties_trim_is_global_over_flattened_vector():
    # density keeps the single largest-magnitude entry across both tensors
    base = tmap({"a": [0.0], "b": [0.0, 0.0]})
    p1 = tmap({"a": [0.1], "b": [5.0, 0.2]})
    p2 = tmap({"a": [0.1], "b": [5.0, 0.2]})
    out = merge_ties([p1, p2], base, density=1 / 3, weight=1.0)
    assert np.array_equal(out.get("a"), np.array([0.0], np.float32))
    assert np.array_equal(out.get("b"), np.array([5.0, 0.0], np.float32))


def test_ties_support_invariant():
    rng = np.random.default_rng(11)
    base = tmap({"x": np.zeros(64)})
    taus = [rng.normal(size=64), rng.normal(size=64)]
    parents = [tmap({"x": t}) for t in taus]
    out = flat(merge_ties(parents, base, density=0.25, weight=1.0))
    m = math.ceil(0.25 * 64)
    kept = set()
    for t in taus:
        kept |= set(np.argsort(np.abs(t))[-m:].tolist())
    assert set(np.nonzero(out)[0].tolist()) <= kept


def test_ties_requires_two_parents():
    base = tmap({"x": [0.0]})
    with pytest.raises(MergeError):
        merge_ties([tmap({"x": [1.0]})], base, 0.5, 1.0)


def test_ties_density_range():
    base = tmap({"x": [0.0]})
    p = [tmap({"x": [1.0]}), tmap({"x": [2.0]})]
    with pytest.raises(MergeError):
        merge_ties(p, base, 0.0, 1.0)
    with pytest.raises(MergeError):
        merge_ties(p, base, 1.5, 1.0)


# -- dare ------------------------------------------------------------------


def test_dare_density_one_equals_ties_bit_exact():
    rng = np.random.default_rng(5)
    base = tmap({"x": rng.normal(size=32), "y": rng.normal(size=(4, 4))})
    p1 = tmap({"x": rng.normal(size=32), "y": rng.normal(size=(4, 4))})
    p2 = tmap({"x": rng.normal(size=32), "y": rng.normal(size=(4, 4))})
    t = merge_ties([p1, p2], base, 1.0, 0.7)
    d = merge_dare_ties([p1, p2], base, 1.0, 0.7, seed=123)
    assert np.array_equal(flat(t), flat(d))


def test_dare_deterministic_given_seed():
    rng = np.random.default_rng(6)
    base = tmap({"x": np.zeros(128)})
    p1 = tmap({"x": rng.normal(size=128)})
    p2 = tmap({"x": rng.normal(size=128)})
    a = merge_dare_ties([p1, p2], base, 0.5, 1.0, seed=42)
    b = merge_dare_ties([p1, p2], base, 0.5, 1.0, seed=42)
    assert np.array_equal(flat(a), flat(b))
    c = merge_dare_ties([p1, p2], base, 0.5, 1.0, seed=43)
    assert not np.array_equal(flat(a), flat(c))


def test_dare_parent_streams_independent():
    tau = np.ones(256, np.float32)
    d0 = dare_drop(tau, 0.5, seed=9, parent_index=0)
    d1 = dare_drop(tau, 0.5, seed=9, parent_index=1)
    assert not np.array_equal(d0, d1)


def test_dare_drop_values_are_rescaled_or_zero():
    tau = np.full(64, 2.0, np.float32)
    out = dare_drop(tau, 0.25, seed=1, parent_index=0)
    assert set(np.unique(out).tolist()) <= {0.0, 8.0}


def test_dare_unbiased_in_expectation():
    # aggregate over coordinates: the signed bias of the mean dropped
    # vector across seeds stays within 2% of the true aggregate
    rng = np.random.default_rng(7)
    tau = rng.uniform(0.1, 1.0, size=1024).astype(np.float32)
    acc = np.zeros(1024, np.float64)
    for seed in range(1000):
        acc += dare_drop(tau, 0.5, seed=seed, parent_index=0)
    mean = acc / 1000
    rel = abs(mean.sum() - tau.sum()) / abs(tau).sum()
    assert rel < 0.02


# -- recipes ---------------------------------------------------------------


def test_recipe_roundtrip_and_dispatch():
    recipe = MergeRecipe(operator="slerp", parents=["a", "b"],
                         params={"t": 0.5})
    back = MergeRecipe.from_dict(recipe.to_dict())
    assert back == recipe
    a = tmap({"x": [1.0, 0.0]})
    b = tmap({"x": [0.0, 1.0]})
    out = flat(apply_recipe(back, [a, b]))
    assert np.allclose(out, [math.sqrt(2) / 2] * 2, atol=1e-7)


def test_recipe_validation_errors():
    with pytest.raises(MergeError):
        MergeRecipe(operator="magic", parents=["a"]).validate()
    with pytest.raises(MergeError):
        MergeRecipe(operator="slerp", parents=["a"], params={"t": 0.5}).validate()
    with pytest.raises(MergeError):
        MergeRecipe(operator="ties", parents=["a", "b"],
                    params={"density": 0.5}).validate()
    with pytest.raises(MergeError):
        MergeRecipe(operator="dare_ties", parents=["a", "b"], base="base",
                    params={"density": 0.5}).validate()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-100, 100, width=32), min_size=2, max_size=12),
       st.floats(0.01, 1.0))
def test_ties_permutation_equivariant(vals, density):
    base = tmap({"x": np.zeros(len(vals))})
    p1 = tmap({"x": np.asarray(vals, np.float32)})
    p2 = tmap({"x": np.asarray(vals[::-1], np.float32)})
    out1 = flat(merge_ties([p1, p2], base, density, 1.0))
    out2 = flat(merge_ties([p2, p1], base, density, 1.0))
    assert np.array_equal(out1, out2)
