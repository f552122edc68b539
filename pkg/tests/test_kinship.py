import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergekin import (KinshipError, compute_delta, delta_from_array,
                      kinship_group, kinship_matrix, sim_pair)
from conftest import tmap


def brute(x, y, metric):
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if metric == "pcc":
        return float(np.corrcoef(x, y)[0, 1])
    if metric == "cs":
        return float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return float(np.linalg.norm(x - y))


def test_compute_delta_elementwise():
    d = compute_delta(tmap({"x": [3.0, 5.0]}), tmap({"x": [1.0, 2.0]}))
    assert np.array_equal(np.concatenate(list(d.stream())),
                          np.array([2.0, 3.0], np.float32))


def test_delta_zero_base_equals_model():
    m = tmap({"x": [1.0, -4.0], "y": [2.0]})
    d = compute_delta(m, tmap({"x": [0.0, 0.0], "y": [0.0]}))
    assert np.array_equal(np.concatenate(list(d.stream())), m.flatten())


def test_self_similarity():
    v = np.array([1.0, 2.0, -3.0], np.float32)
    d1, d2 = delta_from_array(v), delta_from_array(v.copy())
    assert sim_pair(d1, d2, "pcc") == 1.0
    assert sim_pair(d1, d2, "cs") == 1.0
    assert sim_pair(d1, d2, "ed") == 0.0


def test_pcc_small_example():
    # zero-mean vectors: cov 1, norms sqrt(2)*sqrt(2)
    d1 = delta_from_array([1.0, 0.0, -1.0])
    d2 = delta_from_array([0.0, 1.0, -1.0])
    assert abs(sim_pair(d1, d2, "pcc") - 0.5) < 1e-12


def test_ed_pythagorean_and_cs_zero_norm_error():
    d1 = delta_from_array([0.0, 0.0])
    d2 = delta_from_array([3.0, 4.0])
    assert sim_pair(d1, d2, "ed") == 5.0
    with pytest.raises(KinshipError, match="zero-norm"):
        sim_pair(d1, d2, "cs")


def test_pcc_constant_delta_error():
    d1 = delta_from_array([2.0, 2.0, 2.0])
    d2 = delta_from_array([1.0, 2.0, 3.0])
    with pytest.raises(KinshipError, match="constant"):
        sim_pair(d1, d2, "pcc")


def test_incomparable_deltas_rejected():
    d1 = delta_from_array([1.0, 2.0], base_id="b1")
    d2 = delta_from_array([1.0, 2.0], base_id="b2")
    with pytest.raises(KinshipError, match="not comparable"):
        sim_pair(d1, d2, "pcc")
    d3 = delta_from_array([1.0, 2.0, 3.0])
    with pytest.raises(KinshipError, match="not comparable"):
        sim_pair(delta_from_array([1.0, 2.0]), d3, "ed")


def test_unknown_metric_rejected():
    d = delta_from_array([1.0, 2.0])
    with pytest.raises(KinshipError, match="unknown metric"):
        sim_pair(d, d, "manhattan")


@pytest.mark.parametrize("metric", ["pcc", "cs", "ed"])
@pytest.mark.parametrize("d", [10, 1000])
def test_streaming_matches_brute_force(metric, d):
    rng = np.random.default_rng(d)
    for _ in range(20):
        x = rng.normal(size=d).astype(np.float32)
        y = rng.normal(size=d).astype(np.float32)
        got = sim_pair(delta_from_array(x), delta_from_array(y), metric)
        want = brute(x, y, metric)
        assert got == pytest.approx(want, rel=1e-6, abs=1e-9)


def test_streaming_chunked_equals_single_chunk():
    rng = np.random.default_rng(0)
    x = rng.normal(size=300).astype(np.float32)
    y = rng.normal(size=300).astype(np.float32)
    model = tmap({"a": x[:100], "b": x[100:250], "c": x[250:]})
    other = tmap({"a": y[:100], "b": y[100:250], "c": y[250:]})
    base = tmap({"a": np.zeros(100), "b": np.zeros(150), "c": np.zeros(50)})
    for metric in ("pcc", "cs", "ed"):
        chunked = sim_pair(compute_delta(model, base),
                           compute_delta(other, base), metric)
        whole = sim_pair(delta_from_array(x), delta_from_array(y), metric)
        assert chunked == pytest.approx(whole, rel=1e-9, abs=1e-12)


def test_symmetry_and_ranges():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.normal(size=50).astype(np.float32)
        y = rng.normal(size=50).astype(np.float32)
        dx, dy = delta_from_array(x), delta_from_array(y)
        for metric in ("pcc", "cs", "ed"):
            assert sim_pair(dx, dy, metric) == sim_pair(dy, dx, metric)
        assert -1.0 <= sim_pair(dx, dy, "pcc") <= 1.0
        assert -1.0 <= sim_pair(dx, dy, "cs") <= 1.0
        assert sim_pair(dx, dy, "ed") >= 0.0


def test_invariances():
    rng = np.random.default_rng(2)
    x = rng.normal(size=64).astype(np.float32)
    y = rng.normal(size=64).astype(np.float32)
    perm = rng.permutation(64)
    for metric in ("pcc", "cs", "ed"):
        assert sim_pair(delta_from_array(x[perm]), delta_from_array(y[perm]),
                        metric) == pytest.approx(
            sim_pair(delta_from_array(x), delta_from_array(y), metric),
            rel=1e-9, abs=1e-12)
    # cs invariant under positive scaling of either argument
    assert sim_pair(delta_from_array(3.5 * x), delta_from_array(y), "cs") == \
        pytest.approx(sim_pair(delta_from_array(x), delta_from_array(y), "cs"),
                      rel=1e-6)
    # pcc invariant under positive affine maps
    assert sim_pair(delta_from_array(2.0 * x + 1.0), delta_from_array(y),
                    "pcc") == pytest.approx(
        sim_pair(delta_from_array(x), delta_from_array(y), "pcc"), rel=1e-6)
    # ed is not scale invariant
    assert sim_pair(delta_from_array(2.0 * x), delta_from_array(y), "ed") != \
        pytest.approx(sim_pair(delta_from_array(x), delta_from_array(y), "ed"),
                      rel=1e-6)


def test_group_reduces_to_pair():
    x = delta_from_array([1.0, 2.0, 4.0])
    y = delta_from_array([2.0, 1.0, 3.0])
    assert kinship_group([x, y], "cs") == sim_pair(x, y, "cs")


def test_group_is_pair_mean():
    rng = np.random.default_rng(3)
    for n in (2, 3, 5, 8):
        deltas = [delta_from_array(rng.normal(size=40).astype(np.float32))
                  for _ in range(n)]
        for metric in ("pcc", "cs", "ed"):
            pairs = [sim_pair(deltas[i], deltas[j], metric)
                     for i in range(n) for j in range(i + 1, n)]
            assert kinship_group(deltas, metric) == pytest.approx(
                sum(pairs) / len(pairs), abs=1e-9)


def test_group_identical_deltas():
    v = np.array([1.0, 2.0, 3.0], np.float32)
    deltas = [delta_from_array(v.copy()) for _ in range(3)]
    assert kinship_group(deltas, "pcc") == pytest.approx(1.0, abs=1e-12)


def test_group_error_names_pair():
    good = delta_from_array([1.0, 2.0, 3.0], model_id="good")
    const = delta_from_array([1.0, 1.0, 1.0], model_id="flat")
    with pytest.raises(KinshipError, match="flat"):
        kinship_group([good, const], "pcc")


def test_matrix_matches_brute_force(save):
    rng = np.random.default_rng(4)
    base = tmap({"x": np.zeros(30)})
    models = [(f"m{i}", tmap({"x": rng.normal(size=30)})) for i in range(5)]
    for metric in ("pcc", "cs", "ed"):
        mat = kinship_matrix(models, base, metric)
        assert np.allclose(mat.values, mat.values.T, atol=1e-9)
        for i in range(5):
            assert mat.values[i, i] == (0.0 if metric == "ed" else 1.0)
            for j in range(i + 1, 5):
                want = brute(models[i][1].flatten(), models[j][1].flatten(),
                             metric)
                assert mat.values[i, j] == pytest.approx(want, rel=1e-9,
                                                         abs=1e-9)


def test_matrix_identical_models_all_ones():
    base = tmap({"x": np.zeros(4)})
    m = tmap({"x": [1.0, 2.0, 3.0, 4.0]})
    models = [("a", m), ("b", tmap({"x": [1.0, 2.0, 3.0, 4.0]}))]
    mat = kinship_matrix(models, base, "pcc")
    assert np.allclose(mat.values, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pcc_bounds_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=16).astype(np.float32)
    y = rng.normal(size=16).astype(np.float32)
    r = sim_pair(delta_from_array(x), delta_from_array(y), "pcc")
    assert -1.0 <= r <= 1.0
