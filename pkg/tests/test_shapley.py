import itertools
import math

import numpy as np
import pytest

from gapshap import shapley, surrogate
from gapshap._kernels import available_backends, load_backend
from gapshap.errors import ValidationError
from helpers import (FunctionModel, LinearModel, concat, mirrored, random_forest,
                     random_inputs)


def _direct_shapley(model, x, bg):
    """Textbook double loop: subsets enumerated per feature, v recomputed each time."""
    m = len(x)
    phi = np.zeros(m)
    for i in range(m):
        others = [j for j in range(m) if j != i]
        for r in range(m):
            for S in itertools.combinations(others, r):
                w = math.factorial(r) * math.factorial(m - r - 1) / math.factorial(m)
                gain = (shapley.coalition_value(model, x, list(S) + [i], bg)
                        - shapley.coalition_value(model, x, list(S), bg))
                phi[i] += w * gain
    return phi


def test_weights_sum_to_one():
    for m in range(1, 10):
        w = shapley.shapley_weights(m)
        total = sum(w[s] * math.comb(m - 1, s) for s in range(m))
        assert total == pytest.approx(1.0, abs=1e-15)


def test_coalition_value_extremes():
    rng = np.random.default_rng(0)
    model = random_forest(rng, 4)
    x = rng.random(4)
    bg = rng.random((16, 4))
    assert shapley.coalition_value(model, x, [0, 1, 2, 3], bg) == pytest.approx(
        surrogate.predict(model, x), abs=1e-15)
    assert shapley.coalition_value(model, x, [], bg) == pytest.approx(
        float(np.mean(model.predict(bg))), abs=1e-12)


def test_single_row_background_splice():
    model = LinearModel([1.0, 10.0, 100.0])
    x = np.array([1.0, 2.0, 3.0])
    b = np.array([[7.0, 8.0, 9.0]])
    # x on {0, 2}, background on {1}: 1 + 80 + 300
    assert shapley.coalition_value(model, x, [0, 2], b) == 381.0


@pytest.mark.parametrize("backend", available_backends())
def test_coalition_table_matches_single_values(backend):
    k = load_backend(backend)
    rng = np.random.default_rng(1)
    model = random_forest(rng, 4)
    x = rng.random(4)
    bg = rng.random((8, 4))
    table = k.coalition_values(*model.arrays(), x, bg)
    for mask in range(16):
        S = [j for j in range(4) if mask >> j & 1]
        assert table[mask] == shapley.coalition_value(model, x, S, bg)


def test_backends_agree_on_coalitions():
    if "cython" not in available_backends():
        pytest.skip("compiled backend unavailable")
    rng = np.random.default_rng(2)
    model = random_forest(rng, 5, n_trees=20)
    x, bg = rng.random(5), rng.random((64, 5))
    a = load_backend("cython").coalition_values(*model.arrays(), x, bg)
    b = load_backend("python").coalition_values(*model.arrays(), x, bg)
    np.testing.assert_array_equal(a, b)


def test_generic_table_matches_forest_fast_path():
    rng = np.random.default_rng(3)
    model = random_forest(rng, 5)
    wrapped = FunctionModel(model.predict)
    x, bg = rng.random(5), rng.random((20, 5))
    np.testing.assert_allclose(shapley.coalition_table(wrapped, x, bg),
                               shapley.coalition_table(model, x, bg), rtol=0, atol=1e-13)


@pytest.mark.parametrize("m", [1, 2, 3, 4, 5])
def test_cached_enumeration_matches_direct_definition(m):
    rng = np.random.default_rng(10 + m)
    model = random_forest(rng, m, n_trees=5)
    x, bg = rng.random(m), rng.random((10, m))
    att = shapley.exact_shapley(model, x, bg)
    np.testing.assert_allclose(att.phi, _direct_shapley(model, x, bg), rtol=0, atol=1e-12)


def test_efficiency_on_forests():
    rng = np.random.default_rng(4)
    for _ in range(100):
        m = int(rng.integers(4, 6))
        model = random_forest(rng, m, categorical=True)
        x = random_inputs(rng, m, 1, True)[0]
        bg = random_inputs(rng, m, 64, True)
        att = shapley.exact_shapley(model, x, bg)
        assert abs(att.base_value + att.phi.sum() - surrogate.predict(model, x)) <= 1e-9


def test_dummy_feature():
    rng = np.random.default_rng(5)
    for _ in range(20):
        model = random_forest(rng, 5, exclude=(2,))
        att = shapley.exact_shapley(model, rng.random(5), rng.random((32, 5)))
        assert abs(att.phi[2]) <= 1e-12


def test_symmetry():
    rng = np.random.default_rng(6)
    for _ in range(20):
        model = mirrored(random_forest(rng, 5), 1, 3)
        x = rng.random(5)
        x[3] = x[1]
        bg = rng.random((32, 5))
        bg[:, 3] = bg[:, 1]
        att = shapley.exact_shapley(model, x, bg)
        assert att.phi[1] == pytest.approx(att.phi[3], abs=1e-9)


def test_linearity():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = random_forest(rng, 4, 6), random_forest(rng, 4, 10)
        both = concat(a, b)  # mean over 16 trees = (6 f_a + 10 f_b) / 16
        x, bg = rng.random(4), rng.random((32, 4))
        pa = shapley.exact_shapley(a, x, bg).phi
        pb = shapley.exact_shapley(b, x, bg).phi
        pab = shapley.exact_shapley(both, x, bg).phi
        np.testing.assert_allclose(pab, (6 * pa + 10 * pb) / 16, rtol=0, atol=1e-9)


def test_linear_closed_form():
    rng = np.random.default_rng(8)
    for _ in range(20):
        w = rng.normal(size=5)
        x, bg = rng.normal(size=5), rng.normal(size=(64, 5))
        att = shapley.exact_shapley(LinearModel(w, 3.0), x, bg)
        np.testing.assert_allclose(att.phi, w * (x - bg.mean(axis=0)), rtol=0, atol=1e-9)


def test_enumeration_guard():
    with pytest.raises(ValidationError):
        shapley.exact_shapley(LinearModel(np.ones(17)), np.zeros(17), np.zeros((1, 17)))
    with pytest.raises(ValidationError):
        shapley.shapley_interactions(LinearModel(np.ones(13)), np.zeros(13), np.zeros((1, 13)))


def test_interactions_additive_model():
    model = FunctionModel(lambda X: np.sin(3 * X[:, 0]) + X[:, 1] ** 2 + np.exp(X[:, 2]))
    rng = np.random.default_rng(9)
    im = shapley.shapley_interactions(model, rng.random(3), rng.random((16, 3)))
    off = im.Phi[~np.eye(3, dtype=bool)]
    assert np.max(np.abs(off)) <= 1e-12


def test_interactions_product_brute_force():
    model = FunctionModel(lambda X: X[:, 0] * X[:, 1])
    bg = np.array([[1.0, -2.0], [-1.0, 2.0], [0.5, 1.0], [-0.5, -1.0]])  # column means 0
    x = np.array([3.0, -4.0])
    f = lambda z: z[0] * z[1]
    v = {}
    for S in [(), (0,), (1,), (0, 1)]:
        v[S] = np.mean([f(np.where(np.isin([0, 1], S), x, b)) for b in bg])
    expected = 0.5 * (v[(0, 1)] - v[(0,)] - v[(1,)] + v[()])
    im = shapley.shapley_interactions(model, x, bg)
    assert abs(im.Phi[0, 1] - expected) <= 1e-12
    assert im.Phi[0, 1] == im.Phi[1, 0]


def test_interaction_row_sums():
    rng = np.random.default_rng(10)
    for _ in range(20):
        model = random_forest(rng, 5)
        x, bg = rng.random(5), rng.random((64, 5))
        im = shapley.shapley_interactions(model, x, bg)
        np.testing.assert_allclose(im.Phi, im.Phi.T, rtol=0, atol=0)
        np.testing.assert_allclose(im.Phi.sum(axis=1), im.phi, rtol=0, atol=1e-9)
        np.testing.assert_allclose(im.phi, shapley.exact_shapley(model, x, bg).phi, atol=1e-12)


def test_sampled_single_player():
    rng = np.random.default_rng(11)
    model = random_forest(rng, 1)
    x, bg = rng.random(1), rng.random((10, 1))
    exact = shapley.exact_shapley(model, x, bg)
    for n in (1, 7):
        est = shapley.sampled_shapley(model, x, bg, n, np.random.default_rng(0))
        assert est.phi[0] == pytest.approx(exact.phi[0], abs=1e-15)


def test_sampled_reproducible_and_close():
    rng = np.random.default_rng(12)
    model = random_forest(rng, 5)
    x, bg = rng.random(5), rng.random((64, 5))
    a = shapley.sampled_shapley(model, x, bg, 20_000, np.random.default_rng(3))
    b = shapley.sampled_shapley(model, x, bg, 20_000, np.random.default_rng(3))
    np.testing.assert_array_equal(a.phi, b.phi)
    exact = shapley.exact_shapley(model, x, bg)
    assert np.max(np.abs(a.phi - exact.phi)) <= 0.05 * (np.max(np.abs(exact.phi)) + 1e-9)
    assert a.base_value == exact.base_value
    with pytest.raises(ValidationError):
        shapley.sampled_shapley(model, x, bg, 0, np.random.default_rng(0))


def test_sampled_past_enumeration_guard():
    w = np.arange(20.0)
    x, bg = np.ones(20), np.zeros((3, 20))
    est = shapley.sampled_shapley(LinearModel(w), x, bg, 5, np.random.default_rng(0))
    np.testing.assert_allclose(est.phi, w, atol=1e-12)


def test_batch_explain_consistency():
    rng = np.random.default_rng(13)
    model = random_forest(rng, 5)
    bg = rng.random((64, 5))
    X = rng.random((100, 5))
    X[1] = X[0]
    batch = shapley.batch_explain(model, X, bg)
    np.testing.assert_array_equal(batch.phi[0], batch.phi[1])
    for i in range(100):
        np.testing.assert_array_equal(batch.phi[i], shapley.exact_shapley(model, X[i], bg).phi)
    mean_pred = model.predict(X).mean()
    assert batch.phi.sum(axis=1).mean() + batch.base_value == pytest.approx(mean_pred, abs=1e-9)
    threaded = shapley.batch_explain(model, X, bg, workers=3)
    np.testing.assert_array_equal(threaded.phi, batch.phi)


def test_batch_explain_empty():
    rng = np.random.default_rng(14)
    model = random_forest(rng, 4)
    out = shapley.batch_explain(model, np.zeros((0, 4)), rng.random((5, 4)))
    assert out.phi.shape == (0, 4)
