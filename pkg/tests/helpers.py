"""Model fixtures shared by the attribution tests."""

import numpy as np

from gapshap.surrogate import ForestModel


class LinearModel:
    def __init__(self, w, c=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.c = c

    def predict(self, X):
        return np.asarray(X) @ self.w + self.c


class FunctionModel:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, X):
        return self.fn(np.asarray(X, dtype=np.float64))


def _grow(rng, m, depth, features, nodes):
    idx = len(nodes)
    if depth == 0 or rng.random() < 0.15:
        nodes.append([-1, 0.0, -1, -1, rng.normal()])
        return idx
    nodes.append(None)
    f = int(rng.choice(features))
    t = float(rng.random())
    left = _grow(rng, m, depth - 1, features, nodes)
    right = _grow(rng, m, depth - 1, features, nodes)
    nodes[idx] = [f, t, left, right, 0.0]
    return idx


def random_forest(rng, m, n_trees=8, depth=4, exclude=(), categorical=False):
    """Random axis-aligned trees over [0, 1]^m (feature 0 in {0..3} if categorical)."""
    features = [j for j in range(m) if j not in exclude]
    nodes, roots = [], []
    for _ in range(n_trees):
        roots.append(_grow(rng, m, depth, features, nodes))
    arr = np.array(nodes, dtype=np.float64)
    if categorical:
        at0 = arr[:, 0] == 0
        arr[at0, 1] = rng.integers(0, 3, at0.sum()) + 0.5
    return ForestModel(arr[:, 0].astype(np.int32), arr[:, 1], arr[:, 2].astype(np.int32),
                       arr[:, 3].astype(np.int32), arr[:, 4], np.array(roots, dtype=np.int32),
                       tuple(f"f{j}" for j in range(m)))


def mirrored(model, i, j):
    """The model plus a copy with features i and j swapped: symmetric in (i, j)."""
    f2 = model.feature.copy()
    f2[model.feature == i] = j
    f2[model.feature == j] = i
    return concat(model, ForestModel(f2, model.threshold, model.left, model.right, model.value,
                                     model.roots, model.feature_names))


def concat(a, b):
    """Forest whose trees are those of ``a`` followed by those of ``b``."""
    off = len(a.feature)
    shift = lambda arr: np.where(arr >= 0, arr + off, -1).astype(np.int32)
    return ForestModel(
        np.concatenate([a.feature, b.feature]), np.concatenate([a.threshold, b.threshold]),
        np.concatenate([a.left, shift(b.left)]), np.concatenate([a.right, shift(b.right)]),
        np.concatenate([a.value, b.value]),
        np.concatenate([a.roots, b.roots + off]).astype(np.int32), a.feature_names)


def random_inputs(rng, m, n, categorical=False):
    X = rng.random((n, m))
    if categorical:
        X[:, 0] = rng.integers(0, 4, n)
    return X
