"""Exact and sampled Shapley attributions of a model's predicted gap.

The value of a coalition S of features is the interventional expectation

    v(S) = (1/B) * sum_b f(x_S, b_{-S})

over a background set of B rows. All 2^m coalition values are evaluated
once into a table indexed by bitmask (bit j set means feature j comes from
``x``), and every attribution below is a weighted sum over that table.

Any object with ``predict(X) -> array`` can be explained; forest surrogates
take a compiled fast path that evaluates the whole table in one call.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._kernels import kernels
from .errors import ValidationError
from .surrogate import ForestModel

MAX_PLAYERS = 16
MAX_INTERACTION_PLAYERS = 12
_MASK_CHUNK = 4096
_PERM_CHUNK = 20_000
_MAX_MASK_BITS = 62


@dataclass(frozen=True, eq=False)
class BackgroundSet:
    rows: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if rows.shape[0] < 1:
            raise ValidationError("background needs at least one row")
        object.__setattr__(self, "rows", rows)

    def base_value(self, model):
        return _sequential_mean(model.predict(self.rows))


@dataclass(frozen=True, eq=False)
class Attribution:
    x: np.ndarray
    base_value: float
    phi: np.ndarray

    @property
    def prediction(self):
        return self.base_value + math.fsum(self.phi)


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    Phi: np.ndarray
    phi: np.ndarray
    base_value: float


@dataclass(frozen=True, eq=False)
class AttributionMatrix:
    X: np.ndarray
    base_value: float
    phi: np.ndarray  # n x m

    def row(self, i):
        return Attribution(self.X[i], self.base_value, self.phi[i])


def _rows(bg):
    if isinstance(bg, BackgroundSet):
        return bg.rows
    return BackgroundSet(bg).rows


def _sequential_mean(values):
    s = 0.0
    for v in values:
        s = s + float(v)
    return s / len(values)


def _check(x, bg_rows, limit):
    x = np.asarray(x, dtype=np.float64).ravel()
    m = x.shape[0]
    if bg_rows.shape[1] != m:
        raise ValidationError(f"background has {bg_rows.shape[1]} columns, x has {m}")
    if m > limit:
        raise ValidationError(f"{m} features exceeds the enumeration limit of {limit}")
    return x, m


def _bits(masks, m):
    return ((np.asarray(masks)[:, None] >> np.arange(m)) & 1).astype(bool)


def _splice(x, bg_rows, bits):
    """Rows of f's input for each mask, background-major within a mask."""
    n_masks, m = bits.shape
    Z = np.where(bits[:, None, :], x[None, None, :], bg_rows[None, :, :])
    return Z.reshape(n_masks * bg_rows.shape[0], m)


def coalition_value(model, x, S, bg):
    """v(S): mean prediction over the background with features in S taken from x."""
    rows = _rows(bg)
    x, m = _check(x, rows, _MAX_MASK_BITS)
    mask = 0
    for j in S:
        if not 0 <= j < m:
            raise ValidationError(f"feature index {j} out of range")
        mask |= 1 << j
    Z = _splice(x, rows, _bits([mask], m))
    return _sequential_mean(model.predict(Z))


def coalition_table(model, x, bg, limit=MAX_PLAYERS):
    """v(S) for every bitmask S in 0 .. 2^m - 1."""
    rows = _rows(bg)
    x, m = _check(x, rows, limit)
    if isinstance(model, ForestModel):
        return kernels.coalition_values(*model.arrays(), x, rows)
    n_masks = 1 << m
    B = rows.shape[0]
    out = np.empty(n_masks)
    for lo in range(0, n_masks, _MASK_CHUNK):
        masks = np.arange(lo, min(lo + _MASK_CHUNK, n_masks))
        P = np.asarray(model.predict(_splice(x, rows, _bits(masks, m))), dtype=np.float64)
        P = P.reshape(len(masks), B)
        s = np.zeros(len(masks))
        for b in range(B):
            s = s + P[:, b]
        out[lo:lo + len(masks)] = s / B
    return out


def _popcounts(m):
    masks = np.arange(1 << m)
    return _bits(masks, m).sum(axis=1)


def shapley_weights(m):
    """w[s] = s! (m - s - 1)! / m! for coalition sizes s = 0 .. m-1."""
    return np.array([math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m)
                     for s in range(m)])


def shapley_from_table(v, m):
    """phi_i = sum over S not containing i of w(|S|) [v(S + i) - v(S)]."""
    v = np.asarray(v, dtype=np.float64)
    size = _popcounts(m)
    w = shapley_weights(m)
    masks = np.arange(1 << m)
    phi = np.empty(m)
    for i in range(m):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = math.fsum(w[size[without]] * (v[without | bit] - v[without]))
    return phi


def exact_shapley(model, x, bg):
    """Exact attribution by full coalition enumeration (m <= 16)."""
    v = coalition_table(model, x, bg, MAX_PLAYERS)
    x = np.asarray(x, dtype=np.float64).ravel()
    m = x.shape[0]
    return Attribution(x, float(v[0]), shapley_from_table(v, m))


def interactions_from_table(v, m):
    """Pairwise interaction index with the diagonal closing each row on phi."""
    v = np.asarray(v, dtype=np.float64)
    phi = shapley_from_table(v, m)
    Phi = np.zeros((m, m))
    if m >= 2:
        size = _popcounts(m)
        w = np.array([math.factorial(s) * math.factorial(m - s - 2) / math.factorial(m - 1)
                      for s in range(m - 1)])
        masks = np.arange(1 << m)
        for i in range(m):
            for j in range(i + 1, m):
                bi, bj = 1 << i, 1 << j
                S = masks[(masks & (bi | bj)) == 0]
                delta = v[S | bi | bj] - v[S | bi] - v[S | bj] + v[S]
                Phi[i, j] = Phi[j, i] = 0.5 * math.fsum(w[size[S]] * delta)
    for i in range(m):
        Phi[i, i] = phi[i] - math.fsum(Phi[i, j] for j in range(m) if j != i)
    return Phi, phi


def shapley_interactions(model, x, bg):
    """Symmetric m x m matrix; off-diagonals are half the pairwise index (m <= 12)."""
    v = coalition_table(model, x, bg, MAX_INTERACTION_PLAYERS)
    m = np.asarray(x).size
    Phi, phi = interactions_from_table(v, m)
    return InteractionMatrix(Phi, phi, float(v[0]))


def sampled_shapley(model, x, bg, n_permutations, rng):
    """Monte Carlo estimate from random feature orderings.

    Each ordering adds features one at a time and credits each with the
    change in v. Coalition values are computed once per distinct coalition
    and reused across orderings.
    """
    if n_permutations < 1:
        raise ValidationError("n_permutations must be >= 1")
    rows = _rows(bg)
    x, m = _check(x, rows, _MAX_MASK_BITS)
    cache = {}

    def values(masks):
        need = [int(k) for k in np.unique(masks) if int(k) not in cache]
        if need:
            if m <= MAX_PLAYERS and len(need) > (1 << m) // 2:
                table = coalition_table(model, x, rows)
                cache.update(enumerate(table))
            else:
                for k in need:
                    cache[k] = coalition_value(model, x, [j for j in range(m) if k >> j & 1], rows)
        return np.array([cache[int(k)] for k in masks.ravel()]).reshape(masks.shape)

    total = np.zeros(m)
    done = 0
    while done < n_permutations:
        n = min(_PERM_CHUNK, n_permutations - done)
        perms = rng.permuted(np.tile(np.arange(m), (n, 1)), axis=1)
        after = np.cumsum(np.left_shift(1, perms, dtype=np.int64), axis=1)
        before = after - np.left_shift(1, perms, dtype=np.int64)
        uniq, inv = np.unique(np.concatenate([before.ravel(), after.ravel()]),
                              return_inverse=True)
        vals = values(uniq)[inv]
        contrib = vals[before.size:] - vals[:before.size]
        total += np.bincount(perms.ravel(), weights=contrib, minlength=m)
        done += n
    return Attribution(x, float(cache[0]) if 0 in cache else coalition_value(model, x, [], rows),
                       total / n_permutations)


def batch_explain(model, X, bg, workers=1):
    """Exact attributions for every row of ``X``; output order follows ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    rows = _rows(bg)
    if X.shape[0] == 0:
        return AttributionMatrix(X, BackgroundSet(rows).base_value(model), np.zeros((0, rows.shape[1])))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            atts = list(pool.map(lambda x: exact_shapley(model, x, rows), X))
    else:
        atts = [exact_shapley(model, x, rows) for x in X]
    return AttributionMatrix(X, atts[0].base_value, np.array([a.phi for a in atts]))


def batch_interactions(model, X, bg):
    rows = _rows(bg)
    return [shapley_interactions(model, x, rows) for x in np.atleast_2d(X)]
