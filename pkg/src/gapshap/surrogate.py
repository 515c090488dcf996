"""Random-forest surrogate f(configuration features) -> generalization gap.

Trees are grown with scikit-learn and then flattened into plain arrays
(feature, threshold, left, right, value, roots). Prediction and coalition
evaluation run on those arrays in the kernels, so a saved model needs only
numpy to load and always predicts the same numbers.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import kernels
from .config_space import default_space, encode
from .errors import ValidationError

FORMAT_VERSION = 1
MIN_ROWS = 10
MIN_CV_ROWS = 25
BACKGROUND_SIZE = 64
GLOBAL_FEATURES = ("algorithm", "learning_rate", "gamma", "hp3", "hp4")


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int = 8
    min_leaf: int = 3
    feature_subsample: float = 1.0
    bootstrap: bool = True

    def as_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValidationError("X must be n x m and y length n")
        if X.shape[0] < MIN_ROWS:
            raise ValidationError(f"dataset needs at least {MIN_ROWS} rows, got {X.shape[0]}")
        if X.shape[1] != len(self.feature_names):
            raise ValidationError("feature_names length must match X columns")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("dataset contains non-finite entries")
        if self.ids and len(self.ids) != X.shape[0]:
            raise ValidationError("ids length must match rows")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        ids = tuple(self.ids[i] for i in idx) if self.ids else ()
        return Dataset(self.X[idx], self.y[idx], self.feature_names, ids)


def record_id(record):
    """Stable id of a (seed-aggregated) record: task/direction/config_id."""
    return f"{record.task}/{record.direction}/{record.config_id}"


def dataset_from_records(records, space=None, algorithm_id=None):
    """Feature matrix over records.

    ``algorithm_id=None`` builds the global 5-feature dataset; an integer
    keeps only that algorithm's rows and drops the algorithm column.
    """
    space = space or default_space()
    rows, ys, ids = [], [], []
    for r in records:
        if algorithm_id is not None and r.algorithm_id != algorithm_id:
            continue
        fv = encode(r.configuration, space)
        rows.append(fv if algorithm_id is None else fv[1:])
        ys.append(r.gap)
        ids.append(record_id(r))
    if algorithm_id is None:
        names = GLOBAL_FEATURES
    else:
        names = space.algorithm(algorithm_id).slot_names
    if not rows:
        raise ValidationError("no records for the requested dataset")
    return Dataset(np.array(rows), np.array(ys), tuple(names), tuple(ids))


@dataclass(frozen=True, eq=False)
class ForestModel:
    feature: np.ndarray  # int32, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    roots: np.ndarray
    feature_names: tuple[str, ...]
    params: ForestParams = field(default_factory=ForestParams)
    fit_seed: int = 0
    background: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self):
        return len(self.feature_names)

    @property
    def n_trees(self):
        return len(self.roots)

    def arrays(self):
        return (self.feature, self.threshold, self.left, self.right, self.value, self.roots)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got {X.shape[1]}")
        return kernels.forest_predict(*self.arrays(), X)

    @property
    def base_value(self):
        if self.background is None:
            raise ValidationError("model has no background set")
        return float(np.mean(self.predict(self.background)))


def _flatten(estimators):
    feats, ths, lefts, rights, vals, roots = [], [], [], [], [], []
    offset = 0
    for est in estimators:
        t = est.tree_
        leaf = t.children_left < 0
        f = t.feature.astype(np.int32)
        f[leaf] = -1
        left = np.where(leaf, -1, t.children_left + offset).astype(np.int32)
        right = np.where(leaf, -1, t.children_right + offset).astype(np.int32)
        th = np.where(leaf, 0.0, t.threshold)
        feats.append(f)
        ths.append(th)
        lefts.append(left)
        rights.append(right)
        vals.append(t.value[:, 0, 0].astype(np.float64))
        roots.append(offset)
        offset += t.node_count
    return (np.concatenate(feats), np.concatenate(ths), np.concatenate(lefts),
            np.concatenate(rights), np.concatenate(vals), np.array(roots, dtype=np.int32))


def sample_background(X, size=BACKGROUND_SIZE, seed=0):
    """Rows drawn without replacement (all rows when fewer than ``size``)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] <= size:
        return X.copy()
    idx = np.random.default_rng(seed).choice(X.shape[0], size=size, replace=False)
    return X[np.sort(idx)]


def fit(data, params=None, seed=0, background_size=BACKGROUND_SIZE):
    """Grow a bootstrap forest on ``data``; deterministic given ``seed``."""
    from sklearn.ensemble import RandomForestRegressor

    params = params or ForestParams()
    rf = RandomForestRegressor(
        n_estimators=params.n_trees, max_depth=params.max_depth,
        min_samples_leaf=params.min_leaf, max_features=params.feature_subsample,
        bootstrap=params.bootstrap, random_state=int(seed) % (2 ** 32), n_jobs=1)
    rf.fit(data.X, data.y)
    arrays = _flatten(rf.estimators_)
    return ForestModel(*arrays, feature_names=tuple(data.feature_names), params=params,
                       fit_seed=int(seed),
                       background=sample_background(data.X, background_size, seed))


def predict(model, fv):
    return float(model.predict(np.asarray(fv, dtype=np.float64)[None, :])[0])


def constant_model(value, feature_names, background=None):
    """A single-leaf, single-tree forest; handy as a degenerate fixture."""
    one = np.array([-1], dtype=np.int32)
    return ForestModel(one, np.zeros(1), one.copy(), one.copy(), np.array([float(value)]),
                       np.array([0], dtype=np.int32), tuple(feature_names), background=background)


# -- persistence ------------------------------------------------------------------

def save(model, path):
    meta = {
        "format": "gapshap-forest", "version": FORMAT_VERSION,
        "feature_names": list(model.feature_names), "params": model.params.as_dict(),
        "fit_seed": model.fit_seed, "meta": model.meta,
    }
    arrays = dict(zip(("feature", "threshold", "left", "right", "value", "roots"), model.arrays()))
    if model.background is not None:
        arrays["background"] = model.background
    arrays = {"header": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
              **arrays}
    # npz layout written by hand with a fixed timestamp so equal models give equal bytes
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["header"]).decode())
            arrays = {k: z[k] for k in z.files if k != "header"}
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationError(f"{path}: not a model file ({exc})") from None
    if meta.get("format") != "gapshap-forest":
        raise ValidationError(f"{path}: not a model file")
    if meta.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported model version {meta.get('version')}")
    return ForestModel(
        arrays["feature"], arrays["threshold"], arrays["left"], arrays["right"],
        arrays["value"], arrays["roots"], tuple(meta["feature_names"]),
        ForestParams(**meta["params"]), int(meta["fit_seed"]), arrays.get("background"),
        meta.get("meta", {}))


def save_bundle(models, path):
    """Several models (e.g. one per algorithm) in one directory-free file set."""
    path = Path(path)
    index = {}
    for key, model in models.items():
        part = path.with_name(f"{path.name}.{key}")
        save(model, part)
        index[str(key)] = part.name
    path.write_text(json.dumps({"format": "gapshap-forest-bundle", "version": FORMAT_VERSION,
                                "models": index}, indent=2, sort_keys=True) + "\n")


def load_any(path):
    """Load a single model or a bundle; returns ``{key: model}``."""
    path = Path(path)
    head = path.read_bytes()[:64]
    if head.lstrip().startswith(b"{"):
        doc = json.loads(path.read_text())
        if doc.get("format") != "gapshap-forest-bundle":
            raise ValidationError(f"{path}: not a model bundle")
        return {k: load(path.with_name(v)) for k, v in doc["models"].items()}
    return {"global": load(path)}


# -- evaluation -------------------------------------------------------------------

@dataclass(frozen=True)
class FitReport:
    r2: float
    mae: float
    fold_r2: tuple[float, ...]
    fold_mae: tuple[float, ...]
    fold_sizes: tuple[int, ...]

    def as_dict(self):
        return {"r2": self.r2, "mae": self.mae, "fold_r2": list(self.fold_r2),
                "fold_mae": list(self.fold_mae), "fold_sizes": list(self.fold_sizes)}


def r2_score(y, pred):
    y = np.asarray(y, dtype=np.float64)
    ss_res = math.fsum((y - pred) ** 2)
    ss_tot = math.fsum((y - y.mean()) ** 2)
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def fold_indices(n, k, seed):
    """Seeded shuffle split into ``k`` folds whose sizes differ by at most one."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def cross_validate(data, params=None, seed=0, k=5):
    """Out-of-fold R² (pooled) and MAE, plus per-fold values."""
    if len(data) < MIN_CV_ROWS:
        raise ValidationError(f"cross-validation needs at least {MIN_CV_ROWS} rows")
    folds = fold_indices(len(data), k, seed)
    oof = np.empty(len(data))
    fold_r2, fold_mae = [], []
    for i, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(data)), test)
        model = fit(data.subset(train), params, seed + i + 1, background_size=1)
        pred = model.predict(data.X[test])
        oof[test] = pred
        fold_r2.append(r2_score(data.y[test], pred))
        fold_mae.append(float(np.mean(np.abs(data.y[test] - pred))))
    return FitReport(r2_score(data.y, oof), float(np.mean(np.abs(data.y - oof))),
                     tuple(fold_r2), tuple(fold_mae), tuple(len(f) for f in folds))


def permutation_importance(model, data, seed=0, repeats=5):
    """Mean increase in MSE when each column is shuffled."""
    rng = np.random.default_rng(seed)
    base = np.mean((model.predict(data.X) - data.y) ** 2)
    out = np.zeros(data.X.shape[1])
    for j in range(data.X.shape[1]):
        for _ in range(repeats):
            Xp = data.X.copy()
            Xp[:, j] = rng.permutation(Xp[:, j])
            out[j] += np.mean((model.predict(Xp) - data.y) ** 2) - base
    return out / repeats

