"""Attribution-guided configuration selection and transfer diagnostics.

* ``select_configurations`` random-searches the configuration space for the
  lowest and highest predicted gap.
* ``validate_selection`` checks those picks against the nearest measured
  configurations in each (task, direction).
* ``estimate_sensitivity`` takes central finite differences of a fixed
  policy's return with respect to the physics parameters.
* ``check_bound`` compares each measured gap with S * distance + eps_opt.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import envlab, runner, trainers
from .config_space import Configuration, encode, sample
from .envlab import ANALYTIC, DISCRETE_FIELDS
from .errors import ValidationError
from .shapley import exact_shapley

DEFAULT_CANDIDATES = 10_000
MIN_CANDIDATES = 100
MAX_DELTA_REL = 0.1
_TINY = 1e-9
FIELD_BOUNDS = {
    "slip_prob": (0.0, 1.0),
    "wind_bias": (-0.5, 0.5),
    "step_cost": (-envlab.MAX_STEP_COST, envlab.MAX_STEP_COST),
    "gravity": (_TINY, math.inf),
    "mass": (_TINY, math.inf),
    "dt": (_TINY, math.inf),
    "damping_coeff": (0.0, math.inf),
}


# -- selection --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SelectionReport:
    best: tuple  # (Configuration, predicted_gap)
    worst: tuple
    candidate_count: int
    phi_best: np.ndarray
    phi_worst: np.ndarray
    base_value: float
    feature_names: tuple[str, ...]
    best_index: int = 0
    worst_index: int = 0

    def as_dict(self):
        def entry(pair, phi, index):
            cfg, pred = pair
            return {"algorithm_id": cfg.algorithm_id, "values": list(cfg.values),
                    "predicted_gap": pred, "candidate_index": index,
                    "phi": dict(zip(self.feature_names, map(float, phi)))}
        return {"best": entry(self.best, self.phi_best, self.best_index),
                "worst": entry(self.worst, self.phi_worst, self.worst_index),
                "candidate_count": self.candidate_count, "base_value": self.base_value,
                "feature_names": list(self.feature_names)}

    @classmethod
    def from_dict(cls, d):
        names = tuple(d["feature_names"])

        def parse(e):
            cfg = Configuration(int(e["algorithm_id"]), tuple(float(v) for v in e["values"]))
            return ((cfg, float(e["predicted_gap"])),
                    np.array([e["phi"][n] for n in names]), int(e["candidate_index"]))
        best, pb, ib = parse(d["best"])
        worst, pw, iw = parse(d["worst"])
        return cls(best, worst, int(d["candidate_count"]), pb, pw, float(d["base_value"]),
                   names, ib, iw)


def draw_candidates(space, n, rng):
    """``n`` configurations; each picks its algorithm uniformly, then its slots."""
    out = []
    for _ in range(n):
        algo = int(rng.integers(0, 4))
        out.append(sample(space, algo, rng))
    return out


def select_configurations(model, space, n_candidates=DEFAULT_CANDIDATES, rng=None):
    """Lowest and highest predicted gap over random candidates (ties: lower index)."""
    if n_candidates < MIN_CANDIDATES:
        raise ValidationError(f"n_candidates must be >= {MIN_CANDIDATES}")
    if model.n_features != 5:
        raise ValidationError("selection needs a global model over all 5 features")
    rng = rng if rng is not None else np.random.default_rng(0)
    cands = draw_candidates(space, n_candidates, rng)
    X = np.vstack([encode(c, space) for c in cands])
    pred = model.predict(X)
    lo = int(np.argmin(pred))
    hi = int(np.argmax(pred))
    bg = model.background if model.background is not None else X[:64]
    a_lo = exact_shapley(model, X[lo], bg)
    a_hi = exact_shapley(model, X[hi], bg)
    return SelectionReport((cands[lo], float(pred[lo])), (cands[hi], float(pred[hi])),
                           n_candidates, a_lo.phi, a_hi.phi, a_lo.base_value,
                           tuple(model.feature_names), lo, hi)


# -- nearest-match validation -----------------------------------------------------

@dataclass(frozen=True)
class Match:
    task: str
    direction: str
    record: object
    distance: float


def nearest_match(target, records, space):
    """Closest record of the target's algorithm in each (task, direction)."""
    z = encode(target, space)
    best = {}
    for r in records:
        if r.algorithm_id != target.algorithm_id:
            continue
        d = float(np.sqrt(np.sum((encode(r.configuration, space) - z) ** 2)))
        key = (r.task, r.direction)
        cur = best.get(key)
        if cur is None or d < cur.distance or (d == cur.distance and r.config_id < cur.record.config_id):
            best[key] = Match(r.task, r.direction, r, d)
    if not best:
        raise ValidationError(f"no record with algorithm_id {target.algorithm_id}")
    return {k: best[k] for k in sorted(best)}


@dataclass(frozen=True, eq=False)
class ValidationReport:
    rows: list
    mean_actual_best: float
    mean_actual_worst: float
    predicted_best: float
    predicted_worst: float
    directional_consistent: bool

    def as_dict(self):
        return {"rows": self.rows, "mean_actual_best": self.mean_actual_best,
                "mean_actual_worst": self.mean_actual_worst,
                "predicted_best": self.predicted_best, "predicted_worst": self.predicted_worst,
                "directional_consistent": self.directional_consistent}


def _sign(v):
    return (v > 0) - (v < 0)


def validate_selection(selection, records, space, aggregate=True):
    """Actual gaps of the nearest measured configurations to the best and worst picks.

    Raw records are first averaged over seeds so each matched row is one
    configuration.
    """
    records = list(records)
    if aggregate and records and hasattr(records[0], "seed"):
        records = runner.aggregate_seeds(records)
    keys = sorted({(r.task, r.direction) for r in records})
    rows = []
    means = {}
    for role, (cfg, pred) in (("best", selection.best), ("worst", selection.worst)):
        matches = nearest_match(cfg, records, space)
        missing = set(keys) - set(matches)
        if missing:
            raise ValidationError(f"no {role} match in {sorted(missing)}")
        gaps = []
        for (task, direction), m in matches.items():
            gaps.append(m.record.gap)
            rows.append({"role": role, "task": task, "direction": direction,
                         "config_id": m.record.config_id, "distance": m.distance,
                         "actual_gap": m.record.gap, "predicted_gap": pred,
                         "sign_consistent": _sign(m.record.gap) == _sign(pred)})
        means[role] = math.fsum(gaps) / len(gaps)
    return ValidationReport(rows, means["best"], means["worst"], selection.best[1],
                            selection.worst[1], bool(means["best"] < means["worst"]))


# -- sensitivity --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SensitivityEstimate:
    S: float
    fields: tuple[str, ...]
    components: np.ndarray  # gradient times field scale
    raw_gradient: np.ndarray
    deltas: np.ndarray
    episodes: int
    excluded: tuple[str, ...] = ()
    clamped: tuple[str, ...] = ()

    def as_dict(self):
        return {"S": self.S, "fields": list(self.fields),
                "components": [float(c) for c in self.components],
                "raw_gradient": [float(g) for g in self.raw_gradient],
                "deltas": [float(d) for d in self.deltas], "episodes": self.episodes,
                "excluded": list(self.excluded), "clamped": list(self.clamped)}


def _clamp(name, value):
    lo, hi = FIELD_BOUNDS.get(name, (-math.inf, math.inf))
    return min(max(value, lo), hi)


def estimate_sensitivity(policy, task, variant, omega, delta_rel=0.01, episodes=20,
                         eval_seed=0, *, env=None, presets=None):
    """Central-difference gradient of J with respect to each continuous physics field.

    ``env`` overrides the environment built from (task, variant); pass an
    analytic fixture there. Perturbations that leave a field's valid range
    are clamped to it, with a warning, and the difference is taken over the
    clamped interval.
    """
    if not 0.0 < delta_rel <= MAX_DELTA_REL:
        raise ValidationError(f"delta_rel must be in (0, {MAX_DELTA_REL}]")
    if env is None:
        env = envlab.make_env(task, variant, omega, presets=presets)
    else:
        env = env.with_physics(omega)
    scales = envlab.field_scales(omega.task, presets)
    fields, comps, grads, deltas, excluded, clamped = [], [], [], [], [], []
    for k, name in enumerate(omega.names):
        if name in DISCRETE_FIELDS:
            excluded.append(name)
            continue
        w = omega.values[k]
        delta = delta_rel * abs(w) if w != 0.0 else delta_rel
        hi_v, lo_v = _clamp(name, w + delta), _clamp(name, w - delta)
        if hi_v != w + delta or lo_v != w - delta:
            warnings.warn(f"{name}: perturbation clamped to [{lo_v}, {hi_v}]", stacklevel=2)
            clamped.append(name)
        j_hi = trainers.evaluate(policy, env.with_physics(omega.replace(**{name: hi_v})),
                                 episodes, eval_seed)
        j_lo = trainers.evaluate(policy, env.with_physics(omega.replace(**{name: lo_v})),
                                 episodes, eval_seed)
        g = (j_hi - j_lo) / (hi_v - lo_v)
        fields.append(name)
        grads.append(g)
        comps.append(g * (scales[k] if scales is not None else 1.0))
        deltas.append(delta)
    comps = np.array(comps)
    return SensitivityEstimate(float(np.sqrt(np.sum(comps * comps))), tuple(fields), comps,
                               np.array(grads), np.array(deltas), int(episodes),
                               tuple(excluded), tuple(clamped))


def retrain_policy(record, manifest, presets=None, spec_n=None):
    """Rebuild the policy behind a raw run record from its run manifest."""
    n = spec_n or int(manifest["n_configs_per_algorithm"])
    config_index = record.config_id - record.algorithm_id * n
    if not 0 <= config_index < n:
        raise ValidationError(f"config_id {record.config_id} is inconsistent with the manifest")
    presets = presets or envlab.presets_from_dict(manifest["presets"])
    source, _ = runner.split_direction(record.direction)
    env = envlab.make_env(record.task, source, presets=presets)
    seed = runner.derive_seed(int(manifest["master_seed"]), record.task, record.direction,
                              record.algorithm_id, config_index, record.seed, "train")
    budget = trainers.TrainBudget(int(manifest["total_env_steps"]),
                                  int(manifest["eval_episodes"]))
    return trainers.train(record.algorithm_id, record.configuration, env, seed, budget).policy


def _sensitivity_job(args):
    record, manifest, delta_rel, episodes, eval_seed = args
    presets = envlab.presets_from_dict(manifest["presets"])
    policy = retrain_policy(record, manifest, presets)
    source, _ = runner.split_direction(record.direction)
    omega = presets.physics(record.task, source)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = estimate_sensitivity(policy, record.task, source, omega, delta_rel, episodes,
                                   eval_seed, presets=presets)
    return record, est


def sweep_sensitivities(records, manifest, delta_rel=0.01, episodes=20, eval_seed=0,
                        workers=1):
    """Sensitivity at the source physics for every raw record, in input order."""
    jobs = [(r, manifest, delta_rel, episodes, eval_seed) for r in records]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sensitivity_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    return [_sensitivity_job(j) for j in jobs]


# -- bound check ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BoundReport:
    rows: list
    spearman: float
    n: int
    satisfied_fraction: float
    flags: list = field(default_factory=list)
    per_cell: dict = field(default_factory=dict)  # "task/direction" -> spearman

    def as_dict(self):
        return {"rows": self.rows, "spearman": self.spearman, "n": self.n,
                "satisfied_fraction": self.satisfied_fraction, "flags": self.flags,
                "per_cell_spearman": self.per_cell}


def record_key(r):
    return (r.task, r.direction, r.config_id, getattr(r, "seed", 0))


def check_bound(records, sensitivities, distance, soft_threshold=0.2):
    """Evaluate gap <= S * distance + eps_opt for every record.

    ``sensitivities`` maps ``record_key(r)`` to an estimate (or a bare S);
    ``distance`` is a number or a mapping keyed by task or by record key. eps_opt is
    the best source return seen in the same (task, direction) minus the
    record's own.
    """
    records = list(records)
    if not records:
        raise ValidationError("no records")
    best = {}
    for r in records:
        k = (r.task, r.direction)
        best[k] = max(best.get(k, -math.inf), r.J_source)
    rows, sd, gaps = [], [], []
    for r in records:
        key = record_key(r)
        if key not in sensitivities:
            raise ValidationError(f"missing sensitivity for record {key}")
        s = sensitivities[key]
        S = float(s.S if isinstance(s, SensitivityEstimate) else s)
        if isinstance(distance, dict):
            d = float(distance[key] if key in distance else distance[r.task])
        else:
            d = float(distance)
        eps = best[(r.task, r.direction)] - r.J_source
        bound = S * d + eps
        rows.append({"task": r.task, "direction": r.direction, "config_id": r.config_id,
                     "seed": getattr(r, "seed", 0), "gap": r.gap, "S": S, "distance": d,
                     "eps_opt": eps, "bound": bound, "satisfied": bool(r.gap <= bound)})
        sd.append(S * d)
        gaps.append(r.gap)
    rho = _spearman(sd, gaps)
    per_cell = {}
    for task, direction in sorted(best):
        idx = [i for i, r in enumerate(records) if (r.task, r.direction) == (task, direction)]
        per_cell[f"{task}/{direction}"] = _spearman([sd[i] for i in idx], [gaps[i] for i in idx])
    flags = []
    if not (rho >= soft_threshold):
        flags.append(f"spearman {rho:.3f} below soft threshold {soft_threshold}")
    sat = sum(row["satisfied"] for row in rows) / len(rows)
    return BoundReport(rows, rho, len(rows), sat, flags, per_cell)


def _spearman(a, b):
    if len(set(a)) > 1 and len(set(b)) > 1:
        return float(stats.spearmanr(a, b).statistic)
    return float("nan")


def analytic_family(w, omega_s, shifts):
    """Records for the linear fixture: target physics ``omega_s - t * w / |w|``.

    Returns ``(record, estimate, distance)`` triples; the first-order bound
    is tight for every one of them.
    """
    w = np.asarray(w, dtype=np.float64)
    unit = w / np.linalg.norm(w)
    env = envlab.analytic_fixture(w, omega_s)
    policy = trainers.Policy(trainers.GREEDY_Q, np.zeros((1, 1)), ANALYTIC)
    est = estimate_sensitivity(policy, ANALYTIC, "M", env.physics, 0.01, 1, 0, env=env)
    out = []
    for i, t in enumerate(shifts):
        omega_t = env.physics.__class__(ANALYTIC, tuple(np.asarray(omega_s) - t * unit),
                                        env.physics.names)
        j_s = trainers.evaluate(policy, env, 1, 0)
        j_t = trainers.evaluate(policy, env.with_physics(omega_t), 1, 0)
        rec = runner.AggregateRecord(i, 0, ANALYTIC, "M-P", 0, 0, 0, 0, j_s, j_t,
                                     runner.compute_gap(j_s, j_t), 1, 0.0)
        out.append((rec, est, envlab.physics_distance(env.physics, omega_t)))
    return out
