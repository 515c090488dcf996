"""Sweep orchestration: sample configurations, train in the source variant,
evaluate in both variants and persist one record per line.

Every random stream is keyed by a hash of
``(master_seed, task, direction, algorithm_id, config_index, seed, stage)``
so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envlab, trainers
from ._kernels import kernels
from .config_space import Configuration, sample
from .errors import ValidationError

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
DIRECTIONS = ("M-P", "P-M")
_DIRECTION_ALIASES = {"M-P": "M-P", "M->P": "M-P", "M→P": "M-P", "MP": "M-P",
                      "P-M": "P-M", "P->M": "P-M", "P→M": "P-M", "PM": "P-M"}
STAGES = {"config": 1, "train": 2, "eval": 3}
RECORD_FIELDS = ("config_id", "algorithm_id", "task", "direction", "seed",
                 "hp1", "hp2", "hp3", "hp4", "J_source", "J_target", "gap",
                 "diverged", "wall_time")
_REAL_FIELDS = frozenset({"hp1", "hp2", "hp3", "hp4", "J_source", "J_target", "gap",
                          "wall_time"})
_TASK_KEYS = {envlab.GRID: 1, envlab.PENDULUM: 2}
_DIRECTION_KEYS = {"M-P": 1, "P-M": 2}


def compute_gap(j_source, j_target):
    """Source return minus target return; positive means worse after transfer."""
    if not (math.isfinite(j_source) and math.isfinite(j_target)):
        raise ValidationError("returns must be finite")
    return j_source - j_target


def parse_direction(text):
    try:
        return _DIRECTION_ALIASES[text.strip()]
    except KeyError:
        raise ValidationError(f"direction must be M-P or P-M, got {text!r}") from None


def split_direction(direction):
    source, target = direction.split("-")
    return source, target


def derive_seed(master_seed, task, direction, algorithm_id, config_index, seed, stage):
    """64-bit key for one random stream; every component passes through mix64."""
    parts = (_TASK_KEYS[task], _DIRECTION_KEYS[direction], algorithm_id + 1,
             config_index + 1, seed + 1, STAGES[stage])
    h = kernels.mix64(int(master_seed) & MASK64)
    for p in parts:
        h = kernels.mix64((h ^ (int(p) * GOLDEN)) & MASK64)
    return h


@dataclass(frozen=True)
class RunSpec:
    tasks: tuple[str, ...] = envlab.TASKS
    directions: tuple[str, ...] = DIRECTIONS
    n_configs_per_algorithm: int = 100
    seeds_per_config: int = 3
    budget: trainers.TrainBudget = field(default_factory=trainers.TrainBudget)
    master_seed: int = 0

    def __post_init__(self):
        if not self.tasks or not self.directions:
            raise ValidationError("tasks and directions must be non-empty")
        if self.n_configs_per_algorithm < 1 or self.seeds_per_config < 1:
            raise ValidationError("counts must be >= 1")
        for t in self.tasks:
            if t not in envlab.TASKS:
                raise ValidationError(f"unknown task {t!r}")
        object.__setattr__(self, "directions",
                           tuple(parse_direction(d) for d in self.directions))
        if len(set(self.tasks)) != len(self.tasks) or len(set(self.directions)) != len(self.directions):
            raise ValidationError("tasks and directions must be unique")

    @property
    def total_runs(self):
        return record_count(len(self.tasks), len(self.directions),
                            self.n_configs_per_algorithm, self.seeds_per_config)


def record_count(n_tasks, n_directions, n_configs, n_seeds, n_algorithms=4):
    return n_tasks * n_directions * n_algorithms * n_configs * n_seeds


@dataclass(frozen=True)
class ExperimentRecord:
    config_id: int
    algorithm_id: int
    task: str
    direction: str
    seed: int
    hp1: float
    hp2: float
    hp3: float
    hp4: float
    J_source: float
    J_target: float
    gap: float
    diverged: bool
    wall_time: float = 0.0

    @property
    def key(self):
        return (self.config_id, self.seed, self.task, self.direction)

    @property
    def sort_key(self):
        return (self.task, self.direction, self.config_id, self.seed)

    @property
    def configuration(self):
        return Configuration(self.algorithm_id, (self.hp1, self.hp2, self.hp3, self.hp4))

    def to_json(self):
        parts = []
        for name in RECORD_FIELDS:
            v = getattr(self, name)
            if name in _REAL_FIELDS:
                text = format(float(v), ".17g")
            elif isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, str):
                text = json.dumps(v, ensure_ascii=False)
            else:
                text = str(int(v))
            parts.append(f'"{name}": {text}')
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def from_mapping(cls, d):
        missing = set(RECORD_FIELDS) - set(d)
        if missing:
            raise ValidationError(f"record missing fields {sorted(missing)}")
        return cls(
            config_id=int(d["config_id"]), algorithm_id=int(d["algorithm_id"]),
            task=str(d["task"]), direction=str(d["direction"]), seed=int(d["seed"]),
            hp1=float(d["hp1"]), hp2=float(d["hp2"]), hp3=float(d["hp3"]), hp4=float(d["hp4"]),
            J_source=float(d["J_source"]), J_target=float(d["J_target"]), gap=float(d["gap"]),
            diverged=bool(d["diverged"]), wall_time=float(d["wall_time"]))


def read_records(path):
    """Parse a results file; a truncated final line (interrupted write) is ignored."""
    records = []
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise ValidationError(f"{path}:{i + 1}: malformed record") from None
        records.append(ExperimentRecord.from_mapping(d))
    return records


class ResultStore:
    """Append-only record set with unique (config_id, seed, task, direction) keys."""

    def __init__(self, path=None, records=()):
        self.path = Path(path) if path is not None else None
        self.records = []
        self._keys = set()
        for r in records:
            self._add(r)

    def _add(self, r):
        if r.key in self._keys:
            raise ValidationError(f"duplicate record key {r.key}")
        self._keys.add(r.key)
        self.records.append(r)

    @classmethod
    def open(cls, path):
        """Open for appending, loading any records already on disk."""
        path = Path(path)
        records = read_records(path) if path.exists() else []
        store = cls(path, records)
        if path.exists():
            # drop a torn trailing line so new appends start on a clean line
            store._rewrite(store.records)
        return store

    @classmethod
    def load(cls, path):
        return cls(path, read_records(path))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, key):
        return key in self._keys

    def append(self, record):
        self._add(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
                fh.flush()

    def canonical(self):
        return sorted(self.records, key=lambda r: r.sort_key)

    def _rewrite(self, records):
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")
        os.replace(tmp, self.path)

    def close(self):
        """Sort records canonically and rewrite the file."""
        self.records = self.canonical()
        if self.path is not None:
            self._rewrite(self.records)
        return self


@dataclass(frozen=True)
class _Cell:
    task: str
    direction: str
    algorithm_id: int
    config_index: int
    config_id: int
    seed: int
    values: tuple
    train_seed: int
    eval_seed: int
    budget: trainers.TrainBudget
    presets: envlab.Presets


def _plan(spec, space):
    n = spec.n_configs_per_algorithm
    cells = []
    for task in spec.tasks:
        for direction in spec.directions:
            for algo in range(4):
                for ci in range(n):
                    rng = np.random.default_rng(derive_seed(
                        spec.master_seed, task, direction, algo, ci, 0, "config"))
                    cfg = sample(space, algo, rng)
                    for s in range(spec.seeds_per_config):
                        cells.append((task, direction, algo, ci, algo * n + ci, s, cfg.values))
    return cells


def run_cell(cell):
    """Train on the source variant, evaluate on both; returns a record."""
    source, target = split_direction(cell.direction)
    env_s = envlab.make_env(cell.task, source, presets=cell.presets)
    env_t = envlab.make_env(cell.task, target, presets=cell.presets)
    cfg = Configuration(cell.algorithm_id, cell.values)
    t0 = time.perf_counter()
    res = trainers.train(cell.algorithm_id, cfg, env_s, cell.train_seed, cell.budget)
    episodes = cell.budget.eval_episodes
    j_s = trainers.evaluate(res.policy, env_s, episodes, cell.eval_seed)
    j_t = trainers.evaluate(res.policy, env_t, episodes, cell.eval_seed)
    wall = time.perf_counter() - t0
    return ExperimentRecord(
        config_id=cell.config_id, algorithm_id=cell.algorithm_id, task=cell.task,
        direction=cell.direction, seed=cell.seed,
        hp1=cell.values[0], hp2=cell.values[1], hp3=cell.values[2], hp4=cell.values[3],
        J_source=j_s, J_target=j_t, gap=compute_gap(j_s, j_t),
        diverged=res.diverged, wall_time=wall)


def manifest_path(out):
    return Path(str(out) + ".manifest.json")


def timing_path(out):
    return Path(str(out) + ".timing.jsonl")


def build_manifest(spec, space, presets):
    return {
        "master_seed": spec.master_seed,
        "tasks": list(spec.tasks),
        "directions": list(spec.directions),
        "n_configs_per_algorithm": spec.n_configs_per_algorithm,
        "seeds_per_config": spec.seeds_per_config,
        "total_env_steps": spec.budget.total_env_steps,
        "eval_episodes": spec.budget.eval_episodes,
        "space": space.to_dict(),
        "presets": envlab.presets_to_dict(presets),
    }


def run_experiments(spec, space, out=None, *, workers=1, presets=None,
                    record_wall_time=False, progress=None):
    """Execute every (task, direction, algorithm, config, seed) cell.

    With ``out`` set, records are appended as they finish, cells already in
    the file are skipped, and the file is rewritten in canonical order at the
    end. Measured run times go to a ``.timing.jsonl`` sidecar; the results
    file carries ``wall_time = 0`` unless ``record_wall_time`` is set, which
    keeps reruns byte-identical.
    """
    presets = presets or envlab.default_presets()
    store = ResultStore.open(out) if out is not None else ResultStore()
    if out is not None:
        manifest = build_manifest(spec, space, presets)
        mp = manifest_path(out)
        if mp.exists() and len(store):
            old = json.loads(mp.read_text())
            if old != manifest:
                raise ValidationError(f"{out} was produced by a different run spec; "
                                      "refusing to resume")
        mp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    todo = []
    for task, direction, algo, ci, cid, s, values in _plan(spec, space):
        if (cid, s, task, direction) in store:
            continue
        todo.append(_Cell(
            task, direction, algo, ci, cid, s, values,
            derive_seed(spec.master_seed, task, direction, algo, ci, s, "train"),
            derive_seed(spec.master_seed, task, direction, algo, ci, s, "eval") >> 1,
            spec.budget, presets))

    timing = open(timing_path(out), "a", encoding="utf-8") if out is not None else None
    try:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(run_cell, todo, chunksize=max(1, len(todo) // (8 * workers)))
                _collect(results, store, timing, record_wall_time, progress, len(todo))
        else:
            _collect(map(run_cell, todo), store, timing, record_wall_time, progress, len(todo))
    finally:
        if timing is not None:
            timing.close()
    return store.close()


def _collect(results, store, timing, record_wall_time, progress, total):
    for i, rec in enumerate(results):
        if timing is not None:
            timing.write(json.dumps({"config_id": rec.config_id, "seed": rec.seed,
                                     "task": rec.task, "direction": rec.direction,
                                     "wall_time": rec.wall_time}) + "\n")
        if not record_wall_time:
            rec = ExperimentRecord(**{**rec.__dict__, "wall_time": 0.0})
        store.append(rec)
        if progress is not None:
            progress(i + 1, total)


@dataclass(frozen=True)
class AggregateRecord:
    config_id: int
    algorithm_id: int
    task: str
    direction: str
    hp1: float
    hp2: float
    hp3: float
    hp4: float
    J_source: float
    J_target: float
    gap: float
    n_seeds: int
    diverged_fraction: float

    @property
    def configuration(self):
        return Configuration(self.algorithm_id, (self.hp1, self.hp2, self.hp3, self.hp4))


def aggregate_seeds(records):
    """Average J_source, J_target and gap over seeds of each (config, task, direction)."""
    records = list(records)
    if not records:
        raise ValidationError("no records to aggregate")
    groups = {}
    for r in records:
        groups.setdefault((r.task, r.direction, r.config_id), []).append(r)
    out = []
    for (task, direction, cid), rs in sorted(groups.items()):
        n = len(rs)
        first = rs[0]
        js = math.fsum(r.J_source for r in rs) / n
        jt = math.fsum(r.J_target for r in rs) / n
        gap = math.fsum(r.gap for r in rs) / n
        out.append(AggregateRecord(
            cid, first.algorithm_id, task, direction,
            first.hp1, first.hp2, first.hp3, first.hp4,
            js, jt, gap, n, sum(r.diverged for r in rs) / n))
    return out
