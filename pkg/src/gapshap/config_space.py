"""Configuration spaces: declaration, sampling and [0, 1] feature encoding.

A configuration is an algorithm code (0-3) plus four hyperparameter values in
slot order. Its feature vector is ``[algorithm_code, z1, z2, z3, z4]`` where
each ``z`` maps the slot value onto [0, 1] (log-space for log-scaled slots,
index fraction for choice slots).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import SpaceParseError, ValidationError

N_SLOTS = 4
N_FEATURES = N_SLOTS + 1
ALGORITHM_IDS = (0, 1, 2, 3)
SHARED_SLOTS = ("learning_rate", "gamma")


@dataclass(frozen=True)
class HyperparameterSpec:
    name: str
    kind: str  # "continuous" | "choice"
    scale: str = "linear"  # "log" | "linear"
    low: float = 0.0
    high: float = 1.0
    choices: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == "continuous":
            if not (math.isfinite(self.low) and math.isfinite(self.high)):
                raise ValidationError(f"{self.name}: bounds must be finite")
            if not self.low < self.high:
                raise ValidationError(f"{self.name}: low must be < high (got {self.low}, {self.high})")
            if self.scale not in ("log", "linear"):
                raise ValidationError(f"{self.name}: scale must be 'log' or 'linear'")
            if self.scale == "log" and self.low <= 0:
                raise ValidationError(f"{self.name}: log scale requires low > 0")
        elif self.kind == "choice":
            if len(self.choices) < 2:
                raise ValidationError(f"{self.name}: choice set needs at least 2 entries")
            if any(b <= a for a, b in zip(self.choices, self.choices[1:])):
                raise ValidationError(f"{self.name}: choices must be strictly increasing")
        else:
            raise ValidationError(f"{self.name}: kind must be 'continuous' or 'choice'")

    @property
    def bounds(self):
        if self.kind == "choice":
            return self.choices[0], self.choices[-1]
        return self.low, self.high

    def from_unit(self, u):
        """Map ``u`` in [0, 1) to a slot value (the sampling transform)."""
        if self.kind == "choice":
            n = len(self.choices)
            return self.choices[min(int(u * n), n - 1)]
        if self.scale == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            v = math.exp(lo + u * (hi - lo))
        else:
            v = self.low + u * (self.high - self.low)
        return min(max(v, self.low), self.high)

    def contains(self, v):
        if self.kind == "choice":
            return v in self.choices
        return self.low <= v <= self.high

    def encode(self, v):
        if not self.contains(v):
            raise ValidationError(f"{self.name}: value {v!r} outside {self._range_text()}")
        if self.kind == "choice":
            return self.choices.index(v) / (len(self.choices) - 1)
        if self.scale == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            return (math.log(v) - lo) / (hi - lo)
        return (v - self.low) / (self.high - self.low)

    def decode(self, z):
        z = min(max(float(z), 0.0), 1.0)
        if self.kind == "choice":
            return self.choices[int(math.floor(z * (len(self.choices) - 1) + 0.5))]
        if self.scale == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            v = math.exp(lo + z * (hi - lo))
        else:
            v = self.low + z * (self.high - self.low)
        return min(max(v, self.low), self.high)

    def _range_text(self):
        if self.kind == "choice":
            return f"choices {list(self.choices)}"
        return f"[{self.low}, {self.high}]"


@dataclass(frozen=True)
class AlgorithmSpec:
    algorithm_id: int
    name: str
    hyperparameters: tuple[HyperparameterSpec, ...]

    def __post_init__(self):
        if len(self.hyperparameters) != N_SLOTS:
            raise ValidationError(
                f"algorithm {self.algorithm_id}: exactly {N_SLOTS} hyperparameters required")
        for slot, expected in enumerate(SHARED_SLOTS):
            got = self.hyperparameters[slot].name
            if got != expected:
                raise ValidationError(
                    f"algorithm {self.algorithm_id}: slot {slot + 1} must be {expected}, got {got}")

    @property
    def slot_names(self):
        return tuple(h.name for h in self.hyperparameters)


@dataclass(frozen=True)
class ConfigurationSpace:
    algorithms: tuple[AlgorithmSpec, ...]
    schema_version: int = 1

    def __post_init__(self):
        ids = [a.algorithm_id for a in self.algorithms]
        if sorted(ids) != list(ALGORITHM_IDS):
            raise ValidationError("algorithm_id set must be {0,1,2,3}")

    def algorithm(self, algorithm_id):
        for a in self.algorithms:
            if a.algorithm_id == algorithm_id:
                return a
        raise ValidationError(f"unknown algorithm_id {algorithm_id}")

    def to_dict(self):
        algos = []
        for a in sorted(self.algorithms, key=lambda a: a.algorithm_id):
            hps = []
            for h in a.hyperparameters:
                if h.kind == "choice":
                    hps.append({"name": h.name, "kind": "choice", "choices": list(h.choices)})
                else:
                    hps.append({"name": h.name, "kind": "continuous", "scale": h.scale,
                                "low": h.low, "high": h.high})
            algos.append({"id": a.algorithm_id, "name": a.name, "hyperparameters": hps})
        return {"schema_version": self.schema_version, "algorithms": algos}


@dataclass(frozen=True)
class Configuration:
    algorithm_id: int
    values: tuple[float, ...]

    def validate(self, space):
        algo = space.algorithm(self.algorithm_id)
        if len(self.values) != N_SLOTS:
            raise ValidationError(f"configuration needs {N_SLOTS} values")
        for spec, v in zip(algo.hyperparameters, self.values):
            if not spec.contains(v):
                raise ValidationError(f"{spec.name}: value {v!r} outside {spec._range_text()}")
        return self

    def as_dict(self, space):
        names = space.algorithm(self.algorithm_id).slot_names
        return {"algorithm_id": self.algorithm_id, **dict(zip(names, self.values))}


# -- file IO ----------------------------------------------------------------------

def _parse_hp(raw, where):
    if not isinstance(raw, dict):
        raise SpaceParseError(f"{where}: hyperparameter entry must be a mapping")
    try:
        name = str(raw["name"])
        kind = str(raw.get("kind", "continuous"))
        if kind == "choice":
            choices = tuple(float(c) for c in raw["choices"])
            return HyperparameterSpec(name=name, kind=kind, choices=choices)
        return HyperparameterSpec(
            name=name, kind=kind, scale=str(raw.get("scale", "linear")),
            low=float(raw["low"]), high=float(raw["high"]))
    except KeyError as exc:
        raise SpaceParseError(f"{where}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise ValidationError(f"{where}.{exc}") from None
        raise SpaceParseError(f"{where}: {exc}") from None


def space_from_dict(doc):
    if not isinstance(doc, dict) or "algorithms" not in doc:
        raise SpaceParseError("space document needs top-level 'algorithms'")
    algos = []
    for i, raw in enumerate(doc["algorithms"]):
        where = f"algorithms[{i}]"
        try:
            hps = tuple(_parse_hp(h, f"{where}.hyperparameters[{j}]")
                        for j, h in enumerate(raw["hyperparameters"]))
            algos.append(AlgorithmSpec(int(raw["id"]), str(raw.get("name", raw["id"])), hps))
        except KeyError as exc:
            raise SpaceParseError(f"{where}: missing field {exc.args[0]!r}") from None
    return ConfigurationSpace(tuple(algos), int(doc.get("schema_version", 1)))


def load_space(path=None):
    """Parse and validate a space file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("gapshap").joinpath("data/default_space.yaml").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise SpaceParseError(f"cannot read space file {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpaceParseError(f"malformed space file: {exc}") from None
    return space_from_dict(doc)


def default_space():
    return load_space(None)


# -- sampling and encoding --------------------------------------------------------

def sample(space, algorithm_id, rng):
    """Draw one configuration; slots consume one ``rng.random()`` each, in order."""
    algo = space.algorithm(algorithm_id)
    values = tuple(spec.from_unit(float(rng.random())) for spec in algo.hyperparameters)
    return Configuration(algorithm_id, values)


def encode(config, space):
    algo = space.algorithm(config.algorithm_id)
    if len(config.values) != N_SLOTS:
        raise ValidationError(f"configuration needs {N_SLOTS} values")
    z = [spec.encode(v) for spec, v in zip(algo.hyperparameters, config.values)]
    return np.array([float(config.algorithm_id), *z], dtype=np.float64)


def decode(fv, space):
    fv = np.asarray(fv, dtype=np.float64)
    if fv.shape != (N_FEATURES,):
        raise ValidationError(f"feature vector must have {N_FEATURES} entries")
    code = fv[0]
    if code not in ALGORITHM_IDS:
        raise ValidationError(f"algorithm_code {code} not in {{0,1,2,3}}")
    algo = space.algorithm(int(code))
    if np.any(fv[1:] < 0.0) or np.any(fv[1:] > 1.0):
        raise ValidationError("feature z-values must lie in [0, 1]")
    values = tuple(spec.decode(z) for spec, z in zip(algo.hyperparameters, fv[1:]))
    return Configuration(int(code), values)


def encode_many(configs, space):
    if not configs:
        return np.zeros((0, N_FEATURES))
    return np.vstack([encode(c, space) for c in configs])
