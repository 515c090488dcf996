"""Miniature tasks with two engine variants each (M and P).

GridSlip
    Cliff-style grid. The intended move is taken with probability
    ``1 - slip_prob``; otherwise the agent slips to one of the two lateral
    directions, clockwise with probability ``0.5 + wind_bias``. Every step
    pays ``step_cost``; entering the goal adds +1 and entering a pit adds -1
    (both terminal). Moves off the grid leave the agent in place.

PendulumLite
    Torque-limited swing-up. Angle 0 is upright and the episode starts
    hanging (angle near pi). Torque levels are {-2, -1, 0, 1, 2} N m, the
    speed is clipped at 8 rad/s and the reward is
    ``-(angle_error**2 + 0.1 * omega**2 + 0.001 * torque**2)``. Variant M
    integrates with semi-implicit Euler, variant P with explicit Euler.
    ``friction_mode`` 0 is viscous (``damping * omega``); 1 is a
    tanh-regularised Coulomb torque (``damping * tanh(omega / 0.05)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ._kernels import kernels
from .errors import SpaceParseError, ValidationError

GRID = "GridSlip"
PENDULUM = "PendulumLite"
ANALYTIC = "Analytic"
TASKS = (GRID, PENDULUM)
TASK_CODES = {GRID: 0, PENDULUM: 1}
VARIANTS = ("M", "P")

FIELDS = {
    GRID: ("slip_prob", "wind_bias", "step_cost"),
    PENDULUM: ("gravity", "damping_coeff", "mass", "dt", "friction_mode"),
}
DISCRETE_FIELDS = frozenset({"friction_mode"})
INTEGRATORS = {"semi_implicit": 0, "explicit": 1}
N_ACTIONS = {GRID: 4, PENDULUM: 5, ANALYTIC: 1}
TORQUES = (-2.0, -1.0, 0.0, 1.0, 2.0)
MAX_STEP_COST = 49.0


@dataclass(frozen=True)
class PhysicsParams:
    """Dynamics vector of one task; ``values`` follow ``FIELDS[task]`` order."""

    task: str
    values: tuple[float, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.names:
            if self.task not in FIELDS:
                raise ValidationError(f"unknown task {self.task!r}")
            object.__setattr__(self, "names", FIELDS[self.task])
        if len(self.values) != len(self.names):
            raise ValidationError(f"{self.task}: expected fields {self.names}")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        self._check()

    @classmethod
    def of(cls, task, **fields):
        names = FIELDS[task]
        missing = set(names) - set(fields)
        if missing:
            raise ValidationError(f"{task}: missing physics fields {sorted(missing)}")
        extra = set(fields) - set(names)
        if extra:
            raise ValidationError(f"{task}: unknown physics fields {sorted(extra)}")
        return cls(task, tuple(fields[n] for n in names))

    def _check(self):
        if not all(math.isfinite(v) for v in self.values):
            raise ValidationError(f"{self.task}: physics values must be finite")
        d = self.as_dict()
        if self.task == GRID:
            if not 0.0 <= d["slip_prob"] <= 1.0:
                raise ValidationError(f"slip_prob must be in [0, 1], got {d['slip_prob']}")
            if abs(d["wind_bias"]) > 0.5:
                raise ValidationError(f"wind_bias must be in [-0.5, 0.5], got {d['wind_bias']}")
            if abs(d["step_cost"]) > MAX_STEP_COST:
                raise ValidationError(f"|step_cost| must be <= {MAX_STEP_COST}")
        elif self.task == PENDULUM:
            for name in ("gravity", "mass", "dt"):
                if d[name] <= 0.0:
                    raise ValidationError(f"{name} must be > 0, got {d[name]}")
            if d["damping_coeff"] < 0.0:
                raise ValidationError("damping_coeff must be >= 0")
            if d["friction_mode"] not in (0.0, 1.0):
                raise ValidationError("friction_mode must be 0 (viscous) or 1 (coulomb)")

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def as_dict(self):
        return dict(zip(self.names, self.values))

    def replace(self, **fields):
        unknown = set(fields) - set(self.names)
        if unknown:
            raise ValidationError(f"{self.task}: unknown physics fields {sorted(unknown)}")
        d = self.as_dict()
        d.update(fields)
        return PhysicsParams(self.task, tuple(d[n] for n in self.names), self.names)

    def vector(self):
        return np.array(self.values, dtype=np.float64)


@dataclass(frozen=True)
class Layout:
    width: int
    height: int
    cells: tuple[int, ...]  # row-major from the bottom row; 0 free, 1 goal, 2 pit
    start: int

    @classmethod
    def from_rows(cls, rows):
        """Build from text rows, top row first ('.', 'S', 'G', 'X')."""
        rows = [str(r) for r in rows]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValidationError("layout rows must be non-empty and equal length")
        height, width = len(rows), len(rows[0])
        cells = []
        start = None
        for y, row in enumerate(reversed(rows)):
            for x, ch in enumerate(row):
                if ch not in ".SGX":
                    raise ValidationError(f"unknown layout symbol {ch!r}")
                if ch == "S":
                    start = y * width + x
                cells.append({"G": 1, "X": 2}.get(ch, 0))
        if start is None:
            raise ValidationError("layout needs a start cell 'S'")
        if 1 not in cells:
            raise ValidationError("layout needs a goal cell 'G'")
        return cls(width, height, tuple(cells), start)

    def cell_array(self):
        return np.array(self.cells, dtype=np.uint8)


CORRIDOR = Layout.from_rows(["S....G"])


@dataclass(frozen=True)
class TaskPresets:
    horizon: int
    variants: dict  # code -> (integrator, PhysicsParams)
    layout: Layout | None = None


@dataclass(frozen=True)
class Presets:
    tasks: dict = field(default_factory=dict)

    def physics(self, task, variant):
        return self.task(task).variants[_variant(variant)][1]

    def task(self, task):
        try:
            return self.tasks[task]
        except KeyError:
            raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}") from None


def _variant(v):
    if v not in VARIANTS:
        raise ValidationError(f"variant must be 'M' or 'P', got {v!r}")
    return v


def load_presets(path=None):
    """Parse a physics preset file; ``None`` loads the bundled presets."""
    if path is None:
        text = resources.files("gapshap").joinpath("data/physics_presets.yaml").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpaceParseError(f"malformed preset file: {exc}") from None
    return presets_from_dict(doc)


def presets_from_dict(doc):
    if not isinstance(doc, dict) or "tasks" not in doc:
        raise SpaceParseError("preset document needs top-level 'tasks'")
    tasks = {}
    for name, raw in doc["tasks"].items():
        if name not in FIELDS:
            raise ValidationError(f"unknown task {name!r} in presets")
        try:
            variants = {}
            for code in VARIANTS:
                fields = dict(raw["variants"][code])
                integrator = INTEGRATORS[fields.pop("integrator", "semi_implicit")]
                variants[code] = (integrator, PhysicsParams.of(name, **fields))
            layout = Layout.from_rows(raw["layout"]) if name == GRID else None
            horizon = int(raw["horizon"])
        except KeyError as exc:
            raise SpaceParseError(f"{name}: missing preset field {exc.args[0]!r}") from None
        if variants["M"] == variants["P"]:
            raise ValidationError(f"{name}: M and P presets must differ")
        tasks[name] = TaskPresets(horizon, variants, layout)
    missing = set(TASKS) - set(tasks)
    if missing:
        raise ValidationError(f"presets missing tasks {sorted(missing)}")
    return Presets(tasks)


def presets_to_dict(presets):
    names = {v: k for k, v in INTEGRATORS.items()}
    out = {}
    for task, tp in presets.tasks.items():
        raw = {"horizon": tp.horizon, "variants": {}}
        for code, (integrator, physics) in tp.variants.items():
            entry = {"integrator": names[integrator]} if task == PENDULUM else {}
            entry.update(physics.as_dict())
            raw["variants"][code] = entry
        if tp.layout is not None:
            lay = tp.layout
            sym = {0: ".", 1: "G", 2: "X"}
            rows = []
            for y in range(lay.height - 1, -1, -1):
                row = ""
                for x in range(lay.width):
                    i = y * lay.width + x
                    row += "S" if i == lay.start else sym[lay.cells[i]]
                rows.append(row)
            raw["layout"] = rows
        out[task] = raw
    return {"tasks": out}


_DEFAULT_PRESETS = None


def default_presets():
    global _DEFAULT_PRESETS
    if _DEFAULT_PRESETS is None:
        _DEFAULT_PRESETS = load_presets(None)
    return _DEFAULT_PRESETS


@dataclass(frozen=True)
class EnvState:
    observation: tuple[float, ...]
    done: bool
    t: int


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    reward: float
    done: bool


class Environment:
    """Single-threaded handle to one task/variant with fixed physics."""

    def __init__(self, task, variant, physics, integrator, horizon, layout=None):
        self.task = task
        self.variant = variant
        self.physics = physics
        self.integrator = integrator
        self.horizon = horizon
        self.layout = layout
        self.n_actions = N_ACTIONS[task]
        self._pos = 0
        self._theta = 0.0
        self._omega = 0.0
        self._rng = 0
        self._t = 0
        self._done = True

    def __repr__(self):
        return f"Environment({self.task}, {self.variant}, {self.physics.as_dict()})"

    def with_physics(self, physics):
        if physics.task != self.task:
            raise ValidationError("physics task mismatch")
        return Environment(self.task, self.variant, physics, self.integrator,
                           self.horizon, self.layout)

    def kernel_args(self):
        """Positional environment arguments shared by the kernel entry points."""
        if self.task == GRID:
            lay = self.layout
            return (0, lay.cell_array(), lay.width, lay.height, lay.start,
                    self.physics.vector(), 0, self.horizon)
        return (1, np.zeros(0, dtype=np.uint8), 0, 0, 0,
                self.physics.vector(), self.integrator, self.horizon)

    def _state(self):
        if self.task == GRID:
            w = self.layout.width
            obs = (float(self._pos % w), float(self._pos // w))
        else:
            obs = (self._theta, self._omega)
        return EnvState(obs, self._done, self._t)

    def reset(self, seed):
        self._rng = kernels.stream_state(int(seed), _STREAM_ENV)
        self._t = 0
        self._done = False
        if self.task == GRID:
            self._pos = self.layout.start
        else:
            self._theta, self._rng = kernels.pend_reset(self._rng)
            self._omega = 0.0
        return self._state()

    def step(self, action):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if not 0 <= int(action) < self.n_actions:
            raise ValidationError(f"action must be in [0, {self.n_actions})")
        self._t += 1
        if self.task == GRID:
            lay = self.layout
            self._pos, r, term, self._rng = kernels.grid_step(
                lay.cell_array(), lay.width, lay.height, self.physics.vector(),
                self._pos, int(action), self._rng)
        else:
            self._theta, self._omega, r = kernels.pend_step(
                self.physics.vector(), self.integrator, self._theta, self._omega, int(action))
            term = False
        self._done = bool(term) or self._t >= self.horizon
        return StepOutcome(self._state(), float(r), self._done)

    def energy(self):
        """Mechanical energy of PendulumLite, zero at the hanging rest state."""
        p = self.physics.as_dict()
        m, g = p["mass"], p["gravity"]
        return 0.5 * m * self._omega * self._omega + m * g * (1.0 + math.cos(self._theta))


_STREAM_ENV = 0x5851F42D4C957F2D


class AnalyticEnvironment:
    """One-step episode whose reward is ``w . omega`` whatever the action."""

    task = ANALYTIC
    variant = "M"
    integrator = 0
    horizon = 1
    n_actions = 1

    def __init__(self, w, physics=None):
        self.w = np.asarray(w, dtype=np.float64)
        if not np.all(np.isfinite(self.w)):
            raise ValidationError("analytic weights must be finite")
        names = tuple(f"omega_{i}" for i in range(len(self.w)))
        if physics is None:
            physics = PhysicsParams(ANALYTIC, tuple(np.ones(len(self.w))), names)
        self.physics = physics
        self._done = True

    def with_physics(self, physics):
        return AnalyticEnvironment(self.w, physics)

    def return_value(self):
        return float(self.w @ self.physics.vector())

    def reset(self, seed):
        self._done = False
        return EnvState((), False, 0)

    def step(self, action):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        self._done = True
        return StepOutcome(EnvState((), True, 1), self.return_value(), True)


def analytic_fixture(w, omega=None):
    env = AnalyticEnvironment(w)
    if omega is not None:
        env = env.with_physics(PhysicsParams(ANALYTIC, tuple(omega), env.physics.names))
    return env


def make_env(task, variant, override=None, *, presets=None, layout=None):
    """Environment for ``task``/``variant``; ``override`` replaces preset fields.

    ``override`` may be a full ``PhysicsParams`` or a mapping of field names.
    """
    presets = presets or default_presets()
    tp = presets.task(task)
    integrator, physics = tp.variants[_variant(variant)]
    if isinstance(override, PhysicsParams):
        if override.task != task:
            raise ValidationError("override physics belongs to another task")
        physics = override
    elif override:
        physics = physics.replace(**dict(override))
    if task == GRID:
        layout = layout or tp.layout
    return Environment(task, variant, physics, integrator, tp.horizon, layout)


def reset(env, seed):
    return env.reset(seed)


def step(env, action):
    return env.step(action)


def field_scales(task, presets=None):
    """Per-field normalisers: |preset-M value|, or 1 where that value is 0."""
    if task == ANALYTIC:
        return None
    ref = (presets or default_presets()).physics(task, "M")
    return np.array([abs(v) if v != 0.0 else 1.0 for v in ref.values])


def physics_distance(omega_s, omega_t, presets=None):
    """Normalised L2 distance between two physics vectors of the same task.

    Continuous fields are divided by their preset-M magnitude; the discrete
    friction mode contributes its raw difference.
    """
    if omega_s.task != omega_t.task or omega_s.names != omega_t.names:
        raise ValidationError("physics_distance needs two vectors of the same task")
    diff = omega_s.vector() - omega_t.vector()
    scales = field_scales(omega_s.task, presets)
    if scales is not None:
        for i, name in enumerate(omega_s.names):
            if name not in DISCRETE_FIELDS:
                diff[i] /= scales[i]
    return float(np.sqrt(np.sum(diff * diff)))
