"""Tabular / tile-coded analogs of PPO, A2C, DDPG and SAC.

All four share one discrete-action interface so any trained policy can be
evaluated on either engine variant of its task:

0  clipped policy gradient      (learning_rate, gamma, clip_range, n_steps)
1  advantage actor-critic (GAE)  (learning_rate, gamma, gae_lambda, vf_coef)
2  replay Q-learning, soft target (learning_rate, gamma, tau, buffer_size)
3  soft Q-learning                (learning_rate, gamma, tau, ent_coef)

The training and evaluation loops live in the compiled kernels.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._kernels import kernels
from .envlab import AnalyticEnvironment
from .errors import ValidationError

SOFTMAX_LINEAR = "softmax-linear"
GREEDY_Q = "greedy-Q"
BOLTZMANN_Q = "boltzmann-Q"
POLICY_TAGS = {0: SOFTMAX_LINEAR, 1: SOFTMAX_LINEAR, 2: GREEDY_Q, 3: BOLTZMANN_Q}
ALGORITHM_NAMES = {0: "PPO", 1: "A2C", 2: "DDPG", 3: "SAC"}
CURVE_WINDOW = 10


@dataclass(frozen=True)
class TrainBudget:
    total_env_steps: int = 20_000
    eval_episodes: int = 20

    def __post_init__(self):
        if self.total_env_steps <= 0 or self.eval_episodes <= 0:
            raise ValidationError("budget counts must be > 0")


@dataclass(frozen=True, eq=False)
class Policy:
    """Parameter table over (feature, action); scores add over active features."""

    tag: str
    table: np.ndarray
    task: str
    temperature: float = 1.0
    diverged: bool = False

    def scores(self, active):
        return self.table[np.asarray(active, dtype=np.int64)].sum(axis=0)

    def probabilities(self, active):
        """Action distribution of the behaviour policy at the given features."""
        s = self.scores(active)
        if self.tag == GREEDY_Q:
            best = s == s.max()
            return best / best.sum()
        z = s / self.temperature
        z = np.exp(z - z.max())
        return z / z.sum()


@dataclass(frozen=True, eq=False)
class TrainResult:
    policy: Policy
    train_return_curve: list = field(default_factory=list)  # (step, mean return)
    wall_time: float = 0.0
    diverged: bool = False
    env_steps: int = 0
    aux: np.ndarray | None = None  # value table (0, 1) or target table (2, 3)


def _curve(ends, returns):
    out = []
    for i, step in enumerate(ends):
        lo = max(0, i + 1 - CURVE_WINDOW)
        out.append((int(step), float(np.mean(returns[lo:i + 1]))))
    return out


def train(algorithm_id, config, env, seed, budget=None):
    """Train a policy on ``env`` for exactly ``budget.total_env_steps`` steps.

    A run whose parameters go non-finite is flagged and returns an all-zero
    table; evaluating it picks actions uniformly at random.
    """
    budget = budget or TrainBudget()
    if config.algorithm_id != algorithm_id:
        raise ValidationError("config.algorithm_id does not match algorithm_id")
    if algorithm_id not in POLICY_TAGS:
        raise ValidationError(f"unknown algorithm_id {algorithm_id}")
    if isinstance(env, AnalyticEnvironment):
        table = np.zeros((1, 1))
        return TrainResult(Policy(POLICY_TAGS[algorithm_id], table, env.task),
                           [(1, env.return_value())], 0.0, False, budget.total_env_steps)
    t0 = time.perf_counter()
    table, aux, ends, rets, diverged = kernels.train_run(
        *env.kernel_args(), int(algorithm_id), np.asarray(config.values, dtype=np.float64),
        int(seed), int(budget.total_env_steps))
    wall = time.perf_counter() - t0
    if algorithm_id in (2, 3):
        aux = aux.reshape(table.shape)
    if diverged:
        table = np.zeros_like(table)
        aux = np.zeros_like(aux)
    temperature = 1.0
    if algorithm_id == 3:
        temperature = float(config.values[3])
    elif algorithm_id == 2:
        temperature = 0.0
    policy = Policy(POLICY_TAGS[algorithm_id], table, env.task, temperature, bool(diverged))
    return TrainResult(policy, _curve(ends, rets), wall, bool(diverged),
                       int(budget.total_env_steps), aux)


def evaluate_returns(policy, env, episodes, eval_seed):
    """Per-episode undiscounted returns; episode ``e`` uses seed ``eval_seed + e``."""
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    if isinstance(env, AnalyticEnvironment):
        return np.full(episodes, env.return_value())
    if policy.task != env.task:
        raise ValidationError("policy was trained on another task")
    table = np.ascontiguousarray(policy.table, dtype=np.float64)
    return kernels.evaluate_run(*env.kernel_args(), table, int(episodes), int(eval_seed))


def evaluate(policy, env, episodes, eval_seed):
    """Mean return of the mode-action policy (ties broken at random)."""
    r = evaluate_returns(policy, env, episodes, eval_seed)
    total = math.fsum(r)
    return total / len(r)
