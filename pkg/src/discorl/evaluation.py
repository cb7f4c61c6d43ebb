"""Greedy evaluation, scripted oracles and reward normalisation.

Each evaluation episode starts from a seeded random position with the
canonical (fixed) background. The scripted oracle for the task is run from
the same start, and the episode's normalised reward is
``clip(raw / oracle_return, 0, 1)``, so the oracle scores exactly 1.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .arena import ACTION_DELTAS, ArenaConfig, ArenaState, VecArena, initial_state
from .nn import make_rng


def eval_config(config: ArenaConfig) -> ArenaConfig:
    return config.replace(domain_randomization=False, contact_limit=None)


def eval_starts(config: ArenaConfig, n_episodes: int, seed: int) -> np.ndarray:
    hw = config.arena_half_width
    return make_rng([seed, 4242]).uniform(-hw, hw, size=(n_episodes, 2))


def _toward(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Axis move reducing the larger coordinate gap (x wins ties)."""
    d = q - p
    use_x = np.abs(d[:, 0]) >= np.abs(d[:, 1])
    ax = np.where(d[:, 0] > 0, 1, 0)
    ay = np.where(d[:, 1] > 0, 2, 3)
    return np.where(use_x, ax, ay)


def _corners(half: float) -> np.ndarray:
    # counter-clockwise from the upper-right quadrant
    return np.array([[half, half], [-half, half], [-half, -half], [half, -half]])


class TargetReachOracle:
    """Walk straight to the target, then shuttle across it to stay in contact."""

    def __init__(self, config: ArenaConfig):
        self.config = config

    def reset(self, state: ArenaState):
        pass

    def __call__(self, state: ArenaState) -> np.ndarray:
        hw = self.config.arena_half_width
        target = np.asarray(self.config.tr_params.target_position)
        cand = state.robot_pos[:, None, :] + self.config.step_size * ACTION_DELTAS[None]
        dist = np.linalg.norm(cand - target, axis=-1)
        dist[np.any(np.abs(cand) > hw, axis=-1)] = np.inf
        return np.argmin(dist, axis=1)


class SquareCircuit:
    """Counter-clockwise (``direction=1``) or clockwise tour of an axis-aligned square.

    The robot first heads for the next corner in its direction of travel and
    then follows the edges corner to corner.
    """

    def __init__(self, config: ArenaConfig, half_side: float):
        self.config = config
        self.corners = _corners(half_side)
        self.angles = np.deg2rad([45.0, 135.0, 225.0, 315.0])

    def _first_corner(self, pos, direction):
        th = np.mod(np.arctan2(pos[:, 1], pos[:, 0]), 2 * np.pi)
        ccw = np.searchsorted(self.angles, th, side="right") % 4
        cw = (np.searchsorted(self.angles, th, side="left") - 1) % 4
        return np.where(direction > 0, ccw, cw)

    def reset(self, state: ArenaState, direction=None):
        n = state.robot_pos.shape[0]
        self.direction = np.ones(n, dtype=np.int64) if direction is None else np.asarray(direction)
        self.idx = self._first_corner(state.robot_pos, self.direction)

    def __call__(self, state: ArenaState) -> np.ndarray:
        half_step = self.config.step_size / 2 + 1e-9
        target = self.corners[self.idx]
        arrived = np.all(np.abs(target - state.robot_pos) <= half_step, axis=1)
        self.idx = np.where(arrived, (self.idx + self.direction) % 4, self.idx)
        return _toward(state.robot_pos, self.corners[self.idx])


class CirclingOracle(SquareCircuit):
    """Reach the ring and keep circulating on a square inscribed near it."""

    def __init__(self, config: ArenaConfig):
        super().__init__(config, 0.9 * config.tc_params.r_circle)


class EscapeOracle(SquareCircuit):
    """Run laps near the walls, turning away from the chaser at the start.

    The chaser is half as fast, so on a wide lap its pursuit curve stays
    well inside the robot's path.
    """

    def __init__(self, config: ArenaConfig):
        super().__init__(config, 0.85 * config.arena_half_width)

    def reset(self, state: ArenaState, direction=None):
        tr = np.arctan2(state.robot_pos[:, 1], state.robot_pos[:, 0])
        tc = np.arctan2(state.chaser_pos[:, 1], state.chaser_pos[:, 0])
        away = np.where(np.mod(tr - tc, 2 * np.pi) < np.pi, 1, -1)
        super().reset(state, away)


ORACLES = {"TR": TargetReachOracle, "TC": CirclingOracle, "TE": EscapeOracle}


def run_episodes(config: ArenaConfig, starts: np.ndarray, act, reset_hook=None):
    """Roll every start to the episode limit; ``act(frames, state) -> actions``.

    Returns per-episode returns.
    """
    cfg = eval_config(config)
    env = VecArena(cfg, len(starts), seed=0, auto_reset=False)
    obs = env.reset(starts)
    if reset_hook is not None:
        reset_hook(env.state)
    returns = np.zeros(len(starts))
    for _ in range(cfg.episode_len):
        a = act(obs, env.state)
        obs, r, _, _, _ = env.step(a)
        returns += r
    return returns


def _config_key(config: ArenaConfig) -> str:
    return repr(sorted(dataclasses.asdict(eval_config(config)).items()))


@lru_cache(maxsize=256)
def _oracle_returns_cached(key: str, starts_bytes: bytes, n: int, config: ArenaConfig):
    starts = np.frombuffer(starts_bytes, dtype=np.float64).reshape(n, 2)
    oracle = ORACLES[config.task](eval_config(config))
    return run_episodes(config, starts, lambda obs, st: oracle(st), oracle.reset)


def oracle_returns(config: ArenaConfig, starts: np.ndarray) -> np.ndarray:
    starts = np.ascontiguousarray(starts, dtype=np.float64)
    return _oracle_returns_cached(_config_key(config), starts.tobytes(), len(starts), eval_config(config)).copy()


def normalize(raw: np.ndarray, oracle: np.ndarray) -> np.ndarray:
    """``clip(raw / oracle, 0, 1)``; a non-positive oracle return maps to 0 or 1."""
    raw = np.asarray(raw, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    safe = np.where(oracle > 0, oracle, 1.0)
    ratio = np.where(oracle > 0, raw / safe, np.where(raw >= oracle, 1.0, 0.0))
    return np.clip(ratio, 0.0, 1.0)


@dataclass
class EvalReport:
    task: str
    policy: str
    seed: int
    starts: list
    raw: list
    normalized: list
    oracle: list
    mean: float = 0.0
    std: float = 0.0
    min: float = 0.0
    max: float = 0.0
    raw_mean: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def n_episodes(self) -> int:
        return len(self.raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def make_report(task, policy_name, seed, starts, raw, oracle) -> EvalReport:
    norm = normalize(raw, oracle)
    return EvalReport(
        task=task, policy=policy_name, seed=int(seed), starts=np.asarray(starts).tolist(),
        raw=[float(x) for x in raw], normalized=[float(x) for x in norm], oracle=[float(x) for x in oracle],
        mean=float(norm.mean()), std=float(norm.std()), min=float(norm.min()), max=float(norm.max()),
        raw_mean=float(np.mean(raw)),
    )


def evaluate(policy, env_config: ArenaConfig, n_episodes: int = 10, seed: int = 0,
             name: str | None = None) -> EvalReport:
    """Greedy rollouts of ``policy`` (anything with ``act_greedy(frames)``) on fixed starts."""
    starts = eval_starts(env_config, n_episodes, seed)
    raw = run_episodes(env_config, starts, lambda obs, st: policy.act_greedy(obs))
    oracle = oracle_returns(env_config, starts)
    return make_report(env_config.task, name or type(policy).__name__, seed, starts, raw, oracle)


def evaluate_oracle(env_config: ArenaConfig, n_episodes: int = 10, seed: int = 0) -> EvalReport:
    starts = eval_starts(env_config, n_episodes, seed)
    oracle = oracle_returns(env_config, starts)
    return make_report(env_config.task, "oracle", seed, starts, oracle, oracle)


class RandomPolicy:
    """Uniform random actions (reference bar)."""

    def __init__(self, seed: int = 0):
        self.rng = make_rng([seed, 5])

    def act_greedy(self, frames):
        return self.rng.integers(0, 4, size=len(frames))
