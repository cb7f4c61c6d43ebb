"""Deterministic 2D arena with three navigation tasks.

Tasks
-----
TR  target reaching: +1 on the red target, -1 on a wall bump, else 0.
TC  target circling: movement-weighted ring reward around a blue center tag.
TE  target escaping: +1 when out of reach of an orange chaser, else -1.

The state is held in numpy arrays with an optional leading batch axis, so
the same transition, reward and render code drives a single arena
(``reset``/``step``) and a vector of arenas (``VecArena``).

Actions: 0 left (-x), 1 right (+x), 2 up (+y), 3 down (-y).
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import ConfigError, UsageError, make_rng

TASKS = ("TR", "TC", "TE")
N_ACTIONS = 4
ACTION_NAMES = ("left", "right", "up", "down")
ACTION_DELTAS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

# bump detection tolerance for accumulated float error on exact wall hits
_BOUND_TOL = 1e-9

FRAME_COLOR = np.array([1.0, 0.0, 0.0])
ROBOT_COLOR = np.array([0.0, 0.0, 0.0])
MARKER_COLORS = {
    "TR": np.array([1.0, 0.0, 0.0]),
    "TC": np.array([0.0, 0.0, 1.0]),
    "TE": np.array([1.0, 128 / 255, 0.0]),
}
# every rendered value is a multiple of 1/255, so frames store losslessly as uint8
COLOR_LEVELS = 255


@dataclass(frozen=True)
class TRParams:
    target_position: tuple = (0.6, 0.6)
    contact_range: float = 0.15
    n_contacts: int = 10


@dataclass(frozen=True)
class TCParams:
    lam: float = 10.0
    r_circle: float = 0.5
    k: int = 5


@dataclass(frozen=True)
class TEParams:
    chaser_speed: float = 0.05
    catch_range: float = 0.3
    chaser_start: tuple = (-1.0, -1.0)


@dataclass(frozen=True)
class ArenaConfig:
    task: str = "TR"
    arena_half_width: float = 1.0
    step_size: float = 0.1
    episode_len: int = 250
    render_size: int = 32
    robot_half_size: float = 0.1
    marker_half_size: float = 0.2
    domain_randomization: bool = True
    canonical_background: tuple = (191 / 255, 191 / 255, 191 / 255)
    # TR episodes end after this many target contacts when set (dataset generation only)
    contact_limit: int | None = None
    tr_params: TRParams = field(default_factory=TRParams)
    tc_params: TCParams = field(default_factory=TCParams)
    te_params: TEParams = field(default_factory=TEParams)
    seed: int = 0

    def __post_init__(self):
        hw = self.arena_half_width
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not 0 < self.step_size < hw:
            raise ConfigError("step_size must be in (0, arena_half_width)")
        if not 0 < self.tc_params.r_circle < hw:
            raise ConfigError("r_circle must be in (0, arena_half_width)")
        if self.tc_params.k < 1:
            raise ConfigError("k must be >= 1")
        if self.te_params.catch_range <= 0:
            raise ConfigError("catch_range must be positive")
        if self.episode_len < 1 or self.render_size < 4:
            raise ConfigError("episode_len >= 1 and render_size >= 4 required")
        if self.marker_half_size <= self.robot_half_size + 2 * hw / (self.render_size - 2):
            # keeps a ring of marker pixels visible when the robot sits on it
            raise ConfigError("marker_half_size must exceed robot_half_size by more than one pixel")

    def replace(self, **kw) -> "ArenaConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArenaConfig":
        d = dict(d)
        for key, sub in (("tr_params", TRParams), ("tc_params", TCParams), ("te_params", TEParams)):
            if key in d and isinstance(d[key], dict):
                vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = sub(**vals)
        for key in ("canonical_background",):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)

    @property
    def obs_shape(self) -> tuple:
        return (self.render_size, self.render_size, 3)


@dataclass
class ArenaState:
    """Simulator state. Arrays may carry a leading batch axis."""

    robot_pos: np.ndarray
    position_history: np.ndarray  # (..., k, 2), oldest first: z_{t-k} .. z_{t-1}
    chaser_pos: np.ndarray
    background_color: np.ndarray
    t: np.ndarray
    bumped: np.ndarray
    contacts: np.ndarray

    def copy(self) -> "ArenaState":
        return ArenaState(**{f.name: np.array(getattr(self, f.name), copy=True)
                             for f in dataclasses.fields(self)})


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict


# ---------------------------------------------------------------------------
# rewards and chaser
# ---------------------------------------------------------------------------


def _norm(v):
    return np.sqrt(np.sum(np.square(v), axis=-1))


def reward_tr(state: ArenaState, config: ArenaConfig):
    p = config.tr_params
    on_target = _norm(state.robot_pos - np.asarray(p.target_position)) <= p.contact_range
    r = np.where(on_target, 1.0, 0.0)
    return np.where(state.bumped, -1.0, r)


def reward_tc(state: ArenaState, config: ArenaConfig, past_pos=None):
    """Ring reward: lam*(1 - lam*(|z_t| - r)^2)*|z_t - z_{t-k}|^2 + lam^2 * R_bump.

    ``past_pos`` defaults to the oldest entry of the position history, which
    is z_{t-k} when the history has not been advanced yet for this step.
    """
    p = config.tc_params
    z = state.robot_pos
    z_past = state.position_history[..., 0, :] if past_pos is None else past_pos
    ring = 1.0 - p.lam * (_norm(z) - p.r_circle) ** 2
    move = np.sum(np.square(z - z_past), axis=-1)
    bump = np.where(state.bumped, -1.0, 0.0)
    return p.lam * ring * move + p.lam ** 2 * bump


def reward_te(state: ArenaState, config: ArenaConfig):
    p = config.te_params
    caught = _norm(state.robot_pos - state.chaser_pos) <= p.catch_range
    return np.where(state.bumped | caught, -1.0, 1.0)


def chaser_policy(chaser_pos, robot_pos, config: ArenaConfig):
    """Greedy pursuit: move ``chaser_speed`` straight toward the robot (no overshoot)."""
    chaser_pos = np.asarray(chaser_pos, dtype=np.float64)
    delta = np.asarray(robot_pos, dtype=np.float64) - chaser_pos
    dist = _norm(delta)[..., None]
    speed = config.te_params.chaser_speed
    safe = np.where(dist > 0, dist, 1.0)
    move = np.where(dist > 0, delta / safe * np.minimum(speed, dist), 0.0)
    hw = config.arena_half_width
    return np.clip(chaser_pos + move, -hw, hw)


def task_reward(state: ArenaState, config: ArenaConfig, past_pos=None):
    if config.task == "TR":
        return reward_tr(state, config)
    if config.task == "TC":
        return reward_tc(state, config, past_pos)
    return reward_te(state, config)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def pixel_centers(config: ArenaConfig) -> tuple[np.ndarray, np.ndarray]:
    """World x of each column and y of each row; frame pixels get NaN."""
    r = config.render_size
    hw = config.arena_half_width
    px = 2 * hw / (r - 2)
    idx = np.arange(r, dtype=np.float64)
    xs = -hw + (idx - 0.5) * px
    ys = hw - (idx - 0.5) * px
    xs[[0, -1]] = np.nan
    ys[[0, -1]] = np.nan
    return xs, ys


def _square_mask(centers, half, xs, ys):
    # centers (N, 2) -> (N, R, R) with rows indexed by y
    with np.errstate(invalid="ignore"):
        mx = np.abs(xs[None, :] - centers[:, 0:1]) <= half + 1e-12
        my = np.abs(ys[None, :] - centers[:, 1:2]) <= half + 1e-12
    return my[:, :, None] & mx[:, None, :]


def marker_position(state: ArenaState, config: ArenaConfig) -> np.ndarray:
    shape = np.shape(state.robot_pos)
    if config.task == "TR":
        return np.broadcast_to(np.asarray(config.tr_params.target_position, dtype=np.float64), shape)
    if config.task == "TC":
        return np.zeros(shape)
    return np.asarray(state.chaser_pos, dtype=np.float64)


def render_batch(robot_pos, marker_pos, background, config: ArenaConfig) -> np.ndarray:
    robot_pos = np.atleast_2d(robot_pos)
    marker_pos = np.atleast_2d(marker_pos)
    background = np.atleast_2d(background)
    n = robot_pos.shape[0]
    r = config.render_size
    xs, ys = pixel_centers(config)
    img = np.broadcast_to(background[:, None, None, :], (n, r, r, 3)).copy()
    mm = _square_mask(marker_pos, config.marker_half_size, xs, ys)
    img[mm] = MARKER_COLORS[config.task]
    rm = _square_mask(robot_pos, config.robot_half_size, xs, ys)
    img[rm] = ROBOT_COLOR
    img[:, 0, :, :] = FRAME_COLOR
    img[:, -1, :, :] = FRAME_COLOR
    img[:, :, 0, :] = FRAME_COLOR
    img[:, :, -1, :] = FRAME_COLOR
    return img


def render(state: ArenaState, config: ArenaConfig) -> np.ndarray:
    """Top-down RGB observation; batched when the state is batched."""
    batched = np.ndim(state.robot_pos) == 2
    img = render_batch(state.robot_pos, marker_position(state, config), state.background_color, config)
    return img if batched else img[0]


def grid_positions(config: ArenaConfig, stride: float) -> np.ndarray:
    """Row-major lattice ``-hw + i*stride`` over the arena (y outer, x inner).

    A stride at least the arena width degenerates to the lattice origin
    corner only.
    """
    hw = config.arena_half_width
    width = 2 * hw
    if stride <= 0:
        raise ConfigError("stride must be positive")
    if stride >= width:
        return np.array([[-hw, -hw]])
    n = int(np.floor(width / stride + 1e-9)) + 1
    axis = np.minimum(-hw + stride * np.arange(n), hw)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def random_background(rng) -> np.ndarray:
    """Uniform draw over the 256 levels of each RGB channel."""
    return rng.integers(0, COLOR_LEVELS + 1, size=3) / COLOR_LEVELS


def _draw_background(rng, config: ArenaConfig) -> np.ndarray:
    if config.domain_randomization:
        return random_background(rng)
    return np.asarray(config.canonical_background, dtype=np.float64)


def initial_state(start_pos, config: ArenaConfig, background=None, chaser_pos=None) -> ArenaState:
    """Unbatched state with the robot at ``start_pos`` (history padded with it)."""
    start = np.asarray(start_pos, dtype=np.float64).reshape(2)
    k = config.tc_params.k
    bg = np.asarray(config.canonical_background if background is None else background, dtype=np.float64)
    chaser = np.asarray(config.te_params.chaser_start if chaser_pos is None else chaser_pos, dtype=np.float64)
    return ArenaState(
        robot_pos=start.copy(),
        position_history=np.tile(start, (k, 1)),
        chaser_pos=chaser.copy(),
        background_color=bg.copy(),
        t=np.array(0),
        bumped=np.array(False),
        contacts=np.array(0),
    )


def reset(config: ArenaConfig, seed=None, rng: np.random.Generator | None = None):
    """Random start anywhere in the arena; returns ``(state, observation)``."""
    if rng is None:
        rng = make_rng(config.seed if seed is None else seed)
    hw = config.arena_half_width
    start = rng.uniform(-hw, hw, size=2)
    state = initial_state(start, config, background=_draw_background(rng, config))
    return state, render(state, config)


def transition(state: ArenaState, actions, config: ArenaConfig, backgrounds=None):
    """Advance a (possibly batched) state in place; returns ``(reward, done, info)``.

    ``backgrounds`` supplies the redrawn background colors when domain
    randomization is on.
    """
    if np.any(state.t >= config.episode_len):
        raise UsageError("step called on a finished episode")
    actions = np.asarray(actions, dtype=np.int64)
    if np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise ConfigError("action must be in {0, 1, 2, 3}")
    hw = config.arena_half_width
    raw = state.robot_pos + config.step_size * ACTION_DELTAS[actions]
    bumped = np.any(np.abs(raw) > hw + _BOUND_TOL, axis=-1)
    state.robot_pos = np.clip(raw, -hw, hw)
    state.bumped = bumped
    if backgrounds is not None:
        state.background_color = np.asarray(backgrounds, dtype=np.float64)
    if config.task == "TE":
        state.chaser_pos = chaser_policy(state.chaser_pos, state.robot_pos, config)
    past = state.position_history[..., 0, :].copy()
    reward = task_reward(state, config, past_pos=past)
    hist = np.roll(state.position_history, -1, axis=-2)
    hist[..., -1, :] = state.robot_pos
    state.position_history = hist
    state.t = state.t + 1
    contact = np.zeros_like(bumped)
    if config.task == "TR":
        p = config.tr_params
        contact = _norm(state.robot_pos - np.asarray(p.target_position)) <= p.contact_range
        state.contacts = state.contacts + contact
    caught = np.zeros_like(bumped)
    if config.task == "TE":
        caught = _norm(state.robot_pos - state.chaser_pos) <= config.te_params.catch_range
    done = state.t >= config.episode_len
    if config.task == "TR" and config.contact_limit is not None:
        done = done | (state.contacts >= config.contact_limit)
    info = {"bumped": bumped, "contact_with_target": contact, "caught_by_chaser": caught}
    return reward, done, info


def step(state: ArenaState, action: int, config: ArenaConfig, rng: np.random.Generator | None = None) -> StepResult:
    """Single-arena step; mutates ``state``. ``rng`` drives background redraws."""
    bg = None
    if config.domain_randomization:
        if rng is None:
            raise UsageError("domain randomization needs an rng for background redraws")
        bg = random_background(rng)
    reward, done, info = transition(state, action, config, bg)
    obs = render(state, config)
    return StepResult(obs, float(reward), bool(done), {k: bool(v) for k, v in info.items()})


class Arena:
    """Convenience single-environment wrapper with its own generator."""

    def __init__(self, config: ArenaConfig, seed=None):
        self.config = config
        self.rng = make_rng(config.seed if seed is None else seed)
        self.state = None
        self.done = True

    def reset(self, start_pos=None):
        if start_pos is None:
            self.state, obs = reset(self.config, rng=self.rng)
        else:
            self.state = initial_state(start_pos, self.config, _draw_background(self.rng, self.config))
            obs = render(self.state, self.config)
        self.done = False
        return obs

    def step(self, action: int) -> StepResult:
        if self.done:
            raise UsageError("episode finished; call reset()")
        res = step(self.state, action, self.config, self.rng)
        self.done = res.done
        return res


class VecArena:
    """N independent arenas stepped together; finished arenas auto-reset.

    Each arena owns a generator seeded from ``(seed, index)`` so results do
    not depend on how many arenas share the vector.
    """

    def __init__(self, config: ArenaConfig, n_envs: int, seed: int, auto_reset: bool = True):
        self.config = config
        self.n = n_envs
        self.auto_reset = auto_reset
        self.rngs = [make_rng([seed, i]) for i in range(n_envs)]
        k = config.tc_params.k
        self.state = ArenaState(
            robot_pos=np.zeros((n_envs, 2)),
            position_history=np.zeros((n_envs, k, 2)),
            chaser_pos=np.zeros((n_envs, 2)),
            background_color=np.zeros((n_envs, 3)),
            t=np.zeros(n_envs, dtype=np.int64),
            bumped=np.zeros(n_envs, dtype=bool),
            contacts=np.zeros(n_envs, dtype=np.int64),
        )
        self.episode_returns = np.zeros(n_envs)
        self.episode_lengths = np.zeros(n_envs, dtype=np.int64)

    def _reset_one(self, i, start_pos=None, chaser_pos=None):
        rng = self.rngs[i]
        hw = self.config.arena_half_width
        start = rng.uniform(-hw, hw, size=2) if start_pos is None else np.asarray(start_pos, dtype=np.float64)
        s = initial_state(start, self.config, _draw_background(rng, self.config), chaser_pos)
        for f in dataclasses.fields(ArenaState):
            getattr(self.state, f.name)[i] = getattr(s, f.name)
        self.episode_returns[i] = 0.0
        self.episode_lengths[i] = 0

    def reset(self, starts=None) -> np.ndarray:
        for i in range(self.n):
            self._reset_one(i, None if starts is None else starts[i])
        return self.render()

    def render(self) -> np.ndarray:
        return render(self.state, self.config)

    def step(self, actions):
        """Returns ``(obs, rewards, dones, infos, finished)``.

        ``finished`` holds one dict per episode that ended this step with its
        ``index``, ``return``, ``length`` and ``terminal_obs``. With auto-reset
        the returned ``obs`` row for that arena is already the next
        episode's first frame.
        """
        bgs = None
        if self.config.domain_randomization:
            bgs = np.stack([random_background(rng) for rng in self.rngs])
        rewards, dones, infos = transition(self.state, actions, self.config, bgs)
        self.episode_returns += rewards
        self.episode_lengths += 1
        obs = self.render()
        finished = []
        for i in np.flatnonzero(dones):
            finished.append({"index": int(i), "return": float(self.episode_returns[i]),
                             "length": int(self.episode_lengths[i]), "terminal_obs": obs[i].copy()})
            if self.auto_reset:
                self._reset_one(i)
        if finished and self.auto_reset:
            idx = [f["index"] for f in finished]
            sub = ArenaState(**{f.name: getattr(self.state, f.name)[idx] for f in dataclasses.fields(ArenaState)})
            obs[idx] = render(sub, self.config)
        return obs, rewards, dones, infos, finished


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


TRACE_COLUMNS = ("t", "x", "y", "action", "reward", "bumped", "task")


def write_trace_csv(path, rows, task: str):
    """``rows``: iterable of ``(t, x, y, action, reward, bumped)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for t, x, y, a, r, b in rows:
            w.writerow([int(t), repr(float(x)), repr(float(y)), int(a), repr(float(r)), int(bool(b)), task])
    return path


def record_episode(config: ArenaConfig, policy, seed: int, start_pos=None):
    """Run one episode with ``policy(obs) -> action``; returns trace rows and frames."""
    env = Arena(config, seed)
    obs = env.reset(start_pos)
    rows, frames = [], [obs]
    while not env.done:
        a = int(policy(obs))
        res = env.step(a)
        rows.append((int(env.state.t), env.state.robot_pos[0], env.state.robot_pos[1], a, res.reward,
                     res.info["bumped"]))
        obs = res.observation
        frames.append(obs)
    return rows, np.stack(frames)


def dump_observations(path, frames: np.ndarray, meta=None):
    from . import container

    return container.save(path, {"observations": frames}, "observations", meta=meta)
