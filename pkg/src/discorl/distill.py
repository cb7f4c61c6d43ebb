"""Distillation datasets, losses and the label-free student policy.

A distillation dataset stores ``(observation, teacher action probabilities)``
pairs. It is the only thing kept from a task once its teacher is gone, so
datasets are treated as immutable once written.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .arena import ArenaConfig, ArenaState, N_ACTIONS, VecArena, grid_positions, random_background, render_batch
from .evaluation import evaluate
from .nn import Adam, ConfigError, Network, log_softmax, make_rng, softmax
from .ppo import ActorCritic, Teacher
from .srl import TrainingDiverged, to_float, to_levels

log = logging.getLogger(__name__)

GENERATION_MODES = ("on_policy", "grid_walker", "random_walker")
N_CONTACTS = 10
MAX_GRID_SAMPLES = 1_000_000
LOG_EPS = 1e-12

# reference values for the four distillation losses (mean, std of normalized reward)
PAPER_LOSS_TABLE = {"mse": (0.71, 0.22), "kl_tau1": (0.76, 0.14), "kl_tau0.1": (0.68, 0.18),
                    "kl_tau0.01": (0.77, 0.13)}
LOSS_PRESETS = {"mse": ("mse", None), "kl_tau1": ("kl", 1.0), "kl_tau0.1": ("kl", 0.1),
                "kl_tau0.01": ("kl", 0.01)}


@dataclass
class DistillDataset:
    """Observations (uint8 levels), teacher probabilities and provenance.

    ``episode`` groups consecutive frames; ``is_val`` is assigned per
    episode so temporally adjacent frames never straddle the split.
    """

    observations: np.ndarray
    probs: np.ndarray
    episode: np.ndarray
    is_val: np.ndarray
    task_id: str
    mode: str
    teacher_fingerprint: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in GENERATION_MODES:
            raise ConfigError(f"unknown generation mode {self.mode!r}")
        n = len(self.probs)
        if not (len(self.observations) == len(self.episode) == len(self.is_val) == n):
            raise ConfigError("dataset arrays have inconsistent lengths")
        if n and np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise ConfigError("teacher probabilities must sum to 1")

    def __len__(self):
        return int(len(self.probs))

    def subset(self, mask) -> "DistillDataset":
        return DistillDataset(self.observations[mask], self.probs[mask], self.episode[mask],
                              self.is_val[mask], self.task_id, self.mode, self.teacher_fingerprint,
                              self.seed, dict(self.meta))

    def train(self) -> "DistillDataset":
        return self.subset(~self.is_val)

    def val(self) -> "DistillDataset":
        return self.subset(self.is_val)

    def nbytes(self) -> int:
        return int(self.observations.nbytes + self.probs.nbytes)

    def save(self, path):
        meta = {"task_id": self.task_id, "mode": self.mode, "teacher_fingerprint": self.teacher_fingerprint,
                "seed": self.seed, "size": len(self), "n_val": int(self.is_val.sum())}
        meta.update(self.meta)
        return container.save(
            path, {"observations": self.observations, "probs": self.probs, "episode": self.episode,
                   "is_val": self.is_val.astype(np.float64)}, "distill_dataset", meta=meta)

    @classmethod
    def load(cls, path) -> "DistillDataset":
        header, a = container.load(path)
        if header["kind"] != "distill_dataset":
            raise container.ContainerError(f"expected distill_dataset, got {header['kind']!r}")
        m = dict(header["meta"])
        core = {k: m.pop(k) for k in ("task_id", "mode", "teacher_fingerprint", "seed")}
        m.pop("size", None)
        m.pop("n_val", None)
        ds = cls(a["observations"], a["probs"], a["episode"].astype(np.int64), a["is_val"] > 0.5, meta=m, **core)
        return ds


def split_by_episode(episode: np.ndarray, seed: int, val_fraction: float = 0.1) -> np.ndarray:
    """Boolean validation mask holding ``round(val_fraction * n_episodes)`` whole episodes.

    With two or more episodes at least one goes to validation.
    """
    ids = np.unique(episode)
    n_val = int(round(val_fraction * len(ids)))
    if len(ids) >= 2:
        n_val = max(n_val, 1)
    chosen = make_rng([seed, 31]).permutation(ids)[:n_val]
    return np.isin(episode, chosen)


def _check_task(env_config: ArenaConfig, teacher: Teacher):
    if teacher.task is not None and teacher.task != env_config.task:
        raise ConfigError(f"teacher was trained on {teacher.task} but the environment is {env_config.task}")


def _dataset_config(env_config: ArenaConfig) -> ArenaConfig:
    limit = N_CONTACTS if env_config.task == "TR" else None
    return env_config.replace(contact_limit=limit)


def _sample(probs: np.ndarray, rng) -> np.ndarray:
    u = rng.random(len(probs))[:, None]
    return np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), N_ACTIONS - 1)


def _rollout_episodes(cfg: ArenaConfig, actor, annotator, n_frames: int, seed: int, n_envs: int = 8):
    """Complete episodes in finishing order until ``n_frames`` frames are gathered.

    ``actor(frames) -> probs`` drives the robot; ``annotator(frames)``
    labels each stored frame. Returns a list of
    ``(frames_uint8, probs, return)`` per episode.
    """
    env = VecArena(cfg, n_envs, seed=seed)
    rng = make_rng([seed, 17])
    obs = env.reset()
    buffers = [([], []) for _ in range(n_envs)]
    episodes, total = [], 0
    while total < n_frames:
        act_p = actor(obs)
        label_p = act_p if annotator is None else annotator(obs)
        a = _sample(act_p, rng)
        levels = to_levels(obs)
        for i in range(n_envs):
            buffers[i][0].append(levels[i])
            buffers[i][1].append(label_p[i])
        obs, _, _, _, finished = env.step(a)
        for fin in finished:
            frames, probs = buffers[fin["index"]]
            episodes.append((np.stack(frames), np.stack(probs), fin["return"]))
            total += len(frames)
            buffers[fin["index"]] = ([], [])
    return episodes


def _assemble(episodes, n_samples, task, mode, fingerprint, seed, meta=None) -> DistillDataset:
    obs, probs, ep_ids = [], [], []
    have = 0
    for k, (f, p, _) in enumerate(episodes):
        take = min(len(f), n_samples - have)
        if take <= 0:
            break
        obs.append(f[:take])
        probs.append(p[:take])
        ep_ids.append(np.full(take, k, dtype=np.int64))
        have += take
    episode = np.concatenate(ep_ids)
    return DistillDataset(np.concatenate(obs), np.concatenate(probs), episode, split_by_episode(episode, seed),
                          task, mode, fingerprint, int(seed), meta or {})


def generate_onpolicy(env_config: ArenaConfig, teacher: Teacher, n_samples: int, seed: int,
                      candidate_factor: float = 2.0, n_envs: int = 8) -> DistillDataset:
    """Teacher-driven episodes, best reward-per-step first, cut to ``n_samples`` tuples.

    The teacher samples from its own distribution under domain
    randomization; TR episodes end after ``N_CONTACTS`` target contacts.
    About ``candidate_factor * n_samples`` frames of candidate episodes are
    generated and ranked.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    _check_task(env_config, teacher)
    cfg = _dataset_config(env_config)
    want = int(np.ceil(candidate_factor * n_samples))
    episodes = _rollout_episodes(cfg, teacher.action_probs, None, want, seed, n_envs)
    rate = np.array([ret / len(f) for f, _, ret in episodes])
    order = np.argsort(-rate, kind="stable")
    ranked = [episodes[i] for i in order]
    return _assemble(ranked, n_samples, cfg.task, "on_policy", teacher.fingerprint(), seed,
                     {"candidate_episodes": len(episodes)})


def generate_random_walker(env_config: ArenaConfig, teacher: Teacher, n_samples: int, seed: int,
                           n_envs: int = 8) -> DistillDataset:
    """Trajectories of an untrained raw-pixel policy, labelled by the teacher (lower bound)."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    _check_task(env_config, teacher)
    cfg = _dataset_config(env_config)
    walker = Teacher(ActorCritic("raw_pixels", cfg.obs_shape, seed=seed + 1000), None, cfg.task)
    episodes = _rollout_episodes(cfg, walker.action_probs, teacher.action_probs, n_samples, seed, n_envs)
    return _assemble(episodes, n_samples, cfg.task, "random_walker", teacher.fingerprint(), seed)


def gridwalker_positions(env_config: ArenaConfig, stride: float, chaser_stride: float = 1.0):
    """Robot lattice, crossed with a chaser lattice on TE; returns ``(robot, chaser)`` rows."""
    robot = grid_positions(env_config, stride)
    if env_config.task != "TE":
        return robot, None
    chaser = grid_positions(env_config, chaser_stride)
    total = len(robot) * len(chaser)
    if total > MAX_GRID_SAMPLES:
        raise ConfigError(f"grid walker would produce {total} samples (limit {MAX_GRID_SAMPLES})")
    return np.repeat(robot, len(chaser), axis=0), np.tile(chaser, (len(robot), 1))


def generate_gridwalker(env_config: ArenaConfig, teacher: Teacher, stride: float, seed: int,
                        n_samples: int | None = None, chaser_stride: float = 1.0,
                        batch: int = 512) -> DistillDataset:
    """Teacher labels at every lattice position (and chaser position on TE).

    With ``n_samples`` the sweep repeats with fresh backgrounds until that
    many tuples exist; otherwise one sweep is returned. Each tuple is its own
    episode for the split.
    """
    _check_task(env_config, teacher)
    n_lattice = len(grid_positions(env_config, stride))
    if n_lattice > MAX_GRID_SAMPLES:
        raise ConfigError(f"grid walker would produce {n_lattice} samples (limit {MAX_GRID_SAMPLES})")
    robot, chaser = gridwalker_positions(env_config, stride, chaser_stride)
    total = len(robot) if n_samples is None else int(n_samples)
    if total < 1:
        raise ConfigError("n_samples must be >= 1")
    if total > MAX_GRID_SAMPLES:
        raise ConfigError(f"grid walker would produce {total} samples (limit {MAX_GRID_SAMPLES})")
    reps = int(np.ceil(total / len(robot)))
    robot = np.tile(robot, (reps, 1))[:total]
    if chaser is not None:
        chaser = np.tile(chaser, (reps, 1))[:total]
    rng = make_rng([seed, 23])
    if env_config.domain_randomization:
        bgs = np.stack([random_background(rng) for _ in range(total)])
    else:
        bgs = np.tile(np.asarray(env_config.canonical_background, dtype=np.float64), (total, 1))
    if env_config.task == "TR":
        marker = np.tile(np.asarray(env_config.tr_params.target_position, dtype=np.float64), (total, 1))
    elif env_config.task == "TC":
        marker = np.zeros((total, 2))
    else:
        marker = chaser
    obs, probs = [], []
    for s in range(0, total, batch):
        frames = render_batch(robot[s : s + batch], marker[s : s + batch], bgs[s : s + batch], env_config)
        obs.append(to_levels(frames))
        probs.append(teacher.action_probs(frames))
    episode = np.arange(total)
    return DistillDataset(np.concatenate(obs), np.concatenate(probs), episode, split_by_episode(episode, seed),
                          env_config.task, "grid_walker", teacher.fingerprint(), int(seed),
                          {"stride": stride, "lattice_size": n_lattice})


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_mse(student_probs: np.ndarray, teacher_probs: np.ndarray):
    """Mean over the batch of ``||x - y||^2``; returns ``(loss, d loss / d student_probs)``."""
    x = np.atleast_2d(np.asarray(student_probs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(teacher_probs, dtype=np.float64))
    diff = x - y
    n = x.shape[0]
    return float((diff * diff).sum() / n), 2.0 * diff / n


def tempered_teacher(teacher, tau: float, from_probs: bool = True) -> np.ndarray:
    """``softmax(z / tau)`` with ``z = ln(p + 1e-12)`` for stored probabilities."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    t = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    z = np.log(t + LOG_EPS) if from_probs else t
    return softmax(z / tau)


def loss_kl_tau(teacher, student_logits: np.ndarray, tau: float = 1.0, from_probs: bool = True):
    """``KL(softmax(z_t / tau) || softmax(q))`` averaged over the batch.

    ``teacher`` holds probabilities (``from_probs=True``) or logits.
    Returns ``(loss, d loss / d student_logits)``.
    """
    pt = tempered_teacher(teacher, tau, from_probs)
    q = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    logq = log_softmax(q)
    pos = pt > 0
    logpt = np.log(np.where(pos, pt, 1.0))
    n = q.shape[0]
    loss = float(np.where(pos, pt * (logpt - logq), 0.0).sum() / n)
    return loss, (np.exp(logq) - pt) / n


def softmax_backward(probs: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (g - (g * probs).sum(axis=1, keepdims=True))


def distill_loss(logits: np.ndarray, teacher_probs: np.ndarray, loss: str = "kl", tau: float | None = 0.01):
    """Loss and logit gradient for ``"mse"`` (on probabilities) or ``"kl"`` (tempered)."""
    if loss == "mse":
        p = softmax(logits)
        val, g = loss_mse(p, teacher_probs)
        return val, softmax_backward(p, g)
    if loss == "kl":
        return loss_kl_tau(teacher_probs, logits, 1.0 if tau is None else tau)
    raise ConfigError(f"unknown distillation loss {loss!r}")


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------


def student_spec(obs_shape=(32, 32, 3), hidden: int = 64) -> list[dict]:
    h, w, c = obs_shape
    h1, w1 = (h - 4) // 2 + 1, (w - 4) // 2 + 1
    h2, w2 = (h1 - 3) // 2 + 1, (w1 - 3) // 2 + 1
    return [
        {"type": "conv", "in_ch": c, "out_ch": 16, "kernel": 4, "stride": 2},
        {"type": "activation", "fn": "relu"},
        {"type": "conv", "in_ch": 16, "out_ch": 32, "kernel": 3, "stride": 2},
        {"type": "activation", "fn": "relu"},
        {"type": "flatten"},
        {"type": "dense", "in": h2 * w2 * 32, "out": hidden},
        {"type": "activation", "fn": "relu"},
        {"type": "dense", "in": hidden, "out": N_ACTIONS},
    ]


class StudentPolicy:
    """Raw-pixel policy distilled from one or more teachers.

    Inference takes only observations: there is no encoder and no task
    argument anywhere on the acting path.
    """

    def __init__(self, obs_shape=(32, 32, 3), seed: int = 0, layers=None):
        self.obs_shape = tuple(obs_shape)
        self.net = Network(layers or student_spec(self.obs_shape), self.obs_shape, seed=[seed, 40])
        if self.net.output_shape != (N_ACTIONS,):
            raise ConfigError("student must output 4 logits")
        self.tasks: list[str] = []

    def logits(self, observations, batch: int = 512) -> np.ndarray:
        obs = np.asarray(observations)
        if obs.shape == self.obs_shape:
            obs = obs[None]
        out = [self.net.forward(to_float(obs[i : i + batch]), cache=False) for i in range(0, len(obs), batch)]
        return np.concatenate(out)

    def action_probs(self, observations) -> np.ndarray:
        return softmax(self.logits(observations))

    def act(self, observations) -> np.ndarray:
        """Greedy actions, lowest index on ties."""
        return np.argmax(self.logits(observations), axis=1)

    act_greedy = act

    def copy(self) -> "StudentPolicy":
        new = StudentPolicy.__new__(StudentPolicy)
        new.obs_shape, new.tasks = self.obs_shape, list(self.tasks)
        new.net = self.net.copy()
        new.net.clear_cache()
        return new

    def size_bytes(self) -> int:
        return 8 * sum(p.size for p in self.net.parameters())

    def fingerprint(self) -> str:
        return container.array_fingerprint(*self.net.parameters())

    def save(self, path, meta=None):
        m = {"tasks": self.tasks, "obs_shape": list(self.obs_shape)}
        m.update(meta or {})
        return container.save_bundle(path, {"student": self.net}, "student", meta=m)

    @classmethod
    def load(cls, path) -> "StudentPolicy":
        header, nets, _ = container.load_bundle(path)
        if header["kind"] != "student":
            raise container.ContainerError(f"expected student, got {header['kind']!r}")
        s = cls.__new__(cls)
        s.obs_shape = tuple(header["meta"]["obs_shape"])
        s.net = nets["student"]
        s.tasks = list(header["meta"]["tasks"])
        return s


@dataclass
class StudentStats:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)  # per epoch: {task: argmax agreement}
    best_epoch: int = -1
    stopped_early: bool = False


def merge(datasets: list[DistillDataset]):
    """Concatenate observations, probabilities, split flags and per-row task ids."""
    obs = np.concatenate([d.observations for d in datasets])
    probs = np.concatenate([d.probs for d in datasets])
    is_val = np.concatenate([d.is_val for d in datasets])
    tasks = np.concatenate([np.full(len(d), d.task_id, dtype=object) for d in datasets])
    return obs, probs, is_val, tasks


def _eval_loss(student, obs, probs, loss, tau, batch=512):
    total = 0.0
    for s in range(0, len(obs), batch):
        v, _ = distill_loss(student.logits(obs[s : s + batch]), probs[s : s + batch], loss, tau)
        total += v * len(obs[s : s + batch])
    return total / max(len(obs), 1)


def agreement(student: StudentPolicy, obs, probs) -> float:
    if len(obs) == 0:
        return float("nan")
    return float(np.mean(student.act(obs) == np.argmax(probs, axis=1)))


def train_student(datasets: list[DistillDataset], loss: str = "kl", tau: float | None = 0.01, epochs: int = 4,
                  seed: int = 0, batch_size: int = 32, lr: float = 1e-3, patience: int = 1,
                  obs_shape=None) -> tuple[StudentPolicy, StudentStats]:
    """Fit a fresh student on the merged training splits; keep the best-validation epoch.

    Training stops early once validation loss has not improved for
    ``patience`` epochs. Without validation data, training loss is used.
    """
    if not datasets:
        raise ConfigError("need at least one distillation dataset")
    obs, probs, is_val, tasks = merge(datasets)
    train_idx = np.flatnonzero(~is_val)
    val_idx = np.flatnonzero(is_val)
    if len(train_idx) == 0:
        raise ConfigError("merged distillation training split is empty")
    student = StudentPolicy(obs_shape or obs.shape[1:], seed=seed)
    student.tasks = list(dict.fromkeys(d.task_id for d in datasets))
    opt = Adam(student.net.parameters(), lr=lr)
    rng = make_rng([seed, 41])
    stats = StudentStats()
    best, best_loss, bad = student.copy(), np.inf, 0
    for epoch in range(epochs):
        order = rng.permutation(train_idx)
        tot = 0.0
        for s in range(0, len(order), batch_size):
            idx = np.sort(order[s : s + batch_size])
            student.net.zero_grad()
            logits = student.net.forward(to_float(obs[idx]))
            val, g = distill_loss(logits, probs[idx], loss, tau)
            if not np.isfinite(val):
                raise TrainingDiverged(f"distillation loss became {val} in epoch {epoch}")
            student.net.backward(g)
            opt.step(student.net.gradients())
            tot += val * len(idx)
        student.net.clear_cache()
        stats.train_loss.append(tot / len(train_idx))
        sel = val_idx if len(val_idx) else train_idx
        vl = _eval_loss(student, obs[sel], probs[sel], loss, tau)
        stats.val_loss.append(vl)
        stats.val_accuracy.append({t: agreement(student, obs[sel][tasks[sel] == t], probs[sel][tasks[sel] == t])
                                   for t in student.tasks})
        log.info("student epoch %d: train %.5f val %.5f", epoch, stats.train_loss[-1], vl)
        if vl < best_loss:
            best, best_loss, bad = student.copy(), vl, 0
            stats.best_epoch = epoch
        else:
            bad += 1
            if bad >= patience and epoch < epochs - 1:
                stats.stopped_early = True
                break
    return best, stats


def compare_losses(datasets_per_seed, env_configs: list[ArenaConfig], loss_list=tuple(LOSS_PRESETS),
                   seeds=(0, 1, 2, 3, 4), epochs: int = 4, n_episodes: int = 10, eval_seed: int = 0) -> list[dict]:
    """Train one multi-task student per loss and seed; report mean/std normalized reward.

    ``datasets_per_seed(seed) -> list[DistillDataset]`` supplies the
    merged memory for each seed (usually generated once from the
    teachers). Rows carry the reference values for comparison.
    """
    rows = []
    cache = {}
    for name in loss_list:
        if name not in LOSS_PRESETS:
            raise ConfigError(f"unknown loss preset {name!r}")
        kind, tau = LOSS_PRESETS[name]
        scores, per_seed = [], []
        for seed in seeds:
            if seed not in cache:
                cache[seed] = datasets_per_seed(seed)
            student, _ = train_student(cache[seed], kind, tau, epochs=epochs, seed=seed)
            task_means = [evaluate(student, c, n_episodes, eval_seed).mean for c in env_configs]
            scores.extend(task_means)
            per_seed.append(float(np.mean(task_means)))
        ref = PAPER_LOSS_TABLE[name]
        rows.append({"loss": name, "tau": tau, "mean": float(np.mean(scores)), "std": float(np.std(scores)),
                     "per_seed": per_seed, "paper_mean": ref[0], "paper_std": ref[1]})
    return rows
