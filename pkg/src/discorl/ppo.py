"""Clipped-surrogate PPO for the arena tasks.

Policies act either on SRL-encoded states (``input_mode="encoded"``) or on
raw frames (``input_mode="raw_pixels"``). Policy and value function are
separate networks updated by one Adam optimizer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .arena import ArenaConfig, N_ACTIONS, VecArena
from .nn import Adam, ConfigError, Network, log_softmax, make_rng, softmax
from .srl import SrlModel, TrainingDiverged, to_float, to_levels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    n_envs: int = 8
    rollout_steps: int = 2048
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    normalize_rewards: bool = True
    checkpoint_every: int = 200
    lr_schedule: str = "constant"  # or "linear": anneal to 0 over the budget
    policy_head_scale: float = 1.0  # multiplies the initial output-layer weights of the policy

    @property
    def steps_per_env(self) -> int:
        return self.rollout_steps // self.n_envs


def mlp_spec(n_in: int, n_out: int, hidden=(64, 64), fn: str = "tanh") -> list[dict]:
    layers, prev = [], n_in
    for h in hidden:
        layers += [{"type": "dense", "in": prev, "out": h}, {"type": "activation", "fn": fn}]
        prev = h
    layers.append({"type": "dense", "in": prev, "out": n_out})
    return layers


def conv_spec(obs_shape, n_out: int, hidden: int = 64) -> list[dict]:
    h, w, c = obs_shape
    h1, w1 = (h - 4) // 2 + 1, (w - 4) // 2 + 1
    h2, w2 = (h1 - 3) // 2 + 1, (w1 - 3) // 2 + 1
    return [
        {"type": "conv", "in_ch": c, "out_ch": 8, "kernel": 4, "stride": 2},
        {"type": "activation", "fn": "relu"},
        {"type": "conv", "in_ch": 8, "out_ch": 16, "kernel": 3, "stride": 2},
        {"type": "activation", "fn": "relu"},
        {"type": "flatten"},
        {"type": "dense", "in": h2 * w2 * 16, "out": hidden},
        {"type": "activation", "fn": "relu"},
        {"type": "dense", "in": hidden, "out": n_out},
    ]


class ActorCritic:
    """Policy logits head and value head over encoded states or raw frames."""

    def __init__(self, input_mode: str, input_shape, seed: int = 0, hidden=(64, 64),
                 pi_layers=None, vf_layers=None, head_scale: float = 1.0):
        if input_mode not in ("encoded", "raw_pixels"):
            raise ConfigError(f"unknown input_mode {input_mode!r}")
        self.input_mode = input_mode
        self.input_shape = tuple(input_shape)
        if pi_layers is None:
            if input_mode == "encoded":
                pi_layers = mlp_spec(self.input_shape[0], N_ACTIONS, hidden)
                vf_layers = mlp_spec(self.input_shape[0], 1, hidden)
            else:
                pi_layers = conv_spec(self.input_shape, N_ACTIONS)
                vf_layers = conv_spec(self.input_shape, 1)
        self.pi = Network(pi_layers, self.input_shape, seed=[seed, 10])
        self.vf = Network(vf_layers, self.input_shape, seed=[seed, 11])
        if self.pi.output_shape != (N_ACTIONS,):
            raise ConfigError("policy head must output 4 logits")
        # a small output layer starts the policy close to uniform
        self.pi.layers[-1].params["W"] *= head_scale

    def parameters(self):
        return self.pi.parameters() + self.vf.parameters()

    def gradients(self):
        return self.pi.gradients() + self.vf.gradients()

    def zero_grad(self):
        self.pi.zero_grad()
        self.vf.zero_grad()

    def logits(self, x, cache=False):
        return self.pi.forward(x, cache=cache)

    def value(self, x, cache=False):
        return self.vf.forward(x, cache=cache)[:, 0]

    def copy(self) -> "ActorCritic":
        new = ActorCritic.__new__(ActorCritic)
        new.input_mode, new.input_shape = self.input_mode, self.input_shape
        new.pi, new.vf = self.pi.copy(), self.vf.copy()
        new.pi.clear_cache()
        new.vf.clear_cache()
        return new

    def size_bytes(self) -> int:
        return 8 * sum(p.size for p in self.parameters())


class Teacher:
    """An encoder (optional) feeding an actor-critic; maps frames to action probabilities."""

    def __init__(self, policy: ActorCritic, encoder: SrlModel | None = None, task: str | None = None):
        if policy.input_mode == "encoded" and encoder is None:
            raise ConfigError("encoded policies need an encoder")
        self.policy = policy
        self.encoder = encoder if policy.input_mode == "encoded" else None
        self.task = task

    @property
    def input_mode(self):
        return self.policy.input_mode

    def features(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        if self.encoder is not None:
            return self.encoder.encode(frames)
        return to_float(frames)

    def logits(self, frames) -> np.ndarray:
        return self.policy.logits(self.features(frames))

    def action_probs(self, frames) -> np.ndarray:
        return softmax(self.logits(frames))

    def act_greedy(self, frames) -> np.ndarray:
        # np.argmax breaks ties toward the lowest index
        return np.argmax(self.logits(frames), axis=1)

    def fingerprint(self) -> str:
        arrays = self.policy.parameters()
        if self.encoder is not None:
            arrays = arrays + self.encoder.encoder.parameters() + [self.encoder.state_mean, self.encoder.state_std]
        return container.array_fingerprint(*arrays)

    def copy(self) -> "Teacher":
        return Teacher(self.policy.copy(), self.encoder, self.task)

    def save(self, path, meta=None):
        nets = {"pi": self.policy.pi, "vf": self.policy.vf}
        arrays = {}
        if self.encoder is not None:
            nets["encoder"] = self.encoder.encoder
            arrays = {"state_mean": self.encoder.state_mean, "state_std": self.encoder.state_std}
        m = {"input_mode": self.input_mode, "input_shape": list(self.policy.input_shape), "task": self.task,
             "srl_spec": None if self.encoder is None else self.encoder.spec}
        m.update(meta or {})
        return container.save_bundle(path, nets, "teacher", arrays=arrays, meta=m)

    @classmethod
    def load(cls, path) -> "Teacher":
        header, nets, extra = container.load_bundle(path)
        if header["kind"] != "teacher":
            raise container.ContainerError(f"expected teacher, got {header['kind']!r}")
        m = header["meta"]
        policy = ActorCritic.__new__(ActorCritic)
        policy.input_mode, policy.input_shape = m["input_mode"], tuple(m["input_shape"])
        policy.pi, policy.vf = nets["pi"], nets["vf"]
        encoder = None
        if "encoder" in nets:
            # only the encoder half is kept with a teacher
            encoder = SrlModel.__new__(SrlModel)
            encoder.spec = m["srl_spec"]
            encoder.obs_shape = tuple(encoder.spec["obs_shape"])
            encoder.state_dim = int(encoder.spec["state_dim"])
            encoder.encoder = nets["encoder"]
            encoder.state_mean, encoder.state_std = extra["state_mean"], extra["state_std"]
        return cls(policy, encoder, m.get("task"))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def entropy_and_grad(logits: np.ndarray):
    """Per-sample entropy and its gradient w.r.t. logits."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    return h, -p * (logp + h[:, None])


def clipped_surrogate(logp_new: np.ndarray, logp_old: np.ndarray, adv: np.ndarray, clip_eps: float):
    """Mean of ``min(r A, clip(r, 1-eps, 1+eps) A)`` and its per-sample gradient w.r.t. ``logp_new``.

    The gradient is zero for samples where the clipped branch is the active
    minimum, i.e. the ratio has left the trust region in the direction the
    advantage pushes it.
    """
    ratio = np.exp(logp_new - logp_old)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    obj = np.minimum(s1, s2)
    active = s1 <= s2
    grad = np.where(active, ratio * adv, 0.0) / len(adv)
    return float(obj.mean()), grad, ratio


def ppo_policy_loss(logits, actions, logp_old, adv, clip_eps=0.2, entropy_coef=0.01):
    """``-surrogate - c_e * entropy`` (batch means) and gradient w.r.t. logits."""
    n = logits.shape[0]
    logp_all = log_softmax(logits)
    logp = logp_all[np.arange(n), actions]
    surr, g_logp, ratio = clipped_surrogate(logp, logp_old, adv, clip_eps)
    ent, g_ent = entropy_and_grad(logits)
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), actions] = 1.0
    p = np.exp(logp_all)
    g_logits = -(g_logp[:, None] * (onehot - p)) - entropy_coef * g_ent / n
    loss = -surr - entropy_coef * float(ent.mean())
    stats = {"surrogate": surr, "entropy": float(ent.mean()),
             "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
             "approx_kl": float(np.mean(logp_old - logp))}
    return loss, g_logits, stats


def value_loss(values, returns, value_coef=0.5):
    diff = values - returns
    return value_coef * float(np.mean(diff * diff)), value_coef * 2.0 * diff / len(diff)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutBatch:
    """Flattened on-policy samples (time-major over the env vector before flattening)."""

    features: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    action_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return int(self.actions.shape[0])


def compute_gae(rewards, values, dones, last_values, gamma=0.99, lam=0.95):
    """GAE over ``(T, N)`` arrays. ``dones[t]`` marks that step ``t`` ended an episode.

    Truncated episodes should already carry ``gamma * V(terminal)`` in their
    final reward so the bootstrap survives the reset.
    """
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(last_values)
    for t in range(t_len - 1, -1, -1):
        next_v = last_values if t == t_len - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


class RunningReturnScale:
    """Divides rewards by the running std of the discounted return."""

    def __init__(self, n_envs: int, gamma: float):
        self.ret = np.zeros(n_envs)
        self.gamma = gamma
        self.count, self.mean, self.m2 = 1e-4, 0.0, 0.0

    def _update(self, x):
        for v in x:
            self.count += 1
            d = v - self.mean
            self.mean += d / self.count
            self.m2 += d * (v - self.mean)

    @property
    def std(self):
        return float(np.sqrt(self.m2 / self.count)) if self.count > 1 else 1.0

    def __call__(self, rewards, dones):
        self.ret = self.ret * self.gamma + rewards
        self._update(self.ret)
        self.ret[dones] = 0.0
        return rewards / (self.std + 1e-8)


class RolloutCollector:
    """Persistent vector of arenas for repeated on-policy collection."""

    def __init__(self, env_config: ArenaConfig, teacher: Teacher, seed: int, cfg: PPOConfig = PPOConfig()):
        self.env_config = env_config
        self.teacher = teacher
        self.cfg = cfg
        self.env = VecArena(env_config, cfg.n_envs, seed=seed)
        self.rng = make_rng([seed, 77])
        self.obs = self.env.reset()
        self.scaler = RunningReturnScale(cfg.n_envs, cfg.gamma) if cfg.normalize_rewards else None
        self.total_steps = 0
        self.total_episodes = 0

    def _features(self, frames):
        f = self.teacher.features(frames)
        # raw frames are kept as uint8 levels to bound rollout memory
        return to_levels(f) if self.teacher.input_mode == "raw_pixels" else f

    def collect(self, n_steps: int) -> RolloutBatch:
        cfg, pol = self.cfg, self.teacher.policy
        n = cfg.n_envs
        t_len = max(1, n_steps // n)
        feats, acts, logps, probs, rews, vals, dones = [], [], [], [], [], [], []
        ep_returns = []
        for _ in range(t_len):
            f = self._features(self.obs)
            x = to_float(f) if f.dtype == np.uint8 else f
            logits = pol.logits(x)
            p = softmax(logits)
            v = pol.value(x)
            u = self.rng.random(n)[:, None]
            a = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), N_ACTIONS - 1)
            self.obs, r, d, _, finished = self.env.step(a)
            r = np.asarray(r, dtype=np.float64)
            if self.scaler is not None:
                r = self.scaler(r, d)
            for fin in finished:
                # every episode end here is a time-limit truncation: bootstrap it
                tf = self._features(fin["terminal_obs"][None])
                tx = to_float(tf) if tf.dtype == np.uint8 else tf
                r[fin["index"]] += cfg.gamma * pol.value(tx)[0]
                ep_returns.append(fin["return"])
            feats.append(f)
            acts.append(a)
            logps.append(np.log(p[np.arange(n), a] + 1e-300))
            probs.append(p)
            rews.append(r)
            vals.append(v)
            dones.append(d.astype(np.float64))
        lf = self._features(self.obs)
        last_v = pol.value(to_float(lf) if lf.dtype == np.uint8 else lf)
        rews, vals, dones = np.array(rews), np.array(vals), np.array(dones)
        adv, ret = compute_gae(rews, vals, dones, last_v, cfg.gamma, cfg.gae_lambda)
        self.total_steps += t_len * n
        self.total_episodes += len(ep_returns)

        def flat(x):
            x = np.asarray(x)
            return x.reshape(t_len * n, *x.shape[2:])

        return RolloutBatch(flat(feats), flat(acts), flat(logps), flat(probs), flat(rews), flat(vals),
                            flat(dones), flat(adv), flat(ret), ep_returns)


def collect_rollouts(env_config: ArenaConfig, encoder: SrlModel | None, policy: ActorCritic, n_steps: int,
                     seed: int, cfg: PPOConfig = PPOConfig()) -> RolloutBatch:
    teacher = Teacher(policy, encoder, env_config.task)
    return RolloutCollector(env_config, teacher, seed, cfg).collect(n_steps)


# ---------------------------------------------------------------------------
# update
# ---------------------------------------------------------------------------


def ppo_update(policy: ActorCritic, batch: RolloutBatch, opt: Adam, cfg: PPOConfig = PPOConfig(),
               rng: np.random.Generator | None = None) -> dict:
    """``cfg.epochs`` passes of shuffled minibatch updates; returns mean stats."""
    if len(batch) == 0:
        raise ConfigError("empty rollout batch")
    rng = make_rng(0) if rng is None else rng
    n = len(batch)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_frac": [], "approx_kl": []}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            x = batch.features[idx]
            x = to_float(x) if x.dtype == np.uint8 else x
            adv = batch.advantages[idx]
            if cfg.normalize_advantages and len(idx) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            policy.zero_grad()
            logits = policy.pi.forward(x)
            pl, g_logits, st = ppo_policy_loss(logits, batch.actions[idx], batch.logp[idx], adv,
                                               cfg.clip_eps, cfg.entropy_coef)
            values = policy.vf.forward(x)[:, 0]
            vl, g_v = value_loss(values, batch.returns[idx], cfg.value_coef)
            if not (np.isfinite(pl) and np.isfinite(vl)):
                raise TrainingDiverged(f"PPO loss became non-finite (policy={pl}, value={vl}); "
                                       f"check reward scale and learning rate")
            policy.pi.backward(g_logits)
            policy.vf.backward(g_v[:, None])
            opt.step(policy.gradients())
            stats["policy_loss"].append(pl)
            stats["value_loss"].append(vl)
            for k in ("entropy", "clip_frac", "approx_kl"):
                stats[k].append(st[k])
    policy.pi.clear_cache()
    policy.vf.clear_cache()
    return {k: float(np.mean(v)) for k, v in stats.items()}


@dataclass
class Checkpoint:
    episode: int
    teacher: Teacher


@dataclass
class TeacherRun:
    teacher: Teacher
    curve: list  # (step, episode, mean_reward)
    checkpoints: list  # episodes 200, 400, ...
    update_stats: list
    initial: Teacher | None = None  # snapshot before the first update (episode 0)


def train_teacher(env_config: ArenaConfig, encoder: SrlModel | None, budget_steps: int, seed: int,
                  cfg: PPOConfig = PPOConfig(), input_mode: str = "encoded", teacher: Teacher | None = None,
                  opt: Adam | None = None, callback=None) -> TeacherRun:
    """Alternate collection and PPO updates until ``budget_steps`` environment steps.

    ``teacher``/``opt`` continue training an existing policy (fine-tuning).
    ``callback(step, teacher)`` runs after every update. The reward curve
    records, per rollout, the mean return of episodes finished in it. A
    checkpoint is kept each time the finished-episode count crosses a
    positive multiple of ``cfg.checkpoint_every``; the untrained policy is
    returned separately as ``initial``.
    """
    if teacher is None:
        shape = (encoder.state_dim,) if input_mode == "encoded" else env_config.obs_shape
        teacher = Teacher(ActorCritic(input_mode, shape, seed=seed, head_scale=cfg.policy_head_scale),
                          encoder, env_config.task)
    if cfg.lr_schedule not in ("constant", "linear"):
        raise ConfigError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    if opt is None:
        opt = Adam(teacher.policy.parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    curve, checkpoints, all_stats = [], [], []
    initial = teacher.copy()
    if budget_steps <= 0:
        return TeacherRun(teacher, curve, checkpoints, all_stats, initial)
    collector = RolloutCollector(env_config, teacher, seed, cfg)
    rng = make_rng([seed, 78])
    while collector.total_steps < budget_steps:
        n = min(cfg.rollout_steps, budget_steps - collector.total_steps)
        if cfg.lr_schedule == "linear":
            opt.lr = cfg.lr * (1.0 - collector.total_steps / budget_steps)
        before = collector.total_episodes
        batch = collector.collect(n)
        st = ppo_update(teacher.policy, batch, opt, cfg, rng)
        all_stats.append(st)
        if batch.episode_returns:
            curve.append((collector.total_steps, collector.total_episodes, float(np.mean(batch.episode_returns))))
            log.info("%s step %d ep %d mean return %.2f ent %.3f", env_config.task, collector.total_steps,
                     collector.total_episodes, curve[-1][2], st["entropy"])
        k = cfg.checkpoint_every
        for mult in range(before // k + 1, collector.total_episodes // k + 1):
            checkpoints.append(Checkpoint(mult * k, teacher.copy()))
        if callback is not None:
            callback(collector.total_steps, teacher)
    return TeacherRun(teacher, curve, checkpoints, all_stats, initial)
