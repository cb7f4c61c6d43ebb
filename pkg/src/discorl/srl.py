"""State representation learning: autoencoder + inverse dynamics.

A shared convolutional encoder maps a frame to a ``d``-dimensional state.
The decoder reconstructs the frame from the state and an inverse head
predicts the action from ``(s_t, s_{t+1})``; both losses train the encoder.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .arena import Arena, ArenaConfig, N_ACTIONS
from .nn import Adam, ConfigError, Network, cross_entropy, make_rng, mse, softmax

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """A loss became NaN/Inf during training."""


def to_float(frames: np.ndarray) -> np.ndarray:
    """uint8 levels -> float64 in [0, 1]; float input passes through."""
    if frames.dtype == np.uint8:
        return frames.astype(np.float64) / 255.0
    return np.asarray(frames, dtype=np.float64)


def to_levels(frames: np.ndarray) -> np.ndarray:
    levels = np.rint(np.asarray(frames) * 255.0)
    if np.any(np.abs(levels - np.asarray(frames) * 255.0) > 1e-6):
        raise ValueError("frames are not exact multiples of 1/255")
    return levels.astype(np.uint8)


@dataclass
class SrlDataset:
    """Random-policy transitions ``(o_t, a_t, o_{t+1})``.

    Frames are stored once per episode step (uint8 levels); transitions
    index into them.
    """

    frames: np.ndarray
    obs_index: np.ndarray
    next_index: np.ndarray
    actions: np.ndarray
    task_id: str
    seed: int
    episode: np.ndarray = field(default=None)

    @property
    def size(self) -> int:
        return int(self.actions.shape[0])

    def __len__(self):
        return self.size

    def transition(self, i: int):
        return (to_float(self.frames[self.obs_index[i]]), int(self.actions[i]),
                to_float(self.frames[self.next_index[i]]))

    def save(self, path):
        return container.save(
            path,
            {"frames": self.frames, "obs_index": self.obs_index, "next_index": self.next_index,
             "actions": self.actions, "episode": self.episode},
            "srl_dataset",
            meta={"task_id": self.task_id, "seed": self.seed, "size": self.size},
        )

    @classmethod
    def load(cls, path) -> "SrlDataset":
        header, a = container.load(path)
        if header["kind"] != "srl_dataset":
            raise container.ContainerError(f"expected srl_dataset, got {header['kind']!r}")
        m = header["meta"]
        return cls(a["frames"], a["obs_index"].astype(np.int64), a["next_index"].astype(np.int64),
                   a["actions"].astype(np.int64), m["task_id"], m["seed"], a["episode"].astype(np.int64))


def collect_random_dataset(env_config: ArenaConfig, n_samples: int, seed: int) -> SrlDataset:
    """Exactly ``n_samples`` uniform-random transitions over as many episodes as needed."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    rng = make_rng([seed, 1])
    env = Arena(env_config, seed=[seed, 0])
    frames, obs_idx, next_idx, actions, episode = [], [], [], [], []
    ep = -1
    while len(actions) < n_samples:
        frames.append(to_levels(env.reset()))
        ep += 1
        while not env.done and len(actions) < n_samples:
            a = int(rng.integers(N_ACTIONS))
            res = env.step(a)
            frames.append(to_levels(res.observation))
            obs_idx.append(len(frames) - 2)
            next_idx.append(len(frames) - 1)
            actions.append(a)
            episode.append(ep)
    return SrlDataset(np.stack(frames), np.array(obs_idx), np.array(next_idx), np.array(actions),
                      env_config.task, int(seed), np.array(episode))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def default_model_spec(obs_shape=(32, 32, 3), state_dim: int = 16) -> dict:
    h, w, c = obs_shape
    h1, w1 = (h - 4) // 2 + 1, (w - 4) // 2 + 1
    h2, w2 = (h1 - 3) // 2 + 1, (w1 - 3) // 2 + 1
    flat = h2 * w2 * 32
    pixels = h * w * c
    return {
        "obs_shape": list(obs_shape),
        "state_dim": state_dim,
        "encoder": [
            {"type": "conv", "in_ch": c, "out_ch": 16, "kernel": 4, "stride": 2},
            {"type": "activation", "fn": "relu"},
            {"type": "conv", "in_ch": 16, "out_ch": 32, "kernel": 3, "stride": 2},
            {"type": "activation", "fn": "relu"},
            {"type": "flatten"},
            {"type": "dense", "in": flat, "out": state_dim},
        ],
        # no transposed convolution in the layer set: the decoder is dense
        "decoder": [
            {"type": "dense", "in": state_dim, "out": 128},
            {"type": "activation", "fn": "relu"},
            {"type": "dense", "in": 128, "out": pixels},
        ],
        "inverse": [
            {"type": "dense", "in": 2 * state_dim, "out": 64},
            {"type": "activation", "fn": "relu"},
            {"type": "dense", "in": 64, "out": N_ACTIONS},
        ],
    }


class SrlModel:
    """Encoder, decoder and inverse head, plus a fixed output standardisation.

    ``state_mean``/``state_std`` are measured on the training frames after
    fitting; ``encode`` returns standardised states.
    """

    def __init__(self, spec: dict, seed: int = 0):
        self.spec = spec
        self.obs_shape = tuple(spec["obs_shape"])
        self.state_dim = int(spec["state_dim"])
        self.encoder = Network(spec["encoder"], self.obs_shape, seed=[seed, 0])
        self.decoder = Network(spec["decoder"], (self.state_dim,), seed=[seed, 1])
        self.inverse = Network(spec["inverse"], (2 * self.state_dim,), seed=[seed, 2])
        if self.encoder.output_shape != (self.state_dim,):
            raise ConfigError("encoder output does not match state_dim")
        if self.decoder.output_shape != (int(np.prod(self.obs_shape)),):
            raise ConfigError("decoder output does not match observation size")
        self.state_mean = np.zeros(self.state_dim)
        self.state_std = np.ones(self.state_dim)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters() + self.inverse.parameters()

    def gradients(self):
        return self.encoder.gradients() + self.decoder.gradients() + self.inverse.gradients()

    def zero_grad(self):
        for net in (self.encoder, self.decoder, self.inverse):
            net.zero_grad()

    def raw_encode(self, frames: np.ndarray, batch: int = 512) -> np.ndarray:
        frames = np.asarray(frames)
        out = [self.encoder.forward(to_float(frames[i : i + batch]), cache=False)
               for i in range(0, frames.shape[0], batch)]
        return np.concatenate(out) if out else np.zeros((0, self.state_dim))

    def encode(self, observation: np.ndarray) -> np.ndarray:
        obs = np.asarray(observation)
        single = obs.shape == self.obs_shape
        if single:
            obs = obs[None]
        if obs.shape[1:] != self.obs_shape:
            raise ConfigError(f"observation shape {obs.shape[1:]} != {self.obs_shape}")
        s = (self.raw_encode(obs) - self.state_mean) / self.state_std
        return s[0] if single else s

    __call__ = encode

    def predict_action(self, obs_t, obs_next) -> np.ndarray:
        s = np.concatenate([self.raw_encode(obs_t), self.raw_encode(obs_next)], axis=1)
        return softmax(self.inverse.forward(s, cache=False))

    def size_bytes(self) -> int:
        return 8 * sum(p.size for p in self.parameters())

    def save(self, path, meta=None):
        m = {"spec": self.spec}
        m.update(meta or {})
        return container.save_bundle(
            path, {"encoder": self.encoder, "decoder": self.decoder, "inverse": self.inverse},
            "srl_model", arrays={"state_mean": self.state_mean, "state_std": self.state_std}, meta=m)

    @classmethod
    def load(cls, path) -> "SrlModel":
        header, nets, extra = container.load_bundle(path)
        if header["kind"] != "srl_model":
            raise container.ContainerError(f"expected srl_model, got {header['kind']!r}")
        model = cls.__new__(cls)
        model.spec = header["meta"]["spec"]
        model.obs_shape = tuple(model.spec["obs_shape"])
        model.state_dim = int(model.spec["state_dim"])
        model.encoder, model.decoder, model.inverse = nets["encoder"], nets["decoder"], nets["inverse"]
        model.state_mean, model.state_std = extra["state_mean"], extra["state_std"]
        return model


def encode(model: SrlModel, observation: np.ndarray) -> np.ndarray:
    return model.encode(observation)


@dataclass
class SrlHistory:
    total: list = field(default_factory=list)
    reconstruction: list = field(default_factory=list)
    inverse: list = field(default_factory=list)


def srl_loss_and_grads(model: SrlModel, obs_t: np.ndarray, obs_n: np.ndarray, actions: np.ndarray,
                       w_rec: float = 1.0, w_inv: float = 1.0):
    """Joint loss on one minibatch; accumulates gradients into the model."""
    b = obs_t.shape[0]
    x = np.concatenate([obs_t, obs_n])
    s = model.encoder.forward(x)
    recon = model.decoder.forward(s)
    rec_loss, g_rec = mse(recon, x.reshape(2 * b, -1))
    logits = model.inverse.forward(np.concatenate([s[:b], s[b:]], axis=1))
    inv_loss, g_logits = cross_entropy(softmax(logits), actions)
    gs = model.decoder.backward(w_rec * g_rec, need_input_grad=True)
    g_pair = model.inverse.backward(w_inv * g_logits, need_input_grad=True)
    gs = gs + np.concatenate([g_pair[:, : model.state_dim], g_pair[:, model.state_dim :]])
    model.encoder.backward(gs)
    total = w_rec * rec_loss + w_inv * inv_loss
    return total, rec_loss, inv_loss


def train_srl(dataset: SrlDataset, model_spec: dict | None = None, epochs: int = 20,
              loss_weights=(1.0, 1.0), seed: int = 0, batch_size: int = 64, lr: float = 1e-3):
    """Minibatch Adam on ``w_rec * MSE + w_inv * CE``; returns ``(model, history)``.

    History holds per-epoch means of the total, reconstruction and inverse
    losses.
    """
    if dataset.size < 1:
        raise ConfigError("empty SRL dataset")
    if model_spec is None:
        model_spec = default_model_spec(dataset.frames.shape[1:])
    model = SrlModel(model_spec, seed=seed)
    w_rec, w_inv = loss_weights
    opt = Adam(model.parameters(), lr=lr)
    rng = make_rng([seed, 3])
    hist = SrlHistory()
    n = dataset.size
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            model.zero_grad()
            tot, rec, inv = srl_loss_and_grads(
                model, to_float(dataset.frames[dataset.obs_index[idx]]),
                to_float(dataset.frames[dataset.next_index[idx]]), dataset.actions[idx], w_rec, w_inv)
            if not np.isfinite(tot):
                raise TrainingDiverged(f"SRL loss became {tot} at epoch {epoch}, batch starting {start} "
                                       f"(reconstruction={rec}, inverse={inv}); lower the learning rate")
            opt.step(model.gradients())
            sums += np.array([tot, rec, inv]) * len(idx)
        sums /= n
        hist.total.append(float(sums[0]))
        hist.reconstruction.append(float(sums[1]))
        hist.inverse.append(float(sums[2]))
        log.info("srl epoch %d: total %.4f rec %.5f inv %.4f", epoch, *sums)
    model.encoder.clear_cache()
    model.decoder.clear_cache()
    model.inverse.clear_cache()
    states = model.raw_encode(dataset.frames)
    model.state_mean = states.mean(axis=0)
    model.state_std = states.std(axis=0) + 1e-8
    return model, hist


def inverse_accuracy(model: SrlModel, dataset: SrlDataset) -> float:
    probs = model.predict_action(dataset.frames[dataset.obs_index], dataset.frames[dataset.next_index])
    return float(np.mean(np.argmax(probs, axis=1) == dataset.actions))
