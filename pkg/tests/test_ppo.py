import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discorl.arena import ArenaConfig
from discorl.nn import Adam, ConfigError, numerical_gradient, relative_error, softmax
from discorl.ppo import (ActorCritic, PPOConfig, RolloutBatch, Teacher, clipped_surrogate, collect_rollouts,
                         compute_gae, entropy_and_grad, ppo_policy_loss, ppo_update, train_teacher, value_loss)
from discorl.srl import SrlModel, default_model_spec


def gae_oracle(rewards, values, dones, last_values, gamma, lam):
    # direct sum of discounted TD errors up to the next episode end
    t_len, n = rewards.shape
    adv = np.zeros_like(rewards)
    for e in range(n):
        for t in range(t_len):
            total, coef = 0.0, 1.0
            for k in range(t, t_len):
                nv = last_values[e] if k == t_len - 1 else values[k + 1, e]
                delta = rewards[k, e] + gamma * nv * (1 - dones[k, e]) - values[k, e]
                total += coef * delta
                if dones[k, e]:
                    break
                coef *= gamma * lam
            adv[t, e] = total
    return adv


def test_gae_matches_direct_sum(rng):
    r, v = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    d = (rng.random((12, 3)) < 0.2).astype(float)
    last = rng.normal(size=3)
    adv, ret = compute_gae(r, v, d, last, 0.97, 0.9)
    np.testing.assert_allclose(adv, gae_oracle(r, v, d, last, 0.97, 0.9), atol=1e-12)
    np.testing.assert_allclose(ret, adv + v)


def test_gae_zero_for_consistent_constant_value():
    gamma, rew = 0.99, 0.5
    v = np.full((50, 2), rew / (1 - gamma))
    adv, _ = compute_gae(np.full((50, 2), rew), v, np.zeros((50, 2)), v[0], gamma, 0.95)
    np.testing.assert_allclose(adv, 0.0, atol=1e-10)


def test_surrogate_at_unit_ratio_is_mean_advantage(rng):
    lp = np.log(rng.random(30))
    adv = rng.normal(size=30)
    surr, grad, ratio = clipped_surrogate(lp, lp, adv, 0.2)
    assert surr == pytest.approx(adv.mean())
    np.testing.assert_allclose(ratio, 1.0)
    np.testing.assert_allclose(grad, adv / 30)


@given(st.floats(0.05, 3.0), st.floats(-2, 2).filter(lambda a: abs(a) > 1e-3))
def test_surrogate_gradient_masked_outside_trust_region(ratio, adv):
    eps = 0.2
    _, grad, _ = clipped_surrogate(np.array([np.log(ratio)]), np.array([0.0]), np.array([adv]), eps)
    clipped = (adv > 0 and ratio > 1 + eps) or (adv < 0 and ratio < 1 - eps)
    assert (grad[0] == 0.0) == clipped


def _avoid_kinks(ratio, eps):
    return np.all(np.abs(np.abs(ratio - 1) - eps) > 1e-3)


def test_policy_loss_gradient(rng):
    for trial in range(20):
        n = 6
        logits = rng.normal(size=(n, 4))
        acts = rng.integers(0, 4, n)
        lp_old = np.log(softmax(logits)[np.arange(n), acts]) + rng.normal(scale=0.3, size=n)
        adv = rng.normal(size=n)
        ratio = np.exp(np.log(softmax(logits)[np.arange(n), acts]) - lp_old)
        if not _avoid_kinks(ratio, 0.2):
            continue
        _, g, _ = ppo_policy_loss(logits, acts, lp_old, adv, 0.2, 0.05)
        num = numerical_gradient(lambda: ppo_policy_loss(logits, acts, lp_old, adv, 0.2, 0.05)[0], logits)
        assert relative_error(g, num) < 1e-4, trial


def test_entropy_gradient(rng):
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        h, g = entropy_and_grad(x)
        num = numerical_gradient(lambda: float(entropy_and_grad(x)[0].sum()), x)
        assert relative_error(g, num) < 1e-4
    assert entropy_and_grad(np.zeros((1, 4)))[0][0] == pytest.approx(np.log(4))


def test_value_loss_gradient(rng):
    for _ in range(20):
        v, r = rng.normal(size=7), rng.normal(size=7)
        _, g = value_loss(v, r, 0.5)
        num = numerical_gradient(lambda: value_loss(v, r, 0.5)[0], v)
        assert relative_error(g, num) < 1e-4


def test_zero_advantage_gives_only_entropy_gradient(rng):
    logits = rng.normal(size=(5, 4))
    acts = rng.integers(0, 4, 5)
    lp = np.log(softmax(logits)[np.arange(5), acts])
    _, g, _ = ppo_policy_loss(logits, acts, lp, np.zeros(5), 0.2, 0.0)
    np.testing.assert_array_equal(g, 0.0)


@pytest.fixture
def tiny_encoder(small_cfg):
    return SrlModel(default_model_spec(small_cfg.obs_shape, state_dim=8), seed=0)


def test_uniform_policy_samples_uniformly(small_cfg, tiny_encoder):
    pol = ActorCritic("encoded", (8,), seed=0)
    pol.pi.layers[-1].params["W"][:] = 0.0
    pol.pi.layers[-1].params["b"][:] = 0.0
    batch = collect_rollouts(small_cfg, tiny_encoder, pol, 10_000, seed=0, cfg=PPOConfig(n_envs=8))
    freq = np.bincount(batch.actions, minlength=4) / len(batch)
    assert len(batch) == 10_000
    assert np.all(np.abs(freq - 0.25) <= 0.03)


def test_rollouts_deterministic(small_cfg, tiny_encoder):
    pol = ActorCritic("encoded", (8,), seed=1)
    a = collect_rollouts(small_cfg, tiny_encoder, pol, 256, seed=5, cfg=PPOConfig(n_envs=4))
    b = collect_rollouts(small_cfg, tiny_encoder, pol, 256, seed=5, cfg=PPOConfig(n_envs=4))
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.advantages, b.advantages)


def test_two_state_bandit_learns_best_action():
    # state s in {0, 1} as a one-hot; action best[s] pays 1, the rest 0
    best = np.array([2, 1])
    pol = ActorCritic("encoded", (2,), seed=0, hidden=(16,))
    # 50 batches x 4 minibatches = 200 gradient updates
    cfg = PPOConfig(epochs=1, minibatch_size=64, lr=3e-3, entropy_coef=0.0)
    opt = Adam(pol.parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.integers(0, 2, 256)
        x = np.eye(2)[s]
        p = softmax(pol.logits(x))
        a = np.array([rng.choice(4, p=row) for row in p])
        r = (a == best[s]).astype(float)
        v = pol.value(x)
        batch = RolloutBatch(x, a, np.log(p[np.arange(256), a]), p, r, v, np.ones(256), r - v, r)
        ppo_update(pol, batch, opt, cfg, rng)
    assert np.array_equal(np.argmax(pol.logits(np.eye(2)), axis=1), best)
    assert softmax(pol.logits(np.eye(2)))[np.arange(2), best].min() > 0.9


def test_empty_batch_rejected():
    pol = ActorCritic("encoded", (2,), seed=0)
    empty = RolloutBatch(*(np.zeros((0, 2)) if i == 0 else np.zeros(0, dtype=int if i == 1 else float)
                           for i in range(9)))
    with pytest.raises(ConfigError):
        ppo_update(pol, empty, Adam(pol.parameters()), PPOConfig())


def test_zero_budget_returns_initial_policy(small_cfg, tiny_encoder):
    run = train_teacher(small_cfg, tiny_encoder, 0, seed=3)
    fresh = ActorCritic("encoded", (8,), seed=3)
    assert run.curve == [] and run.checkpoints == [] and run.update_stats == []
    x = np.random.default_rng(0).normal(size=(5, 8))
    np.testing.assert_array_equal(run.teacher.policy.logits(x), fresh.logits(x))


def test_checkpoint_count_and_initial_snapshot(small_cfg, tiny_encoder):
    cfg = small_cfg.replace(episode_len=5)
    ppo = PPOConfig(n_envs=8, rollout_steps=256, checkpoint_every=200, epochs=1)
    run = train_teacher(cfg, tiny_encoder, 3000, seed=0, cfg=ppo)
    episodes = run.curve[-1][1]
    assert len(run.checkpoints) == episodes // 200
    assert [c.episode for c in run.checkpoints] == [200 * (i + 1) for i in range(len(run.checkpoints))]
    x = np.random.default_rng(0).normal(size=(5, 8))
    assert not np.allclose(run.initial.policy.logits(x), run.teacher.policy.logits(x))
    np.testing.assert_array_equal(run.initial.policy.logits(x), ActorCritic("encoded", (8,), seed=0).logits(x))


def test_training_is_deterministic(small_cfg, tiny_encoder):
    ppo = PPOConfig(n_envs=4, rollout_steps=128, epochs=1)
    a = train_teacher(small_cfg, tiny_encoder, 256, seed=7, cfg=ppo)
    b = train_teacher(small_cfg, tiny_encoder, 256, seed=7, cfg=ppo)
    assert a.teacher.fingerprint() == b.teacher.fingerprint()


def test_bad_settings_rejected(small_cfg, tiny_encoder):
    with pytest.raises(ConfigError):
        train_teacher(small_cfg, tiny_encoder, 100, seed=0, cfg=PPOConfig(lr_schedule="cosine"))
    with pytest.raises(ConfigError):
        ActorCritic("pixels", (8,))
    with pytest.raises(ConfigError):
        Teacher(ActorCritic("encoded", (8,)), None)


def test_teacher_roundtrip(tmp_path, small_cfg, tiny_encoder):
    teacher = Teacher(ActorCritic("encoded", (8,), seed=2), tiny_encoder, "TR")
    teacher.save(tmp_path / "t.bin")
    back = Teacher.load(tmp_path / "t.bin")
    frames = np.random.default_rng(0).integers(0, 256, (6, 16, 16, 3)).astype(np.uint8)
    np.testing.assert_array_equal(back.action_probs(frames), teacher.action_probs(frames))
    assert back.task == "TR" and back.fingerprint() == teacher.fingerprint()
    np.testing.assert_allclose(teacher.action_probs(frames).sum(axis=1), 1.0)


def test_raw_pixel_teacher_runs(small_cfg):
    run = train_teacher(small_cfg, None, 64, seed=0, cfg=PPOConfig(n_envs=4, rollout_steps=64, epochs=1),
                        input_mode="raw_pixels")
    assert run.teacher.input_mode == "raw_pixels" and len(run.update_stats) == 1
