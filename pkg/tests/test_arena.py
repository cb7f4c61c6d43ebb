import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from discorl.arena import (Arena, ArenaConfig, ArenaState, TCParams, TEParams, VecArena, chaser_policy,
                           grid_positions, initial_state, render, reset, reward_tc, reward_te, reward_tr, step,
                           transition, write_trace_csv, record_episode, dump_observations, MARKER_COLORS)
from discorl.nn import ConfigError, UsageError, make_rng
from discorl import container


def ring_reward_scalar(x, y, px, py, bumped, lam=10.0, r=0.5):
    """Plain-float evaluation of the circling reward."""
    norm = math.sqrt(x * x + y * y)
    disp = (x - px) ** 2 + (y - py) ** 2
    return lam * (1.0 - lam * (norm - r) ** 2) * disp + lam * lam * (-1.0 if bumped else 0.0)


def _state(pos, past=None, bumped=False, cfg=ArenaConfig(task="TC")):
    s = initial_state(pos, cfg)
    if past is not None:
        s.position_history[0] = past
    s.bumped = np.array(bumped)
    return s


def test_ring_reward_worked_examples():
    cfg = ArenaConfig(task="TC")
    z = np.array([0.5, 0.0])
    assert reward_tc(_state(z, z), cfg) == 0.0
    past = z - np.array([0.0, 0.2])  # |dz|^2 = 0.04
    assert reward_tc(_state(z, past), cfg) == pytest.approx(0.4, abs=1e-12)
    assert reward_tc(_state(z, past, bumped=True), cfg) == pytest.approx(-99.6, abs=1e-12)


def test_ring_reward_matches_scalar_oracle_exactly():
    cfg = ArenaConfig(task="TC")
    rng = make_rng(2024)
    for _ in range(1000):
        x, y, px, py = rng.uniform(-1, 1, 4)
        b = bool(rng.integers(2))
        got = float(reward_tc(_state([x, y], [px, py], b), cfg))
        assert got == ring_reward_scalar(x, y, px, py, b)


def test_tr_rewards():
    cfg = ArenaConfig(task="TR")
    assert reward_tr(initial_state((0.6, 0.6), cfg), cfg) == 1.0
    assert reward_tr(initial_state((0.0, 0.0), cfg), cfg) == 0.0
    s = initial_state((1.0, 0.0), cfg)
    s.bumped = np.array(True)
    assert reward_tr(s, cfg) == -1.0
    s = initial_state((0.6, 0.6), cfg)
    s.bumped = np.array(True)
    assert reward_tr(s, cfg) == -1.0  # bump dominates


def test_te_rewards():
    cfg = ArenaConfig(task="TE")
    far = initial_state((0.0, 0.0), cfg, chaser_pos=(0.9, 0.0))
    assert reward_te(far, cfg) == 1.0
    near = initial_state((0.0, 0.0), cfg, chaser_pos=(0.2, 0.0))
    assert reward_te(near, cfg) == -1.0
    far.bumped = np.array(True)
    assert reward_te(far, cfg) == -1.0


def test_chaser_pursuit():
    cfg = ArenaConfig(task="TE", arena_half_width=4.0, render_size=128, te_params=TEParams(chaser_speed=0.5))
    np.testing.assert_allclose(chaser_policy((0.0, 0.0), (3.0, 0.0), cfg), [0.5, 0.0])
    np.testing.assert_array_equal(chaser_policy((1.0, 1.0), (1.0, 1.0), cfg), [1.0, 1.0])
    c, robot = np.array([-4.0, -4.0]), np.array([2.0, 1.0])
    d = np.linalg.norm(c - robot)
    for _ in range(50):
        c = chaser_policy(c, robot, cfg)
        nd = np.linalg.norm(c - robot)
        assert nd <= d + 1e-12
        d = nd


def test_step_moves_and_bumps():
    cfg = ArenaConfig(task="TR", domain_randomization=False)
    s = initial_state((0.0, 0.0), cfg)
    r = step(s, 1, cfg)
    assert s.robot_pos[0] == pytest.approx(0.1) and not r.info["bumped"]
    s = initial_state((1.0, 0.0), cfg)
    r = step(s, 1, cfg)
    assert s.robot_pos[0] == 1.0 and r.info["bumped"] and r.reward == -1.0


def test_episode_terminates_at_limit_and_refuses_more():
    env = Arena(ArenaConfig(task="TC"), seed=0)
    env.reset()
    rng = make_rng(0)
    n = 0
    while not env.done:
        env.step(int(rng.integers(4)))
        n += 1
    assert n == 250 and int(env.state.t) == 250
    with pytest.raises(UsageError):
        env.step(0)
    with pytest.raises(UsageError):
        transition(env.state, 0, env.config)


def test_contact_limit_only_when_set():
    cfg = ArenaConfig(task="TR", domain_randomization=False)
    s = initial_state((0.6, 0.6), cfg)
    for _ in range(12):
        res = step(s, 0 if _ % 2 == 0 else 1, cfg)
    assert not res.done
    lim = cfg.replace(contact_limit=10)
    s = initial_state((0.6, 0.6), lim)
    done_at = None
    for i in range(20):
        if step(s, 0 if i % 2 == 0 else 1, lim).done:
            done_at = i + 1
            break
    assert done_at is not None and int(s.contacts) == 10


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=120), st.floats(-1, 1), st.floats(-1, 1))
def test_clamping_and_bump_channel(actions, x, y):
    cfg = ArenaConfig(task="TR", domain_randomization=False)
    s = initial_state((x, y), cfg)
    for a in actions:
        before = s.robot_pos.copy()
        raw = before + 0.1 * np.array([[-1, 0], [1, 0], [0, 1], [0, -1]])[a]
        step(s, a, cfg)
        assert np.all(np.abs(s.robot_pos) <= 1.0)
        assert bool(s.bumped) == bool(np.any(np.abs(raw) > 1.0 + 1e-9))


def test_reset_determinism_and_coverage():
    cfg = ArenaConfig(task="TE")
    a, _ = reset(cfg, seed=5)
    b, _ = reset(cfg, seed=5)
    np.testing.assert_array_equal(a.robot_pos, b.robot_pos)
    np.testing.assert_array_equal(a.chaser_pos, cfg.te_params.chaser_start)
    rng = make_rng(0)
    quadrants = np.zeros(4)
    for _ in range(10_000):
        s, _ = reset(cfg, rng=rng)
        quadrants[int(s.robot_pos[0] > 0) * 2 + int(s.robot_pos[1] > 0)] += 1
    chi2 = float(((quadrants - 2500) ** 2 / 2500).sum())
    assert chi2 < 16.27  # 3 dof, p = 0.001


def test_render_properties():
    tr, tc = ArenaConfig(task="TR", domain_randomization=False), ArenaConfig(task="TC", domain_randomization=False)
    s = initial_state((-0.5, -0.5), tr)
    o1, o2 = render(s, tr), render(s.copy(), tr)
    assert o1.shape == (32, 32, 3) and np.array_equal(o1, o2)
    assert o1.min() >= 0 and o1.max() <= 1
    assert np.all(o1[0] == [1, 0, 0]) and np.all(o1[:, -1] == [1, 0, 0])
    otc = render(initial_state((-0.5, -0.5), tc), tc)
    diff = np.any(o1 != otc, axis=-1)
    marker_px = np.all(o1 == MARKER_COLORS["TR"], axis=-1) | np.all(otc == MARKER_COLORS["TC"], axis=-1)
    marker_px[[0, -1], :] = False
    marker_px[:, [0, -1]] = False
    assert diff.any() and np.all(marker_px[diff])
    # values are exact multiples of 1/255
    assert np.all(np.abs(o1 * 255 - np.rint(o1 * 255)) < 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["TR", "TC", "TE"]), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_marker_always_visible(task, x, y, cx, cy):
    cfg = ArenaConfig(task=task, domain_randomization=False)
    img = render(initial_state((x, y), cfg, chaser_pos=(cx, cy)), cfg)
    inner = img[1:-1, 1:-1]
    assert np.any(np.all(inner == MARKER_COLORS[task], axis=-1))


def test_domain_randomization_redraws_background():
    env = Arena(ArenaConfig(task="TR"), seed=1)
    env.reset()
    colors = {tuple(env.step(0).observation[5, 16]) for _ in range(20)}
    assert len(colors) > 10
    fixed = Arena(ArenaConfig(task="TR", domain_randomization=False), seed=1)
    fixed.reset()
    assert tuple(fixed.step(1).observation[5, 16]) == ArenaConfig().canonical_background


def test_grid_positions():
    cfg = ArenaConfig()
    g = grid_positions(cfg, 1.0)
    assert len(g) == 9 and set(map(tuple, g)) == {(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)}
    assert np.array_equal(g[:3, 1], [-1, -1, -1])  # row-major: y outer
    assert len(grid_positions(cfg, 0.25)) == 81
    assert len(grid_positions(cfg, 2.0)) == 1
    assert np.all(np.abs(grid_positions(cfg, 0.3)) <= 1.0)
    with pytest.raises(ConfigError):
        grid_positions(cfg, 0.0)


@pytest.mark.parametrize("kw", [dict(step_size=1.5), dict(tc_params=TCParams(r_circle=1.2)),
                                dict(tc_params=TCParams(k=0)), dict(te_params=TEParams(catch_range=0.0)),
                                dict(task="XX")])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        ArenaConfig(**kw)


def test_config_dict_roundtrip():
    cfg = ArenaConfig(task="TE", render_size=24, te_params=TEParams(chaser_speed=0.07))
    assert ArenaConfig.from_dict(cfg.to_dict()) == cfg


def test_vec_arena_matches_independent_arenas():
    cfg = ArenaConfig(task="TE")
    v = VecArena(cfg, 3, seed=9)
    obs = v.reset()
    w = VecArena(cfg, 5, seed=9)
    obs5 = w.reset()
    np.testing.assert_array_equal(obs, obs5[:3])
    for _ in range(30):
        a = np.array([0, 1, 2])
        o3, r3, *_ = v.step(a)
        o5, r5, *_ = w.step(np.r_[a, 3, 3])
        np.testing.assert_array_equal(o3, o5[:3])
        np.testing.assert_array_equal(r3, r5[:3])


def test_trace_and_dump_exports(tmp_path):
    cfg = ArenaConfig(task="TC")
    rows, frames = record_episode(cfg, lambda obs: 1, seed=0)
    assert len(frames) == 251
    path = write_trace_csv(tmp_path / "trace.csv", rows, "TC")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,y,action,reward,bumped,task" and len(lines) == 251
    frames = np.stack([render(initial_state((0, 0), cfg), cfg)] * 2)
    dump_observations(tmp_path / "obs.bin", frames)
    header, arrays = container.load(tmp_path / "obs.bin")
    assert header["kind"] == "observations"
