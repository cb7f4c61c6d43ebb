import numpy as np
import pytest

from discorl.arena import ArenaConfig, initial_state, render
from discorl.srl import (SrlDataset, SrlModel, TrainingDiverged, collect_random_dataset, default_model_spec,
                         encode, inverse_accuracy, train_srl)


def test_single_transition(small_cfg):
    ds = collect_random_dataset(small_cfg, 1, seed=0)
    assert ds.size == 1 and ds.actions[0] in range(4)
    o, a, o2 = ds.transition(0)
    assert o.shape == o2.shape == small_cfg.obs_shape


def test_n_samples_must_be_positive(small_cfg):
    from discorl.nn import ConfigError
    with pytest.raises(ConfigError):
        collect_random_dataset(small_cfg, 0, seed=0)


def test_dataset_bytes_deterministic(tmp_path, small_cfg):
    a = collect_random_dataset(small_cfg, 600, seed=3).save(tmp_path / "a.bin").read_bytes()
    b = collect_random_dataset(small_cfg, 600, seed=3).save(tmp_path / "b.bin").read_bytes()
    assert a == b


def test_action_histogram_uniform(small_cfg):
    ds = collect_random_dataset(small_cfg.replace(render_size=8, marker_half_size=0.5), 10_000, seed=1)
    counts = np.bincount(ds.actions, minlength=4)
    assert np.all(np.abs(counts - 2500) <= 0.05 * 2500)


def test_transitions_chain_and_span_episodes(small_cfg):
    cfg = small_cfg.replace(episode_len=30)
    ds = collect_random_dataset(cfg, 100, seed=2)
    assert len(np.unique(ds.episode)) == 4
    same = ds.episode[1:] == ds.episode[:-1]
    assert np.all(ds.next_index[:-1][same] == ds.obs_index[1:][same])
    assert np.all(ds.next_index[:-1][~same] != ds.obs_index[1:][~same])


def test_zero_epochs_returns_initial_model(small_cfg):
    ds = collect_random_dataset(small_cfg, 20, seed=0)
    model, hist = train_srl(ds, epochs=0, seed=4)
    fresh = SrlModel(default_model_spec(small_cfg.obs_shape), seed=4)
    assert hist.total == []
    np.testing.assert_array_equal(model.encoder.get_flat(), fresh.encoder.get_flat())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_joint_loss_decreases(small_cfg, seed):
    ds = collect_random_dataset(small_cfg, 500, seed=seed)
    _, hist = train_srl(ds, epochs=4, seed=seed)
    assert len(hist.total) == 4 and hist.total[-1] < hist.total[0]
    np.testing.assert_allclose(hist.total, np.array(hist.reconstruction) + np.array(hist.inverse))


def test_inverse_head_beats_chance_on_held_out(small_cfg):
    train = collect_random_dataset(small_cfg, 3000, seed=0)
    held = collect_random_dataset(small_cfg, 1000, seed=99)
    model, _ = train_srl(train, epochs=12, seed=0)
    assert inverse_accuracy(model, held) > 0.25


def test_encode_properties(small_cfg):
    model = SrlModel(default_model_spec(small_cfg.obs_shape, state_dim=16), seed=0)
    a = render(initial_state((-0.9, -0.9), small_cfg), small_cfg)
    b = render(initial_state((0.9, 0.9), small_cfg), small_cfg)
    before = model.encoder.get_flat().copy()
    s1, s2 = encode(model, a), encode(model, a)
    assert s1.shape == (16,) and np.array_equal(s1, s2)
    assert np.linalg.norm(encode(model, b) - s1) > 0
    assert np.array_equal(model.encoder.get_flat(), before)
    assert all(layer._cache is None for layer in model.encoder.layers)
    with pytest.raises(Exception):
        encode(model, np.zeros((8, 8, 3)))


def test_model_roundtrip(tmp_path, small_cfg):
    ds = collect_random_dataset(small_cfg, 50, seed=0)
    model, _ = train_srl(ds, epochs=1, seed=0)
    model.save(tmp_path / "m.bin")
    back = SrlModel.load(tmp_path / "m.bin")
    np.testing.assert_array_equal(back.encode(ds.frames[:5]), model.encode(ds.frames[:5]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(small_cfg):
    ds = collect_random_dataset(small_cfg, 200, seed=0)
    with pytest.raises(TrainingDiverged, match="lower the learning rate"):
        train_srl(ds, epochs=5, seed=0, lr=1e150)


def test_dataset_roundtrip(tmp_path, small_cfg):
    ds = collect_random_dataset(small_cfg, 40, seed=5)
    ds.save(tmp_path / "d.bin")
    back = SrlDataset.load(tmp_path / "d.bin")
    assert back.frames.dtype == np.uint8
    np.testing.assert_array_equal(back.frames, ds.frames)
    np.testing.assert_array_equal(back.actions, ds.actions)
