import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from discorl.arena import ArenaConfig
from discorl.evaluation import (EvalReport, RandomPolicy, eval_starts, evaluate, evaluate_oracle, normalize,
                                oracle_returns)


@pytest.mark.parametrize("task", ["TR", "TC", "TE"])
def test_oracle_scores_one_and_random_scores_low(task):
    cfg = ArenaConfig(task=task)
    rep = evaluate_oracle(cfg, 10, seed=0)
    assert rep.n_episodes == 10 and rep.mean == 1.0
    assert min(rep.oracle) > 100
    rnd = evaluate(RandomPolicy(0), cfg, 10, seed=0)
    assert rnd.mean < 0.3


def test_starts_are_seeded_and_inside():
    cfg = ArenaConfig(task="TC")
    a, b = eval_starts(cfg, 50, 3), eval_starts(cfg, 50, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, eval_starts(cfg, 50, 4))
    assert np.all(np.abs(a) <= cfg.arena_half_width)


def test_oracle_returns_ignore_domain_randomization():
    cfg = ArenaConfig(task="TR")
    starts = eval_starts(cfg, 4, 0)
    np.testing.assert_array_equal(oracle_returns(cfg, starts),
                                  oracle_returns(cfg.replace(domain_randomization=False), starts))


@given(arrays(np.float64, 8, elements=st.floats(-500, 500)), arrays(np.float64, 8, elements=st.floats(-500, 500)))
def test_normalize_is_a_clipped_ratio(raw, oracle):
    n = normalize(raw, oracle)
    assert np.all((n >= 0) & (n <= 1))
    pos = oracle > 0
    np.testing.assert_allclose(n[pos], np.clip(raw[pos] / oracle[pos], 0, 1))


def test_report_fields():
    rep = evaluate(RandomPolicy(1), ArenaConfig(task="TR"), 3, seed=2, name="rnd")
    assert isinstance(rep, EvalReport) and rep.policy == "rnd" and rep.task == "TR"
    d = rep.to_dict()
    assert len(d["raw"]) == len(d["normalized"]) == len(d["starts"]) == 3
    assert rep.min <= rep.mean <= rep.max
