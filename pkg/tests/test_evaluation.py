import itertools

import numpy as np
import pytest

from echolocate.agent import OraclePolicy, QPolicy, RandomPolicy
from echolocate.errors import ConfigurationError
from echolocate.evaluation import EvalConfig, evaluate, policy_field, soft_reward
from echolocate.qnet import init_params


def test_oracle_is_perfect(small_world):
    r = evaluate(small_world, OraclePolicy, EvalConfig(n_trials=200))
    assert r.accuracy == 1.0 and r.reachability == 1.0
    for t in r.trials:
        d0 = np.linalg.norm(np.subtract(t.agent_start, t.source))
        # one r_plus, shaping telescopes to d0 - d_final with d_final inside the reach radius
        assert 1.0 + 0.1 * (d0 - 0.6) - 1e-9 <= t.total_reward <= 1.0 + 0.1 * d0 + 1e-9
        assert not t.clashed


def test_random_accuracy_matches_expected_oracle_fraction(small_world):
    seeds = itertools.count()
    r = evaluate(small_world, lambda: RandomPolicy(4, next(seeds)), EvalConfig(n_trials=2000, max_steps=0))
    p = np.array([len(t.optimal_actions) / 4 for t in r.trials])
    hits = sum(t.correct for t in r.trials)
    z = (hits - p.sum()) / np.sqrt(np.sum(p * (1 - p)))
    assert abs(z) < 4


def test_max_steps_zero_scores_first_action_only(small_world):
    r = evaluate(small_world, OraclePolicy, EvalConfig(n_trials=20, max_steps=0))
    assert r.accuracy == 1.0 and r.reachability == 0.0 and r.avg_total_reward == 0.0
    assert all(t.steps == 0 for t in r.trials)


def test_clash_ends_trial(small_world):
    # a constant "-x" policy eventually walks into the left wall
    class West(OraclePolicy):
        def act(self, state):
            return 1

    r = evaluate(small_world, West, EvalConfig(n_trials=30, max_steps=50))
    assert r.reachability == 0.0
    assert all(t.clashed for t in r.trials)
    assert all(t.steps <= 21 for t in r.trials)


def test_soft_reward_sign():
    assert soft_reward(3.0, 2.5) == pytest.approx(0.05)
    assert soft_reward(3.0, 2.5, sign="printed") == pytest.approx(-0.05)
    assert soft_reward(2.0, 2.0) == 0.0


def test_eval_deterministic_and_thread_invariant(small_world, tiny_arch):
    p = init_params(tiny_arch, 0)
    cfg = EvalConfig(n_trials=12, max_steps=4)
    a = evaluate(small_world, lambda: QPolicy(p, tiny_arch), cfg)
    b = evaluate(small_world, lambda: QPolicy(p, tiny_arch), cfg, threads=3)
    assert a.to_json() == b.to_json()


def test_eval_config_validation():
    with pytest.raises(ConfigurationError):
        EvalConfig(n_trials=0)
    with pytest.raises(ConfigurationError):
        EvalConfig(max_steps=-1)


def test_policy_field_grid_and_trajectory(small_world, tmp_path):
    f = policy_field(OraclePolicy, small_world, 2.5, (7.5, 2.5))
    assert len(f.cells) == 16
    assert f.fraction_reducing() == 1.0
    f.write_csv(tmp_path / "f.csv")
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0] == "x,y,action,dx,dy" and len(rows) == 17
    assert f.trajectory[0][:2] == [1.25, 8.75]
    assert f.trajectory_events[-1] == "found_new_source"
