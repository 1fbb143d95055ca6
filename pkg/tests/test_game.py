import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marlprune.game import (LayerRecord, RewardConfig, Trajectory, compute_gamma, compute_rewards, dump_csv, gae,
                            layer_rewards, normalize_advantages)

import oracles


def record(layer, tokens, actions, values=None):
    tokens = np.asarray(tokens)
    actions = np.asarray(actions)
    return LayerRecord(layer, tokens, np.zeros((len(tokens), 2)), np.zeros(2), actions, np.zeros(len(tokens)),
                       np.zeros(len(tokens)) if values is None else np.asarray(values, float),
                       int(actions.sum()))


def test_compute_gamma():
    assert compute_gamma([0.1, 2.0], 1) == 1
    assert compute_gamma([2.0, 0.1], 1) == 0
    assert compute_gamma([1.0, 1.0], 0) == 1


def test_reward_examples_all_agents():
    cfg = RewardConfig(1.0, 1.0, "all_agents")
    np.testing.assert_array_equal(layer_rewards([1, 0], 4, 1, cfg), [-0.75, 0.25])
    np.testing.assert_array_equal(layer_rewards([1, 0], 4, 0, cfg), [-1.0, 0.0])
    np.testing.assert_array_equal(layer_rewards([0, 0], 0, 1, cfg), [0.0, 0.0])


def test_reward_preserved_only_scope():
    cfg = RewardConfig(1.0, 1.0, "preserved_only")
    np.testing.assert_array_equal(layer_rewards([1, 0], 4, 1, cfg), [-0.75, 0.0])


def test_reward_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(0.0, 0.0)
    with pytest.raises(ValueError):
        RewardConfig(1.0, 1.0, "everyone")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["all_agents", "preserved_only"]))
def test_rewards_match_direct_formula(seed, scope):
    rng = np.random.default_rng(seed)
    alpha, beta = rng.uniform(0, 3, size=2)
    cfg = RewardConfig(alpha, beta, scope)
    n_tok = int(rng.integers(1, 12))
    tokens = np.arange(1, n_tok + 1)
    tr = Trajectory(0, gamma_correct=int(rng.integers(2)))
    for layer in range(int(rng.integers(1, 4))):
        actions = rng.integers(0, 2, size=len(tokens))
        tr.layers.append(record(layer + 1, tokens, actions))
        tokens = tokens[actions == 1]
        if not len(tokens):
            break
    compute_rewards(tr, cfg)
    for li, rec in enumerate(tr.layers):
        n = rec.n_kept
        for a, r, done in zip(rec.actions, rec.rewards, rec.dones):
            r1 = 0.0 if a == 0 else -1.0
            r2 = 0.0 if n == 0 else tr.gamma_correct / n
            if scope == "preserved_only" and a == 0:
                r2 = 0.0
            assert abs(r - (alpha * r1 + beta * r2)) < 1e-12
            assert done == (a == 0 or li == len(tr.layers) - 1)
        assert int((rec.actions == 1).sum()) == rec.n_kept


def test_reward_recomputation_is_bit_exact():
    tr = Trajectory(0, [record(1, [1, 2, 3], [1, 0, 1]), record(2, [1, 3], [0, 1])], gamma_correct=1)
    cfg = RewardConfig(0.3, 1.0)
    first = [r.rewards.copy() for r in compute_rewards(tr, cfg).layers]
    second = [r.rewards for r in compute_rewards(tr, cfg).layers]
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()


def test_rewards_need_gamma():
    with pytest.raises(ValueError):
        compute_rewards(Trajectory(0, [record(1, [1], [1])]), RewardConfig())


# -- GAE --------------------------------------------------------------------

def test_gae_one_step_terminal():
    tr = Trajectory(0, [record(1, [1], [0], values=[0.4])], gamma_correct=1)
    compute_rewards(tr, RewardConfig(1.0, 1.0))
    gae(tr)
    r = tr.layers[0].rewards[0]
    assert tr.layers[0].advantages[0] == pytest.approx(r - 0.4, abs=1e-15)
    assert tr.layers[0].returns[0] == pytest.approx(r, abs=1e-15)


def test_gae_two_steps_telescoping():
    tr = Trajectory(0, [record(1, [1], [1], values=[0.3]), record(2, [1], [1], values=[0.8])], gamma_correct=1)
    compute_rewards(tr, RewardConfig(1.0, 1.0))
    gae(tr, 1.0, 1.0)
    r1, r2 = tr.layers[0].rewards[0], tr.layers[1].rewards[0]
    d1, d2 = r1 + 0.8 - 0.3, r2 - 0.8
    assert tr.layers[0].advantages[0] == pytest.approx(d1 + d2, abs=1e-14)


def random_trajectory(rng, n_layers, n_tokens):
    tokens = np.arange(1, n_tokens + 1)
    tr = Trajectory(0, gamma_correct=int(rng.integers(2)))
    for layer in range(n_layers):
        actions = rng.integers(0, 2, size=len(tokens))
        tr.layers.append(record(layer + 1, tokens, actions, values=rng.normal(size=len(tokens))))
        tokens = tokens[actions == 1]
    return tr


def episodes(tr):
    """Per token: chronological (reward, value, done, advantage) tuples."""
    out = {}
    for rec in tr.layers:
        for j, t in enumerate(rec.tokens):
            out.setdefault(int(t), []).append((rec.rewards[j], rec.values[j], bool(rec.dones[j]), rec.advantages[j]))
    return out


@pytest.mark.parametrize("lam", [0.95, 0.0, 1.0])
def test_gae_matches_nested_sums(lam):
    rng = np.random.default_rng(int(lam * 100))
    for _ in range(200):
        tr = random_trajectory(rng, int(rng.integers(1, 6)), int(rng.integers(1, 8)))
        compute_rewards(tr, RewardConfig(*rng.uniform(0.1, 2, size=2)))
        gae(tr, 0.99, lam)
        for steps in episodes(tr).values():
            r, v, d, a = map(list, zip(*steps))
            np.testing.assert_allclose(a, oracles.gae_nested(r, v, d, 0.99, lam), atol=1e-10)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    tr = random_trajectory(rng, 3, 6)
    compute_rewards(tr, RewardConfig())
    gae(tr, 0.99, 0.0)
    for steps in episodes(tr).values():
        for t, (r, v, d, a) in enumerate(steps):
            nxt = steps[t + 1][1] if t + 1 < len(steps) and not d else 0.0
            assert abs(a - (r + 0.99 * nxt - v)) < 1e-12


# -- normalization ------------------------------------------------------------

def test_normalize_examples():
    np.testing.assert_allclose(normalize_advantages([1.0, 3.0]), [-1.0, 1.0], atol=1e-7)
    np.testing.assert_allclose(normalize_advantages([2.0, 2.0, 2.0]), 0.0, atol=1e-12)
    np.testing.assert_array_equal(normalize_advantages([5.0]), [5.0])


def test_normalize_random_batch():
    a = normalize_advantages(np.random.default_rng(0).normal(3.0, 7.0, size=500))
    assert abs(a.mean()) < 1e-9
    assert 1 - 1e-6 <= a.std() <= 1 + 1e-6


def test_agent_steps_and_dump(tmp_path):
    rng = np.random.default_rng(3)
    tr = random_trajectory(rng, 2, 4)
    compute_rewards(tr, RewardConfig())
    gae(tr)
    steps = list(tr.agent_steps())
    assert len(steps) == tr.num_agents
    assert all(s.done == (s.action == 0 or s.layer_index == 2) for s in steps)
    path = tmp_path / "traj.csv"
    dump_csv([tr], path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["image_id", "layer", "token", "action", "reward", "value", "advantage"]
    assert len(rows) == 1 + len(steps)
    assert float(rows[1][4]) == steps[0].reward
