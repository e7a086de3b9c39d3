import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pegsolve.errors import InputError, NoPathError, RefusalError
from pegsolve.game import (CAPTURE, ESCAPE, TIMEOUT, EvaderPlan, GameSpec, Rules, VecEpisodes,
                           make_plan, read_episodes, reset, rollout, step, write_episodes)
from pegsolve.graph import Graph, legal_actions, shortest_path_sample
from pegsolve.oracle import (exact_game_value, policy_table, solve_exact, uniform_prob_fn)


def stay(obs):
    return obs.pursuer_locs[obs.member_id]


# --- graph ------------------------------------------------------------------

def test_legal_actions_path_graph():
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    assert legal_actions(g, 1) == [0, 1, 2]
    assert legal_actions(g, 1, strict=True) == [0, 2]


def test_legal_actions_grid_interior():
    g = Graph.grid(10, 10)
    assert len(legal_actions(g, 55)) == 5


def test_legal_actions_isolated_node():
    g = Graph.from_edges(2, [])
    assert legal_actions(g, 1) == [1]


def test_graph_rejects_asymmetric_adjacency():
    with pytest.raises(InputError):
        Graph(2, ((1,), ()))


def test_graph_dict_round_trip():
    g = Graph.grid(3, 2)
    assert Graph.from_dict(g.to_dict()) == g


def test_path_sample_trivial(line5):
    assert shortest_path_sample(line5, 2, 2, np.random.default_rng(0)) == [2]


def test_path_sample_grid_corners():
    g = Graph.grid(10, 10)
    path = shortest_path_sample(g, 0, 99, np.random.default_rng(0))
    assert len(path) - 1 == 18
    for a, b in zip(path, path[1:]):
        assert b in g.adjacency[a]


def test_path_sample_disconnected():
    g = Graph.from_edges(4, [(0, 1), (2, 3)])
    with pytest.raises(NoPathError):
        shortest_path_sample(g, 0, 3, np.random.default_rng(0))


def test_path_sample_lengths_match_bfs():
    rng = np.random.default_rng(7)
    g = Graph.grid(7, 6)
    for _ in range(1000):
        s, d = rng.integers(g.node_count, size=2)
        path = shortest_path_sample(g, int(s), int(d), rng)
        assert len(path) - 1 == g.distance(int(s), int(d))
        assert path[0] == s and path[-1] == d
        assert all(b in g.adjacency[a] for a, b in zip(path, path[1:]))


def test_path_sample_is_uniform():
    # 3x3 grid corner to corner has C(4,2)=6 shortest paths
    g = Graph.grid(3, 3)
    rng = np.random.default_rng(8)
    counts = {}
    n = 12000
    for _ in range(n):
        p = tuple(shortest_path_sample(g, 0, 8, rng))
        counts[p] = counts.get(p, 0) + 1
    assert len(counts) == 6
    freq = np.array(list(counts.values())) / n
    assert np.all(np.abs(freq - 1 / 6) < 0.02)


# --- dynamics ---------------------------------------------------------------

def plan_on_line(exit_node=4):
    return EvaderPlan(exit_node, tuple(range(0, exit_node + 1)))


def test_reset_immediate_capture(line5):
    spec = GameSpec(line5, (4,), (0,), 0, 5)
    state = reset(spec, plan_on_line())
    assert state.terminal and state.cause == CAPTURE and state.t == 0
    rec = rollout(spec, plan_on_line(), stay)
    assert rec.rewards == [(1.0, -1.0)]


def test_reset_ordinary(line5):
    state = reset(GameSpec(line5, (4,), (3,), 0, 5), plan_on_line())
    assert not state.terminal and state.t == 0 and state.cause is None


def test_reset_rejects_foreign_plan(line5):
    spec = GameSpec(line5, (4,), (3,), 0, 5)
    with pytest.raises(InputError):
        reset(spec, EvaderPlan(4, (1, 2, 3, 4)))


def test_step_capture_on_next_node(line5):
    spec = GameSpec(line5, (4,), (1,), 0, 5)
    out = step(reset(spec, plan_on_line()), [1])
    assert out.state.cause == CAPTURE and (out.reward_p, out.reward_e) == (1.0, -1.0)


def test_step_escape():
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    spec = GameSpec(g, (1,), (2,), 0, 3)
    out = step(reset(spec, EvaderPlan(1, (0, 1))), [2])
    assert out.state.cause == ESCAPE and (out.reward_p, out.reward_e) == (-1.0, 1.0)


def test_step_timeout(line5):
    spec = GameSpec(line5, (4,), (4,), 0, 1)
    out = step(reset(spec, plan_on_line()), [4])
    assert out.state.cause == TIMEOUT and out.reward_p == 1.0 and out.state.t == 1


def test_step_illegal_action_names_member(line5):
    spec = GameSpec(GameSpec(line5, (4,), (3,), 0, 5).graph, (4,), (3, 2), 0, 5)
    with pytest.raises(InputError, match="member 1"):
        step(reset(spec, plan_on_line()), [3, 0])


def test_capture_beats_escape_by_default():
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    spec = GameSpec(g, (1,), (2,), 0, 3)
    plan = EvaderPlan(1, (0, 1))
    assert step(reset(spec, plan), [1]).state.cause == CAPTURE
    assert step(reset(spec, plan, Rules(capture_first=False)), [1]).state.cause == ESCAPE


def test_edge_swap_is_not_capture():
    g = Graph.from_edges(3, [(0, 1), (1, 2)])
    spec = GameSpec(g, (2,), (1,), 0, 5)
    out = step(reset(spec, EvaderPlan(2, (0, 1, 2))), [0])
    assert out.state.cause is None


def test_strict_neighbors_forbids_stay(line5):
    spec = GameSpec(line5, (4,), (3,), 0, 5)
    with pytest.raises(InputError):
        step(reset(spec, plan_on_line(), Rules(strict_neighbors=True)), [3])


def test_rollout_stay_policy_escape():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (0, 3)])
    spec = GameSpec(g, (2,), (3,), 0, 4)
    rec = rollout(spec, EvaderPlan(2, (0, 1, 2)), stay)
    assert rec.cause == ESCAPE and rec.length == 2


def test_rollout_guarding_exit_captures(line5):
    spec = GameSpec(line5, (4,), (4,), 0, 6)
    rec = rollout(spec, plan_on_line(), stay)
    # evader walks 0->1->2->3->4 and steps onto the guard at t=4
    assert rec.cause == CAPTURE and rec.length == 4 and rec.pursuer_return == 1.0


def test_rollout_short_horizon_timeout(line5):
    spec = GameSpec(line5, (3,), (4,), 0, 1)
    rec = rollout(spec, EvaderPlan(3, (0, 1, 2, 3)), stay)
    assert rec.cause == TIMEOUT and rec.length == 1


def test_episode_jsonl_round_trip(tmp_path, oracle_spec):
    rng = np.random.default_rng(0)
    recs = [rollout(oracle_spec, make_plan(oracle_spec, 2, rng), lambda o: [0.2] * 5, rng) for _ in range(3)]
    write_episodes(tmp_path / "ep.jsonl", recs)
    back = read_episodes(tmp_path / "ep.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]


@st.composite
def random_games(draw):
    n = draw(st.integers(4, 9))
    edges = [(i, i + 1) for i in range(n - 1)]
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=8))
    g = Graph.from_edges(n, edges + extra)
    ev = draw(st.integers(0, n - 1))
    others = [v for v in range(n) if v != ev]
    exits = draw(st.lists(st.sampled_from(others), min_size=1, max_size=3, unique=True))
    pursuers = draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=2))
    horizon = draw(st.integers(1, 8))
    return GameSpec(g, tuple(exits), tuple(pursuers), ev, horizon), draw(st.integers(0, 2**31))


@settings(max_examples=150, deadline=None)
@given(random_games())
def test_rollout_invariants(game):
    spec, seed = game
    rng = np.random.default_rng(seed)
    plan = make_plan(spec, spec.exits[rng.integers(len(spec.exits))], rng)
    rec = rollout(spec, plan, lambda o: np.ones(6), rng)
    assert rec.length <= spec.horizon
    assert all(rp + re == 0 for rp, re in rec.rewards)
    assert all(r == (0.0, 0.0) for r in rec.rewards[:-1])
    assert rec.rewards[-1][0] in (1.0, -1.0)
    assert rec.cause in (CAPTURE, ESCAPE, TIMEOUT)
    assert (rec.cause == ESCAPE) == (rec.pursuer_return == -1.0)


def test_vec_episodes_match_scalar_dynamics(oracle_spec):
    rng = np.random.default_rng(3)
    exits = rng.choice(oracle_spec.exits, 200)
    vec = VecEpisodes(oracle_spec, exits, np.random.default_rng(4))
    slot_rng = np.random.default_rng(5)
    history = []
    while len(vec.active()):
        idx = vec.active()
        mask = vec.legal_mask(idx)
        slots = np.array([[slot_rng.choice(np.nonzero(m)[0]) for m in row] for row in mask])
        history.append((idx, slots))
        vec.step(idx, slots)
    table = vec.table
    for b in range(vec.batch):
        path = tuple(int(v) for v in vec.paths[b, :vec.lengths[b]])
        state = reset(oracle_spec, EvaderPlan(int(exits[b]), path))
        for idx, slots in history:
            pos = np.nonzero(idx == b)[0]
            if not len(pos):
                continue
            acts = [int(table[loc, s]) for loc, s in zip(state.pursuer_locs, slots[pos[0]])]
            out = step(state, acts)
            state = out.state
        assert state.terminal
        assert state.cause == {1: CAPTURE, 2: ESCAPE, 3: TIMEOUT}[int(vec.cause[b])]
        assert out.reward_p == vec.reward[b]


# --- exact oracle -----------------------------------------------------------

def test_oracle_guard_on_sole_exit(line5):
    spec = GameSpec(line5, (4,), (4,), 0, 6)
    assert exact_game_value(spec, [1.0]) == 1.0


def test_oracle_evader_next_to_exit():
    g = Graph.from_edges(8, [(i, i + 1) for i in range(7)])
    spec = GameSpec(g, (1,), (7,), 0, 10)
    assert exact_game_value(spec, [1.0]) == -1.0


def test_oracle_refuses_large_games():
    g = Graph.grid(10, 10)
    spec = GameSpec(g, (99,), (5, 50, 95), 0, 18)
    with pytest.raises(RefusalError):
        exact_game_value(spec, [1.0])


def _simulate_table_policy(spec, sol, exit_probs, episodes, seed):
    rng = np.random.default_rng(seed)
    exits = rng.choice(spec.exits, episodes, p=exit_probs)
    vec = VecEpisodes(spec, exits, rng)
    a = vec.table.shape[1]
    v = spec.graph.node_count
    while len(vec.active()):
        idx = vec.active()
        joint = (vec.ploc[idx] * v ** np.arange(spec.n_pursuers)).sum(1)
        aidx = sol.best_joint[vec.eloc[idx], joint]
        slots = np.stack([(aidx // a ** m) % a for m in range(spec.n_pursuers)], axis=1)
        vec.step(idx, slots)
    return vec.reward


def test_oracle_matches_monte_carlo(oracle_spec):
    sigma = [0.5, 0.5]
    sol = solve_exact(oracle_spec, sigma)
    r = _simulate_table_policy(oracle_spec, sol, sigma, 100_000, 0)
    assert abs(r.mean() - sol.value) < 0.02


def test_fixed_policy_value_within_three_se(oracle_spec):
    sigma = [0.3, 0.7]
    exact = exact_game_value(oracle_spec, sigma, uniform_prob_fn)
    rng = np.random.default_rng(1)
    vec = VecEpisodes(oracle_spec, rng.choice(oracle_spec.exits, 40_000, p=sigma), rng)
    while len(vec.active()):
        idx = vec.active()
        mask = vec.legal_mask(idx)[:, 0]
        u = rng.random(len(idx))[:, None]
        cdf = np.cumsum(mask / mask.sum(1, keepdims=True), axis=1)
        vec.step(idx, (u > cdf).sum(1, keepdims=True))
    se = vec.reward.std() / np.sqrt(vec.batch)
    assert abs(vec.reward.mean() - exact) < 3 * se


def test_optimal_value_dominates_fixed_policies(oracle_spec):
    for sigma in ([1.0, 0.0], [0.5, 0.5], [0.0, 1.0]):
        opt = exact_game_value(oracle_spec, sigma)
        assert opt >= exact_game_value(oracle_spec, sigma, uniform_prob_fn) - 1e-12


def test_oracle_value_against_mixed_evader_is_zero(oracle_spec):
    # one pursuer cannot cover both corner exits against a coin-flipping evader
    assert exact_game_value(oracle_spec, [0.5, 0.5]) == pytest.approx(0.0, abs=1e-12)
    assert exact_game_value(oracle_spec, [1.0, 0.0]) == pytest.approx(1.0)


def test_policy_table_shape(oracle_spec):
    tab = policy_table(oracle_spec, uniform_prob_fn)
    v = oracle_spec.graph.node_count
    assert tab.shape == (v, v, 1, oracle_spec.graph.action_table().shape[1])


def test_exhaustive_pure_policies_never_beat_oracle():
    # brute force over every open-loop move sequence for a tiny line game
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    spec = GameSpec(g, (3,), (1,), 0, 4)
    best = -1.0
    for seq in itertools.product(range(3), repeat=3):
        state = reset(spec, EvaderPlan(3, (0, 1, 2, 3)))
        reward = 0.0
        for s in seq:
            if state.terminal:
                break
            legal = legal_actions(g, state.pursuer_locs[0])
            out = step(state, [legal[min(s, len(legal) - 1)]])
            state, reward = out.state, out.reward_p
        best = max(best, reward)
    assert exact_game_value(spec, [1.0]) == best == 1.0
