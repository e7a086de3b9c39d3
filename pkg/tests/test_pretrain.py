import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pegsolve.errors import ConfigurationError, InputError, TrainingError
from pegsolve.game import EvaderPlan, GameSpec, GameState, make_plan, reset
from pegsolve.graph import Graph, legal_actions
from pegsolve.instances import InstanceConfig, MapTemplate, build_dataset
from pegsolve.model import ModelConfig, PursuerModel
from pegsolve.ppo import ModelLearner, PPOConfig, guidance_term, hmp_loss, ppo_update
from pegsolve.pretrain import (PretrainConfig, mt_baseline_pretrain, pretrain, reference_policy,
                               sample_evader_policy)
from pegsolve.rollout import collect, gae, normalize, sample_slots

D = torch.float64
TINY = dict(d_hidden=8, d_loc=4, d_id=2, d_time=2, actor_hidden=(16,), hyper_hidden=16, critic_hidden=(16,))


# --- evader policy sampling -------------------------------------------------

def test_single_exit_policy(line5):
    assert sample_evader_policy(GameSpec(line5, (4,), (3,), 0, 5), np.random.default_rng(0)).tolist() == [1.0]


def test_dirichlet_moments(oracle_spec):
    spec = GameSpec(Graph.grid(4, 4), (3, 12, 15), (5,), 0, 6)
    rng = np.random.default_rng(0)
    draws = np.array([sample_evader_policy(spec, rng) for _ in range(10_000)])
    assert np.abs(draws.sum(1) - 1).max() < 1e-12
    assert np.abs(draws.mean(0) - 1 / 3).max() < 0.02
    # flat Dirichlet(1,1,1): Var = (1/3)(2/3)/4
    assert np.abs(draws.var(0) - 2 / 36).max() < 0.01


# --- reference policy -------------------------------------------------------

def test_reference_intercept_stays(line5):
    spec = GameSpec(line5, (4,), (3,), 0, 8)
    plan = EvaderPlan(4, (0, 1, 2, 3, 4))
    state = GameState(2, (3,), 2, (2, 3, 4), spec=spec)
    assert reference_policy(spec, plan, state) == [3]


def test_reference_falls_back_to_exit():
    g = Graph.from_edges(10, [(i, i + 1) for i in range(9)])
    spec = GameSpec(g, (3,), (9,), 0, 20)
    plan = EvaderPlan(3, (0, 1, 2, 3))
    state = reset(spec, plan)
    # pursuer 6 hops from the exit cannot intercept; it heads for the exit anyway
    assert reference_policy(spec, plan, state) == [8]


def test_reference_colocated_stays():
    g = Graph.grid(3, 3)
    spec = GameSpec(g, (8,), (4,), 0, 6)
    plan = EvaderPlan(8, (0, 1, 4, 5, 8))
    state = GameState(2, (4,), 4, (4, 5, 8), spec=spec)
    assert reference_policy(spec, plan, state) == [4]


def test_reference_terminal_state_rejected(line5):
    spec = GameSpec(line5, (4,), (0,), 0, 5)
    plan = EvaderPlan(4, (0, 1, 2, 3, 4))
    with pytest.raises(InputError):
        reference_policy(spec, plan, reset(spec, plan))


def _target(spec, plan, state, p):
    d = spec.graph.distances
    remaining = plan.path[state.t:]
    for off, w in enumerate(remaining):
        if d[p, w] <= off:
            return w, off
    return plan.chosen_exit, None


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31))
def test_interception_soundness(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 14))
    edges = [(i, i + 1) for i in range(n - 1)] + [tuple(rng.integers(n, size=2)) for _ in range(n // 2)]
    g = Graph.from_edges(n, edges)
    ev = int(rng.integers(n))
    exit_node = int(rng.choice([v for v in range(n) if v != ev]))
    spec = GameSpec(g, (exit_node,), tuple(int(v) for v in rng.integers(n, size=2)), ev, 2 * n)
    plan = make_plan(spec, exit_node, rng)
    t = int(rng.integers(len(plan.path) - 1))
    ploc = tuple(int(v) for v in rng.integers(n, size=2))
    state = GameState(t, ploc, plan.path[t], plan.path[t:], spec=spec)
    refs = reference_policy(spec, plan, state)
    d = g.distances
    for p, a in zip(ploc, refs):
        assert a in legal_actions(g, p)
        w, off = _target(spec, plan, state, p)
        assert d[a, w] == max(d[p, w] - 1, 0)
        if off is not None:
            # walking a shortest path to w arrives by the evader's arrival time
            pos, steps = p, 0
            while pos != w:
                pos = min(u for u in legal_actions(g, pos) if d[u, w] == d[pos, w] - 1)
                steps += 1
            assert steps <= off


# --- GAE / normalisation -----------------------------------------------------

def test_gae_lambda_one_is_reward_to_go_minus_value():
    rewards = np.array([0.0, 0.0, 1.0, 0.0, -1.0])
    values = np.array([0.3, -0.2, 0.5, 0.1, 0.0])
    dones = np.array([False, False, True, False, True])
    episodes = np.array([0, 0, 0, 1, 1])
    adv, ret = gae(rewards, values, dones, episodes, gamma=1.0, lam=1.0)
    rtg = np.array([1.0, 1.0, 1.0, -1.0, -1.0])
    assert np.allclose(adv, rtg - values) and np.allclose(ret, rtg)


def test_gae_interleaved_rows():
    # step rows of two episodes interleaved, as the vectorized collector produces them
    rewards = np.array([0.0, 0.0, 1.0, -1.0])
    values = np.zeros(4)
    dones = np.array([False, False, True, True])
    episodes = np.array([0, 1, 0, 1])
    adv, _ = gae(rewards, values, dones, episodes, gamma=0.5, lam=1.0)
    assert np.allclose(adv, [0.5, -0.5, 1.0, -1.0])


def test_normalize_guards():
    assert normalize(np.array([2.0])).tolist() == [0.0]
    out = normalize(np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(out.mean()) < 1e-12 and abs(out.std() - 1) < 1e-6
    assert normalize(np.array([5.0, 5.0])).tolist() == [0.0, 0.0]


def test_sample_slots_respects_zero_mass():
    rng = np.random.default_rng(0)
    probs = np.array([[0.0, 0.5, 0.5, 0.0], [0.0, 0.0, 0.0, 1.0]] * 500)
    slots = sample_slots(probs, rng)
    assert set(slots[::2]) == {1, 2} and set(slots[1::2]) == {3}


# --- loss -------------------------------------------------------------------

def _loss_inputs(logits, mask):
    logp_all = torch.log_softmax(logits.masked_fill(~mask, float("-inf")), -1)
    return logp_all


def test_guidance_zero_for_one_hot_reference():
    logp = torch.log(torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=D))
    assert guidance_term(logp, [0, 1]).item() == 0.0


def test_guidance_uniform_four_actions():
    logp = torch.full((3, 4), -math.log(4), dtype=D)
    assert guidance_term(logp, [0, 3, 1]).item() == pytest.approx(1.3863, abs=1e-4)


def test_alpha_zero_equals_plain_loss():
    g = torch.Generator().manual_seed(0)
    mask = torch.ones(6, 4, dtype=torch.bool)
    logp_all = _loss_inputs(torch.randn(6, 4, dtype=D, generator=g), mask)
    args = (mask, np.arange(6) % 4, np.full(6, -1.3), np.linspace(-1, 1, 6),
            torch.randn(3, dtype=D, generator=g), np.ones(3), np.arange(6) % 4)
    zero, parts0 = hmp_loss(logp_all, *args, alpha=0.0)
    cfg = PPOConfig()
    assert zero.item() == pytest.approx(parts0["policy_loss"] - cfg.entropy_coef * parts0["entropy"]
                                        + cfg.value_coef * parts0["value_loss"], abs=1e-12)
    half, parts = hmp_loss(logp_all, *args, alpha=0.5)
    assert half.item() == pytest.approx(zero.item() + 0.5 * parts["guidance"], abs=1e-12)


def test_first_pass_ratio_is_one():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(5, 3, dtype=D, generator=g, requires_grad=True)
    mask = torch.ones(5, 3, dtype=torch.bool)
    logp_all = _loss_inputs(logits, mask)
    act = np.array([0, 1, 2, 1, 0])
    old = logp_all.detach().gather(1, torch.as_tensor(act)[:, None]).squeeze(1).numpy()
    adv = np.array([1.0, -0.5, 2.0, 0.3, -1.0])
    cfg = PPOConfig(entropy_coef=0.0, value_coef=0.0)
    total, _ = hmp_loss(logp_all, mask, act, old, adv, torch.zeros(0, dtype=D), np.zeros(0), act, 0.0, cfg)
    total.backward()
    surrogate_grad = logits.grad.clone()
    logits.grad = None
    # vanilla policy-gradient estimator: -mean(adv * log pi(a))
    lp = _loss_inputs(logits, mask).gather(1, torch.as_tensor(act)[:, None]).squeeze(1)
    (-(torch.as_tensor(adv) * lp).mean()).backward()
    assert torch.allclose(surrogate_grad, logits.grad, atol=1e-14)


def test_hmp_loss_rejects_bad_alpha():
    logp = torch.zeros(1, 2, dtype=D)
    with pytest.raises(ConfigurationError):
        hmp_loss(logp, np.ones((1, 2), bool), [0], [0.0], [0.0], torch.zeros(0), [], [0], 1.5)


# --- rollouts and updates -----------------------------------------------------

def _tiny_dataset(count=6, seed=0):
    return build_dataset(MapTemplate("grid", 4, 4, edge_keep_prob=0.9),
                         InstanceConfig(2, 2, (3, 5), 2, seed=seed), count)


def test_collect_shapes_and_reference_legality():
    ds = _tiny_dataset()
    model = PursuerModel(ModelConfig.for_specs(ds, **TINY))
    rng = np.random.default_rng(0)
    specs = list(ds)[:3]
    exits = [rng.choice(s.exits, 5) for s in specs]

    def uniform(g, ploc, eloc, member, t, mask):
        return mask / mask.sum(1, keepdims=True)

    batch = collect(specs, exits, uniform, rng, model.cfg.n_actions, with_reference=True)
    assert len(batch) == 2 * batch.n_steps
    assert len(batch.episode_returns) == 15
    assert batch.mask[np.arange(len(batch)), batch.ref_action].all()
    assert batch.mask[np.arange(len(batch)), batch.action].all()
    # one terminal step row per episode that did not end at t=0
    started = (batch.episode_returns != 0)
    assert batch.s_done.sum() <= started.sum()
    assert set(np.unique(batch.s_reward)) <= {-1.0, 0.0, 1.0}


def test_buffer_is_per_update():
    ds = _tiny_dataset()
    res = pretrain(ds, cfg=PretrainConfig(c1=2, c2=2, episodes_per_policy=2, episodes_total=24, seed=0),
                   model_cfg=TINY)
    assert [m["episode"] for m in res.metrics] == [8, 16, 24]


def test_pretrain_checkpoint_and_metrics(tmp_path):
    ds = _tiny_dataset()
    res = pretrain(ds, cfg=PretrainConfig(c1=2, c2=1, episodes_per_policy=4, episodes_total=16, seed=3),
                   model_cfg=TINY, out_dir=tmp_path)
    back, meta = PursuerModel.load(tmp_path / "model.ckpt")
    assert meta["episodes"] == 16 and meta["train_games"] == len(ds)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "update,episode,mean_return,guidance_loss,entropy,wall_clock"
    assert res.episodes == 16


def test_pretrain_keeps_gnn_frozen():
    ds = _tiny_dataset()
    model = PursuerModel(ModelConfig.for_specs(ds, **TINY))
    before = [p.detach().clone() for p in model.gnn.parameters()]
    pretrain(ds, model, PretrainConfig(c1=2, c2=1, episodes_per_policy=4, episodes_total=16))
    assert all(torch.equal(a, b) for a, b in zip(before, model.gnn.parameters()))


def test_pretrain_is_seed_deterministic():
    ds = _tiny_dataset()
    cfg = PretrainConfig(c1=2, c2=1, episodes_per_policy=4, episodes_total=16, seed=5)
    a = pretrain(ds, cfg=cfg, model_cfg=TINY)
    b = pretrain(ds, cfg=cfg, model_cfg=TINY)
    assert [m["mean_return"] for m in a.metrics] == [m["mean_return"] for m in b.metrics]
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)


def test_imitation_sanity_run():
    # A tree has unique shortest paths, so the reference move is a function of
    # the observation and alpha=1 can drive the cross-entropy to ~0.
    g = Graph.from_edges(10, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (3, 7), (7, 8), (8, 9)])
    spec = GameSpec(g, (6,), (9,), 0, 8)
    cfg = PretrainConfig(c1=1, c2=1, episodes_per_policy=16, alpha=1.0, episodes_total=16 * 200, seed=0)
    res = pretrain([spec], cfg=cfg, model_cfg=TINY)
    assert len(res.metrics) <= 500
    assert np.mean([m["guidance_loss"] for m in res.metrics[-10:]]) < 0.1


def test_mt_baselines():
    ds = _tiny_dataset()
    cfg = PretrainConfig(c1=2, c2=1, episodes_per_policy=2, episodes_total=8)
    plain = mt_baseline_pretrain(ds, cfg, np.random.default_rng(0), aug=False, model_cfg=TINY).model
    aug = mt_baseline_pretrain(ds, cfg, np.random.default_rng(0), aug=True, model_cfg=TINY).model
    assert plain.hyper is None and aug.hyper is None
    assert aug.arch.in_width == plain.rep.width + TINY["d_hidden"] + 1
    assert plain.arch.in_width == plain.rep.width
    # the plain baseline's actor and critic never read the game embedding
    ctx = plain.context(ds[0])
    assert torch.equal(plain.actor_flat(ctx.h_aug), plain.actor_flat(torch.zeros_like(ctx.h_aug)))
    assert plain.critic.game_width == 0


def test_nan_loss_aborts_with_dump():
    ds = _tiny_dataset()
    model = PursuerModel(ModelConfig.for_specs(ds, **TINY))
    ctxs = [model.context(s) for s in list(ds)[:1]]
    rng = np.random.default_rng(0)
    batch = collect([ctxs[0].spec], [np.repeat(ctxs[0].spec.exits[0], 4)],
                    lambda g, p, e, m, t, mask: mask / mask.sum(1, keepdims=True), rng,
                    model.cfg.n_actions, with_reference=True)
    batch.logp[:] = np.nan
    learner = ModelLearner(model, ctxs, PPOConfig())
    with pytest.raises(TrainingError, match="written to"):
        ppo_update(learner, batch, PPOConfig(), 0.5, rng)


def test_pretrain_config_validation():
    with pytest.raises(ConfigurationError):
        PretrainConfig(alpha=1.5)
    with pytest.raises(ConfigurationError):
        PretrainConfig(c1=0)
    with pytest.raises(ConfigurationError):
        PPOConfig(clip=0.0)
    assert PretrainConfig(alpha=1.0, alpha_final=0.0).alpha_at(0.25) == pytest.approx(0.75)
