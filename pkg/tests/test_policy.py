import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pegsolve.encoders import ObsRepresentation
from pegsolve.errors import ConfigurationError, InputError
from pegsolve.instances import InstanceConfig, MapTemplate, build_dataset
from pegsolve.model import ModelConfig, PursuerModel, random_policy
from pegsolve.nn import make_generator, masked_log_softmax
from pegsolve.policy import (Critic, GeneratedPolicy, HyperNetwork, PolicyArchitecture, actor_forward,
                             actor_logits, critic_forward, flatten, hyper_forward, init_actor_flat, unflatten)

from conftest import fd_rel_error

D = torch.float64


def small_arch(in_width=6):
    return PolicyArchitecture(in_width, (5, 4), 3)


def test_param_count():
    arch = PolicyArchitecture(10, (7, 6), 5)
    assert arch.param_count == 10 * 7 + 7 + 7 * 6 + 6 + 6 * 5 + 5
    ends = [bs.stop for _, bs, _ in arch.slices()]
    assert ends[-1] == arch.param_count
    assert PolicyArchitecture.from_dict(arch.to_dict()) == arch


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.lists(st.integers(1, 6), min_size=0, max_size=3), st.integers(1, 6))
def test_flatten_round_trip(w, hidden, a):
    arch = PolicyArchitecture(w, tuple(hidden), a)
    flat = torch.randn(arch.param_count, dtype=D)
    assert torch.equal(flatten(unflatten(flat, arch)), flat)


def test_unflatten_length_mismatch():
    arch = small_arch()
    with pytest.raises(ConfigurationError):
        unflatten(torch.zeros(arch.param_count + 1), arch)


def test_hyper_forward_determinism_and_shape():
    arch = small_arch()
    hyper = HyperNetwork(9, arch, hidden=16, seed=0, dtype=D)
    h = torch.randn(9, dtype=D, generator=make_generator(1))
    a, b = hyper_forward(h, hyper), hyper_forward(h, hyper)
    assert torch.equal(a.flat, b.flat) and a.flat.shape == (arch.param_count,)
    assert a.source == b.source


def test_hyper_forward_perturbation():
    hyper = HyperNetwork(9, small_arch(), hidden=16, seed=0, dtype=D)
    h = torch.rand(9, dtype=D, generator=make_generator(2)) + 0.1
    h2 = h.clone()
    h2[3] += 0.5
    diff = (hyper_forward(h, hyper).flat - hyper_forward(h2, hyper).flat).abs().max().item()
    assert diff > 1e-12


def test_hyper_width_mismatch():
    hyper = HyperNetwork(9, small_arch(), hidden=16, dtype=D)
    with pytest.raises(ConfigurationError):
        hyper(torch.zeros(8, dtype=D))


def test_hyper_batched_matches_single():
    hyper = HyperNetwork(4, small_arch(), hidden=8, dtype=D)
    hs = torch.randn(3, 4, dtype=D)
    batched = hyper(hs)
    for i in range(3):
        assert torch.allclose(batched[i], hyper(hs[i]), atol=1e-14)


def test_actor_single_legal_action():
    arch = small_arch()
    pol = GeneratedPolicy(torch.randn(arch.param_count, dtype=D), arch)
    p = actor_forward(pol, torch.randn(6, dtype=D), [False, True, False])
    assert p.tolist() == [0.0, 1.0, 0.0]


def test_actor_zero_final_layer_uniform():
    arch = small_arch()
    flat = init_actor_flat(arch, make_generator(0), dtype=D)
    ws, bs, _ = arch.slices()[-1]
    flat[ws] = 0
    flat[bs] = 0
    p = actor_forward(GeneratedPolicy(flat, arch), torch.randn(4, 6, dtype=D),
                      torch.tensor([[1, 1, 1], [1, 0, 1], [0, 1, 0], [1, 1, 0]], dtype=torch.bool))
    expected = torch.tensor([[1 / 3] * 3, [0.5, 0, 0.5], [0, 1, 0], [0.5, 0.5, 0]], dtype=D)
    assert torch.allclose(p, expected, atol=1e-15)


def test_actor_all_masked():
    arch = small_arch()
    with pytest.raises(InputError):
        actor_forward(GeneratedPolicy(torch.zeros(arch.param_count, dtype=D), arch),
                      torch.zeros(6, dtype=D), [False, False, False])


def test_actor_sums_to_one_sweep():
    arch = small_arch()
    gen = make_generator(5)
    pol = GeneratedPolicy(torch.randn(arch.param_count, dtype=D, generator=gen) * 3, arch)
    x = torch.randn(1000, 6, dtype=D, generator=gen) * 4
    mask = torch.rand(1000, 3, generator=gen) < 0.6
    mask[:, 0] |= ~mask.any(1)
    p = actor_forward(pol, x, mask)
    assert (p.sum(1) - 1).abs().max().item() < 1e-9
    assert torch.all(p[~mask] == 0)


def test_critic_examples():
    critic = Critic(5, 3, hidden=(4,), seed=0, dtype=D)
    c, h = torch.randn(2, 5, dtype=D), torch.randn(3, dtype=D)
    assert torch.equal(critic_forward(critic, c, h), critic_forward(critic, c, h))
    with torch.no_grad():
        for p in critic.parameters():
            p.zero_()
    assert critic_forward(critic, c, h).tolist() == [0.0, 0.0]
    with pytest.raises(ConfigurationError):
        critic_forward(critic, torch.randn(2, 4, dtype=D), h)
    with pytest.raises(ConfigurationError):
        critic_forward(critic, c, None)


def test_critic_gradcheck():
    critic = Critic(5, 3, hidden=(4, 4), seed=1, dtype=D)
    c = torch.randn(3, 5, dtype=D, requires_grad=True)
    h = torch.randn(3, dtype=D, requires_grad=True)
    params = list(critic.parameters()) + [c, h]
    w = torch.tensor([0.3, -1.2, 0.7], dtype=D)
    assert fd_rel_error(lambda: (critic_forward(critic, c, h) * w).sum(), params) < 1e-4


def test_hyper_to_actor_logprob_gradcheck():
    arch = PolicyArchitecture(4, (3,), 3)
    hyper = HyperNetwork(5, arch, hidden=6, depth=2, head_scale=0.5, seed=3, dtype=D)
    gen = make_generator(4)
    h = torch.randn(5, dtype=D, generator=gen)
    x = torch.randn(6, 4, dtype=D, generator=gen)
    mask = torch.tensor([[1, 1, 1], [1, 0, 1], [0, 1, 1], [1, 1, 0], [1, 1, 1], [0, 0, 1]], dtype=torch.bool)
    acts = torch.tensor([0, 2, 1, 1, 2, 2])

    def logp():
        lp = masked_log_softmax(actor_logits(hyper(h), arch, x), mask)
        return lp.gather(1, acts[:, None]).sum()

    assert fd_rel_error(logp, list(hyper.parameters())) < 1e-4


def _model(method="grasper", **kw):
    ds = build_dataset(MapTemplate("grid", 4, 4, edge_keep_prob=0.9), InstanceConfig(2, 2, (3, 4), 2), 4)
    cfg = ModelConfig.for_specs(ds, method=method, d_hidden=8, d_loc=4, d_id=2, d_time=2,
                                actor_hidden=(6,), hyper_hidden=8, critic_hidden=(6,), dtype="float64", **kw)
    return ds, PursuerModel(cfg)


def test_member_swap_swaps_distributions():
    ds, model = _model()
    pol = model.base_policy(ds[0])
    ploc = np.array([[0, 5], [0, 5]])
    eloc = np.array([3, 3])
    t = np.array([1, 1])
    mask = np.ones((2, model.cfg.n_actions), dtype=bool)
    a = pol.probs(ploc, eloc, np.array([0, 1]), t, mask)
    b = pol.probs(ploc, eloc, np.array([1, 0]), t, mask)
    assert np.array_equal(a[0], b[1]) and np.array_equal(a[1], b[0])
    assert not np.allclose(a[0], a[1], atol=0)  # the id segment makes a difference


@pytest.mark.parametrize("method", ["grasper", "mt", "mt_aug"])
def test_model_save_load_round_trip(tmp_path, method):
    ds, model = _model(method)
    model.save(tmp_path / "m.ckpt", {"episodes": 3})
    back, meta = PursuerModel.load(tmp_path / "m.ckpt")
    assert meta["episodes"] == 3 and back.cfg == model.cfg
    ctx_a, ctx_b = model.context(ds[1]), back.context(ds[1])
    assert torch.equal(model.actor_flat(ctx_a.h_aug), back.actor_flat(ctx_b.h_aug))


def test_model_load_rejects_foreign_checkpoint(tmp_path):
    from pegsolve.nn import save_checkpoint
    save_checkpoint(tmp_path / "x.ckpt", {"w": torch.zeros(2)})
    with pytest.raises(ConfigurationError):
        PursuerModel.load(tmp_path / "x.ckpt")


def test_model_context_checks():
    ds, model = _model()
    bigger = build_dataset(MapTemplate("grid", 4, 4), InstanceConfig(3, 2, (3, 4), 2), 1)[0]
    with pytest.raises(ConfigurationError):
        model.context(bigger)


def test_games_get_distinct_policies():
    ds, model = _model()
    f0 = model.actor_flat(model.context(ds[0]).h_aug)
    f1 = model.actor_flat(model.context(ds[1]).h_aug)
    assert not torch.equal(f0, f1)


def test_policy_callable_matches_legal_actions():
    ds, model = _model()
    spec = ds[0]
    pol = model.base_policy(spec)
    from pegsolve.game import Observation
    from pegsolve.graph import legal_actions
    obs = Observation(spec.pursuer_starts, spec.evader_start, 1, 0)
    p = pol(obs)
    assert len(p) == len(legal_actions(spec.graph, spec.pursuer_starts[1]))
    assert abs(p.sum() - 1) < 1e-9


def test_random_policy_is_fresh():
    ds, model = _model()
    a = random_policy(ds[0], model.cfg, 1)
    b = random_policy(ds[0], model.cfg, 2)
    assert isinstance(a.rep, ObsRepresentation) and a.rep is not b.rep
    assert not torch.equal(a.flat, b.flat)
    c = a.clone(trainable_rep=True)
    assert c.rep is not a.rep and torch.equal(c.flat, a.flat)
