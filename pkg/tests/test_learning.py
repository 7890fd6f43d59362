from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_agent
from geovln.learning import (
    CheckpointError,
    TrainConfig,
    a2c_losses,
    compose,
    discounted_returns,
    entropy,
    il_loss,
    load_checkpoint,
    lr_schedule,
    make_optimizer,
    rewards,
    rollout_losses,
    save_checkpoint,
    total_loss,
    train,
    train_step,
)
from geovln.rollout import run_rollout
from geovln.world import make_episode, step, teacher_action


def _probs(rows, cols, seed=0):
    x = np.random.default_rng(seed).standard_normal((rows, cols))
    return torch.softmax(torch.from_numpy(x), dim=-1)


# --------------------------------------------------------------------------
# imitation loss


def test_il_loss_one_hot_is_zero():
    probs = torch.eye(4, dtype=torch.float64)[[1, 3, 0]]
    assert il_loss(probs, [1, 3, 0]).item() == 0.0


def test_il_loss_uniform():
    probs = torch.full((3, 4), 0.25, dtype=torch.float64)
    assert il_loss(probs, [0, 2, 3]).item() == pytest.approx(3 * math.log(4), abs=1e-12)


@given(st.integers(1, 12), st.integers(2, 7), st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_il_loss_matches_per_step_cross_entropy(steps, cols, seed):
    probs = _probs(steps, cols, seed)
    teacher = np.random.default_rng(seed + 1).integers(cols, size=steps)
    p = probs.numpy()
    expected = 0.0
    for t in range(steps):
        expected -= math.log(p[t, teacher[t]])
    assert il_loss(probs, teacher.tolist()).item() == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_il_loss_clamps_zero_probability(caplog):
    probs = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    with caplog.at_level("WARNING"):
        value = il_loss(probs, [1]).item()
    assert value == pytest.approx(-math.log(1e-12))
    assert "clamping" in caplog.text


# --------------------------------------------------------------------------
# rewards and returns


def test_reward_stop_at_goal():
    assert rewards([0.0, 0.0]) == [2.0]


def test_reward_progress_then_timeout():
    # 1.5 m of progress, then a second move ending 5 m away at timeout
    assert rewards([6.5, 5.0, 5.0]) == [1.5, -2.0]


def test_reward_terminal_radius_is_closed():
    assert rewards([8.0, 3.0])[-1] == 2.0
    assert rewards([8.0, 3.0 + 1e-9])[-1] == -2.0


def test_oscillation_progress_telescopes(world20):
    a, b = world20.edges[0]
    goal = next(g for g in range(world20.n_nodes) if g not in (a, b))
    dists = [world20.distance(n, goal) for n in [a, b] * 5 + [a]]
    r = rewards(dists + [dists[-1]])
    assert sum(r[:-1]) == pytest.approx(0.0, abs=1e-9)


def test_rewards_on_world_trajectory(world20):
    ep = make_episode(world20, 0, max(range(1, 20), key=lambda g: world20.distance(0, g)))
    node, dists = ep.start, [world20.distance(ep.start, ep.goal)]
    for t in range(3):
        node, _, d = step(ep, node, teacher_action(ep, node), t)
        dists.append(d)
    r = rewards(dists)
    for t in range(2):
        assert r[t] == pytest.approx(world20.distance(ep.path[t], ep.goal) - world20.distance(ep.path[t + 1], ep.goal))
    assert abs(r[-1]) == 2.0


def test_returns_hand_recursion():
    r = [1.0, -0.5, 2.0]
    r2 = 2.0
    r1 = -0.5 + 0.9 * r2
    r0 = 1.0 + 0.9 * r1
    assert discounted_returns(r, 0.9) == pytest.approx([r0, r1, r2], abs=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(0.01, 1.0))
@settings(max_examples=100, deadline=None)
def test_returns_recursion_property(r, gamma):
    ret = discounted_returns(r, gamma)
    assert ret[-1] == r[-1]
    for t in range(len(r) - 1):
        assert ret[t] == pytest.approx(r[t] + gamma * ret[t + 1], abs=1e-9)


# --------------------------------------------------------------------------
# actor-critic terms


def test_critic_zero_when_values_match_returns():
    probs = _probs(3, 4)
    ret = torch.tensor([1.0, 2.0, -1.0], dtype=torch.float64)
    _, critic, _ = a2c_losses(probs, [0, 1, 2], ret, ret.clone())
    assert critic.item() == 0.0


def test_uniform_entropy_regularizer():
    probs = torch.full((5, 3), 1 / 3, dtype=torch.float64)
    _, _, reg = a2c_losses(probs, [0] * 5, [0.0] * 5, torch.zeros(5, dtype=torch.float64))
    assert reg.item() == pytest.approx(-5 * math.log(3), abs=1e-12)


def test_actor_matches_direct_formula():
    probs = _probs(4, 3, seed=2)
    actions = [0, 2, 1, 1]
    ret = [1.0, 0.5, -2.0, 3.0]
    vals = torch.tensor([0.2, -0.1, 0.4, 1.0], dtype=torch.float64)
    actor, critic, _ = a2c_losses(probs, actions, ret, vals)
    p = probs.numpy()
    expected = -sum((ret[t] - vals[t].item()) * math.log(p[t, actions[t]]) for t in range(4))
    assert actor.item() == pytest.approx(expected, abs=1e-12)
    assert critic.item() == pytest.approx(sum((ret[t] - vals[t].item()) ** 2 for t in range(4)), abs=1e-12)


def test_masked_entropy_has_finite_gradient():
    logits = torch.tensor([[0.3, -1.0, 0.0]], dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[True, False, True]])
    p = torch.softmax(logits.masked_fill(~mask, -math.inf), dim=-1)
    entropy(p).sum().backward()
    assert torch.isfinite(logits.grad).all()
    assert logits.grad[0, 1].item() == 0.0


def test_total_loss_examples():
    assert total_loss(5.0, 1.0, 0.0) == 1.0
    assert total_loss(5.0, 1.0, 0.2) == pytest.approx(2.0, abs=1e-15)
    assert total_loss(3.0, 7.0, 1.0) == total_loss(7.0, 3.0, 1.0)


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.5)
    TrainConfig(gamma=1.0)


# --------------------------------------------------------------------------
# schedule


def test_lr_schedule_endpoints():
    cfg = TrainConfig(iterations=1000)
    assert 0 <= lr_schedule(0, cfg) == cfg.lr_min
    assert lr_schedule(50, cfg) == pytest.approx(cfg.lr_max, abs=1e-15)
    assert lr_schedule(1000, cfg) == pytest.approx(cfg.lr_min, abs=1e-12)


def test_lr_schedule_monotone_after_warmup():
    cfg = TrainConfig(iterations=400)
    rates = [lr_schedule(i, cfg) for i in range(20, 401)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_lr_restarts_shrink_peak():
    cfg = TrainConfig(iterations=200, lr_cycles=2, lr_gamma=0.5)
    assert lr_schedule(5, cfg) == pytest.approx(cfg.lr_max)
    assert lr_schedule(105, cfg) == pytest.approx(0.5 * cfg.lr_max)


# --------------------------------------------------------------------------
# training step


def _episodes(tiny_world):
    rng = np.random.default_rng(1)
    from geovln.world import sample_episodes

    return sample_episodes(tiny_world, 4, rng, min_hops=1, max_hops=4, min_distance=0.0)


def test_loss_identities_per_step(tiny_world):
    agent = tiny_agent()
    cfg = TrainConfig(iterations=10, batch_size=2)
    opt = make_optimizer(agent, cfg)
    rng = torch.Generator().manual_seed(0)
    eps = _episodes(tiny_world)
    for it in range(5):
        l = train_step(agent, opt, eps[:2], cfg, rng, it)
        assert abs(l.rl - (l.actor + l.critic + l.lam_reg * l.reg)) <= 1e-9
        assert abs(l.total - (l.rl + 0.2 * l.il)) <= 1e-9


def test_pure_il_memorizes_one_episode(tiny_world):
    agent = tiny_agent()
    cfg = TrainConfig(iterations=50, il_only=True, lr_max=3e-3, warmup_frac=0.0)
    opt = make_optimizer(agent, cfg)
    rng = torch.Generator().manual_seed(0)
    ep = _episodes(tiny_world)[:1]
    losses = [train_step(agent, opt, ep, cfg, rng, it).il for it in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_il_warmup_switches_objective(tiny_world):
    agent = tiny_agent()
    cfg = TrainConfig(iterations=10, il_warmup=2)
    opt = make_optimizer(agent, cfg)
    rng = torch.Generator().manual_seed(0)
    ep = _episodes(tiny_world)[:2]
    early = [train_step(agent, opt, ep, cfg, rng, it) for it in range(2)]
    late = train_step(agent, opt, ep, cfg, rng, 2)
    assert all(l.critic == 0.0 and l.actor == 0.0 for l in early)
    assert late.critic > 0.0


def test_gradient_clip_bound(tiny_world):
    agent = tiny_agent()
    cfg = TrainConfig(iterations=10, clip_norm=1e-3)
    opt = make_optimizer(agent, cfg)
    rng = torch.Generator().manual_seed(0)
    l = train_step(agent, opt, _episodes(tiny_world)[:2], cfg, rng, 0)
    assert l.grad_norm > cfg.clip_norm
    norm = torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in agent.parameters() if p.grad is not None]))
    assert norm.item() <= cfg.clip_norm + 1e-6


def test_same_seed_same_loss_stream(tiny_world):
    def run():
        agent = tiny_agent()
        cfg = TrainConfig(iterations=10, batch_size=2)
        opt = make_optimizer(agent, cfg)
        rng = torch.Generator().manual_seed(7)
        return [dataclasses.astuple(train_step(agent, opt, _episodes(tiny_world)[:2], cfg, rng, it)) for it in range(6)]

    assert run() == run()


def test_actor_gradient_ignores_critic_path(tiny_world):
    agent = tiny_agent()
    eps = _episodes(tiny_world)[:2]
    cfg = TrainConfig()

    def actor_grads(baselines):
        agent.zero_grad()
        ro = run_rollout(agent, eps, "sample", torch.Generator().manual_seed(3))
        terms = rollout_losses(ro, set(), {0, 1}, 2, cfg, baselines)
        terms["actor"].backward()
        grads = {n: None if p.grad is None else p.grad.clone() for n, p in agent.named_parameters()}
        return grads, ro

    grads, ro = actor_grads(None)
    for name, g in grads.items():
        if name.startswith("critic."):
            assert g is None or torch.count_nonzero(g) == 0
    # the same values supplied as plain constants give the same policy gradient
    frozen = {i: ro.traces[i].values for i in range(2)}
    grads2, _ = actor_grads(frozen)
    for name, g in grads.items():
        if g is not None and not name.startswith("critic."):
            torch.testing.assert_close(g, grads2[name], rtol=1e-10, atol=1e-12)
    # moving the critic changes the baseline, never the critic-free path
    with torch.no_grad():
        agent.critic.out.bias.add_(0.5)
    grads3, _ = actor_grads(frozen)
    for name, g in grads.items():
        if g is not None and not name.startswith("critic."):
            torch.testing.assert_close(g, grads3[name], rtol=1e-10, atol=1e-12)


def test_teacher_rollout_reaches_goal(world20):
    from geovln.world import sample_episodes

    eps = sample_episodes(world20, 30, np.random.default_rng(0))
    ro = run_rollout(tiny_agent(feature_dim=64, n_landmarks=20), eps, "teacher", grad=False)
    for tr in ro.traces:
        assert tr.final_node == tr.episode.goal and tr.stopped


# --------------------------------------------------------------------------
# checkpoints and the loop


def test_checkpoint_round_trip_bit_exact(tmp_path):
    a = tiny_agent()
    save_checkpoint(tmp_path / "m.ckpt", a, iteration=3, header={"variant": "TwoSM"})
    b = tiny_agent(seed=99)
    meta = load_checkpoint(tmp_path / "m.ckpt", b)
    assert meta["iteration"] == "3" and meta["variant"] == "TwoSM"
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


def test_checkpoint_mismatch_names_parameter(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", tiny_agent())
    with pytest.raises(CheckpointError, match=r"parameter \S+ has shape"):
        load_checkpoint(tmp_path / "m.ckpt", tiny_agent(d_h=8))


def test_resume_continues_loss_stream(tmp_path, tiny_world):
    eps = _episodes(tiny_world)
    cfg = TrainConfig(iterations=8, batch_size=2, checkpoint_every=100)
    full = train(tiny_agent(), eps, cfg)
    part = train(tiny_agent(), eps, cfg, out_dir=tmp_path, max_iterations=4)
    assert part.iterations == 4
    rest = train(tiny_agent(), eps, cfg, out_dir=tmp_path, resume=tmp_path / "last.ckpt")
    assert rest.iterations == 8
    assert [l.total for l in part.history + rest.history] == [l.total for l in full.history]
    records = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in records] == list(range(8))


def test_train_keeps_best_probe_checkpoint(tmp_path, tiny_world):
    eps = _episodes(tiny_world)
    cfg = TrainConfig(iterations=6, batch_size=2, eval_every=2)
    scores = iter([0.1, 0.5, 0.3])
    result = train(tiny_agent(), eps, cfg, out_dir=tmp_path, probe=lambda agent: {"spl": next(scores)})
    assert result.best_iteration == 4 and result.best_metric == 0.5
    assert (tmp_path / "best.ckpt").exists()


def test_compose_matches_total_loss():
    terms = {k: torch.tensor(v, dtype=torch.float64) for k, v in dict(il=5.0, actor=0.3, critic=0.6, reg=-1.0).items()}
    rl, total = compose(terms, TrainConfig())
    assert rl.item() == pytest.approx(0.3 + 0.6 - 0.01)
    assert total.item() == pytest.approx(rl.item() + 1.0)
