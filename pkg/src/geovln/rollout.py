"""Batched episode rollouts of the agent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .model import GeoVLNAgent, collate, collate_instructions, viewpoint_inputs
from .slot_fusion import split_trace
from .world import MODALITIES, Episode, step, teacher_action

MODES = ("teacher", "sample", "greedy")


@dataclass
class StepRecord:
    """Differentiable quantities of one time step over the active rows.

    Column indices refer to the padded action vector, where STOP is the last
    column.
    """

    t: int
    rows: list[int]
    probs: Tensor  # A x (K_max + 1)
    action_cols: Tensor  # A
    teacher_cols: Tensor  # A
    values: Tensor  # A


@dataclass
class RolloutTrace:
    """One episode's trajectory.  Actions are 0-based, STOP = K."""

    episode: Episode
    nodes: list[int] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    teacher_actions: list[int] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)  # compact (K+1,) rows
    values: list[float] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)  # before the first step, then after each
    done: list[bool] = field(default_factory=list)
    stopped: bool = False
    attention: list[dict] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)

    @property
    def final_node(self) -> int:
        return self.nodes[-1]


@dataclass
class BatchRollout:
    traces: list[RolloutTrace]
    steps: list[StepRecord]


def run_rollout(
    agent: GeoVLNAgent,
    episodes: list[Episode],
    modes: str | list[str],
    rng: torch.Generator | None = None,
    record: bool = False,
    grad: bool = True,
) -> BatchRollout:
    """Roll out ``episodes`` in parallel.

    ``modes`` chooses per row between teacher forcing, categorical sampling
    and greedy decoding.  With ``record`` the attention and decision dumps
    are filled in.
    """
    if isinstance(modes, str):
        modes = [modes] * len(episodes)
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown rollout mode {m!r}")
    with torch.set_grad_enabled(grad):
        return _rollout(agent, episodes, modes, rng, record)


def _rollout(agent, episodes, modes, rng, record) -> BatchRollout:
    dtype = agent.dtype
    repeat = agent.config.angle_repeat
    tokens, tmask = collate_instructions(episodes)
    language, state = agent.encode(tokens, tmask, rng)
    traces = [RolloutTrace(ep, nodes=[ep.start], distances=[ep.world.distance(ep.start, ep.goal)]) for ep in episodes]
    finished = [False] * len(episodes)
    steps: list[StepRecord] = []
    horizon = max(ep.max_steps for ep in episodes)
    sample_rows = [i for i, m in enumerate(modes) if m == "sample"]

    for t in range(horizon):
        active = [i for i in range(len(episodes)) if not finished[i]]
        if not active:
            break
        idx = torch.tensor(active)
        here = [traces[i].nodes[-1] for i in active]
        inputs = collate([viewpoint_inputs(episodes[i].world, n, repeat, dtype) for i, n in zip(active, here)])
        out = agent.act(state[idx], language[idx], tmask[idx], inputs, rng)
        state = state.index_copy(0, idx, out.state)

        probs = out.dist.probs
        k_max = probs.shape[1] - 1
        ks = inputs.valid.sum(dim=1).tolist()
        teacher = [teacher_action(episodes[i], n) for i, n in zip(active, here)]
        teacher_cols = [a if a < k else k_max for a, k in zip(teacher, ks)]
        greedy_cols = probs.detach().argmax(dim=1).tolist()
        cols = []
        sampled = {}
        srows = [j for j, i in enumerate(active) if i in sample_rows]
        if srows:
            draws = torch.multinomial(probs.detach()[srows], 1, generator=rng).squeeze(1).tolist()
            sampled = dict(zip(srows, draws))
        for j, i in enumerate(active):
            mode = modes[i]
            cols.append(teacher_cols[j] if mode == "teacher" else sampled[j] if mode == "sample" else greedy_cols[j])

        steps.append(
            StepRecord(
                t,
                active,
                probs,
                torch.tensor(cols),
                torch.tensor(teacher_cols),
                out.value,
            )
        )
        probs_np = probs.detach().cpu().numpy()
        values_np = out.value.detach().cpu().numpy()
        for j, i in enumerate(active):
            k = ks[j]
            action = cols[j] if cols[j] < k else k
            tr = traces[i]
            tr.actions.append(action)
            tr.teacher_actions.append(teacher[j])
            tr.probs.append(np.concatenate([probs_np[j, :k], probs_np[j, k_max:]]))
            tr.values.append(float(values_np[j]))
            nxt, done, dist = step(episodes[i], here[j], action, t)
            if action != k:
                tr.nodes.append(nxt)
            tr.distances.append(dist)
            tr.done.append(done)
            if done:
                finished[i] = True
                tr.stopped = action == k
            if record:
                _record(tr, t, j, k, here[j], action, out, agent)
    return BatchRollout(traces, steps)


def _record(tr: RolloutTrace, t: int, j: int, k: int, node: int, action: int, out, agent) -> None:
    n_mod = len(agent.fusion.modalities)
    for stack_name, state in out.fused.slot_states.items():
        for it, attn in enumerate(state.trace):
            blocks = split_trace(attn[j, :k].detach(), n_mod)
            names = agent.fusion.modalities if len(blocks) > 1 else (stack_name,)
            for modality, block in zip(names, blocks):
                tr.attention.append(
                    {
                        "step": t,
                        "iteration": it,
                        "stack": stack_name,
                        "modality": modality,
                        "weights": block.cpu().numpy().round(6).tolist(),
                    }
                )
    dist = out.dist
    k_max = dist.probs.shape[1] - 1
    cols = list(range(k)) + [k_max]
    weights = dist.weights[j].detach().cpu().numpy().round(6).tolist() if dist.weights is not None else None
    tr.decisions.append(
        {
            "step": t,
            "node": node,
            "weights": dict(zip(MODALITIES, weights)) if weights is not None else None,
            "scores": {m: s[j, cols].detach().cpu().numpy().round(6).tolist() for m, s in dist.modality_scores.items()},
            "probs": dist.probs[j, cols].detach().cpu().numpy().round(6).tolist(),
            "action": action,
            "stop": action == k,
        }
    )
