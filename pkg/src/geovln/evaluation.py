"""Navigation metrics, split files and evaluation rollouts."""

from __future__ import annotations

import json
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import GeoVLNAgent
from .rollout import RolloutTrace, run_rollout
from .world import Episode, WorldGraph, load_world, make_episode, step, teacher_action

BASELINE_POLICIES = ("teacher", "random", "stop")


class SplitError(ValueError):
    pass


def trajectory_length(path: Sequence[int], world: WorldGraph) -> float:
    total = 0.0
    for a, b in zip(path, path[1:]):
        if not world.is_adjacent(a, b):
            raise ValueError(f"path step {a}->{b} is not an edge")
        total += world.distance(a, b)
    return total


def navigation_error(final_node: int, goal: int, world: WorldGraph) -> float:
    return world.distance(final_node, goal)


def success(ne: float, radius: float = 3.0) -> bool:
    return ne <= radius


def spl(succeeded: bool, tl: float, shortest_length: float) -> float:
    if shortest_length <= 0:
        raise ValueError("shortest path length must be positive")
    return float(succeeded) * shortest_length / max(tl, shortest_length)


@dataclass(frozen=True)
class EpisodeMetrics:
    index: int
    start: int
    goal: int
    tl: float
    ne: float
    success: bool
    spl: float
    steps: int


@dataclass
class EvalResult:
    episodes: list[EpisodeMetrics] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        return float(np.mean([getattr(e, attr) for e in self.episodes])) if self.episodes else 0.0

    @property
    def tl(self) -> float:
        return self._mean("tl")

    @property
    def ne(self) -> float:
        return self._mean("ne")

    @property
    def sr(self) -> float:
        return self._mean("success")

    @property
    def spl(self) -> float:
        return self._mean("spl")

    def summary(self) -> dict[str, float]:
        return {"tl": self.tl, "ne": self.ne, "sr": self.sr, "spl": self.spl, "n": len(self.episodes)}


def score_traces(traces: Iterable[RolloutTrace], radius: float = 3.0) -> EvalResult:
    result = EvalResult()
    for i, tr in enumerate(traces):
        ep = tr.episode
        tl = trajectory_length(tr.nodes, ep.world)
        ne = navigation_error(tr.final_node, ep.goal, ep.world)
        ok = success(ne, radius)
        result.episodes.append(EpisodeMetrics(i, ep.start, ep.goal, tl, ne, ok, spl(ok, tl, ep.shortest_length), len(tr.actions)))
    return result


def teacher_agreement(traces: Iterable[RolloutTrace]) -> float:
    hits = total = 0
    for tr in traces:
        hits += sum(a == b for a, b in zip(tr.actions, tr.teacher_actions))
        total += len(tr.actions)
    return hits / total if total else 0.0


def baseline_rollout(episodes: Sequence[Episode], policy: str, seed: int = 0) -> list[RolloutTrace]:
    """Model-free reference policies: the shortest-path teacher, a uniform
    random policy over the K+1 actions, and immediate STOP."""
    if policy not in BASELINE_POLICIES:
        raise ValueError(f"unknown baseline policy {policy!r}")
    rng = np.random.default_rng(seed)
    traces = []
    for ep in episodes:
        tr = RolloutTrace(ep, nodes=[ep.start], distances=[ep.world.distance(ep.start, ep.goal)])
        node = ep.start
        for t in range(ep.max_steps):
            k = len(ep.world.neighbors[node])
            expert = teacher_action(ep, node)
            if policy == "teacher":
                action = expert
            elif policy == "random":
                action = int(rng.integers(k + 1))
            else:
                action = k
            nxt, done, dist = step(ep, node, action, t)
            tr.actions.append(action)
            tr.teacher_actions.append(expert)
            tr.distances.append(dist)
            tr.done.append(done)
            if action != k:
                tr.nodes.append(nxt)
            node = nxt
            if done:
                tr.stopped = action == k
                break
        traces.append(tr)
    return traces


def agent_rollout(
    agent: GeoVLNAgent,
    episodes: Sequence[Episode],
    batch_size: int = 64,
    record: bool = False,
) -> list[RolloutTrace]:
    """Greedy evaluation rollouts; parameters are left untouched."""
    was_training = agent.training
    agent.eval()
    traces: list[RolloutTrace] = []
    try:
        for i in range(0, len(episodes), batch_size):
            chunk = list(episodes[i : i + batch_size])
            traces.extend(run_rollout(agent, chunk, "greedy", record=record, grad=False).traces)
    finally:
        agent.train(was_training)
    return traces


def evaluate_split(
    policy: GeoVLNAgent | str,
    episodes: Sequence[Episode],
    radius: float = 3.0,
    seed: int = 0,
    record: bool = False,
) -> tuple[EvalResult, list[RolloutTrace]]:
    if isinstance(policy, str):
        traces = baseline_rollout(episodes, policy, seed)
    else:
        traces = agent_rollout(policy, episodes, record=record)
    return score_traces(traces, radius), traces


# --------------------------------------------------------------------------
# split files


@dataclass(frozen=True)
class SplitEntry:
    world_file: str
    start: int
    goal: int
    seed: int


def write_split(path: str | os.PathLike, name: str, entries: Sequence[SplitEntry], header: dict[str, str] | None = None) -> None:
    lines = ["# geovln split v1", f"# split={name}"]
    lines += [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append("world_file\tstart\tgoal\tseed")
    lines += [f"{e.world_file}\t{e.start}\t{e.goal}\t{e.seed}" for e in entries]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_split(path: str | os.PathLike) -> tuple[dict[str, str], list[SplitEntry]]:
    header: dict[str, str] = {}
    entries = []
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                if value:
                    header[key] = value
                continue
            if line.startswith("world_file\t"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise SplitError(f"{path}: malformed split row {line!r}")
            entries.append(SplitEntry(parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
    return header, entries


def load_split_episodes(
    path: str | os.PathLike,
    max_steps: int = 15,
    worlds: dict[str, WorldGraph] | None = None,
) -> list[Episode]:
    """Materialize a split's episodes; world files resolve relative to the split."""
    base = Path(path).parent
    worlds = {} if worlds is None else worlds
    _, entries = read_split(path)
    episodes = []
    for e in entries:
        key = str((base / e.world_file).resolve())
        if key not in worlds:
            worlds[key] = load_world(key)
        episodes.append(make_episode(worlds[key], e.start, e.goal, e.seed, max_steps))
    return episodes


# --------------------------------------------------------------------------
# result and dump files


def write_eval(path: str | os.PathLike, result: EvalResult, header: dict[str, str] | None = None) -> None:
    lines = ["# geovln eval v1"] + [f"# {k}={v}" for k, v in (header or {}).items()]
    lines.append("episode\tstart\tgoal\tTL\tNE\tSR\tSPL")
    for e in result.episodes:
        lines.append(f"{e.index}\t{e.start}\t{e.goal}\t{e.tl:.4f}\t{e.ne:.4f}\t{float(e.success):.4f}\t{e.spl:.4f}")
    lines.append(f"ALL\t-\t-\t{result.tl:.4f}\t{result.ne:.4f}\t{result.sr:.4f}\t{result.spl:.4f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_attention_dump(path: str | os.PathLike, traces: Sequence[RolloutTrace]) -> None:
    with open(path, "w") as fh:
        for i, tr in enumerate(traces):
            for rec in tr.attention:
                fh.write(json.dumps({"episode": i, **rec}) + "\n")


def write_decision_dump(path: str | os.PathLike, traces: Sequence[RolloutTrace]) -> None:
    with open(path, "w") as fh:
        for i, tr in enumerate(traces):
            for rec in tr.decisions:
                fh.write(json.dumps({"episode": i, **rec}) + "\n")


__all__ = [
    "trajectory_length",
    "navigation_error",
    "success",
    "spl",
    "EpisodeMetrics",
    "EvalResult",
    "score_traces",
    "teacher_agreement",
    "baseline_rollout",
    "agent_rollout",
    "evaluate_split",
    "SplitEntry",
    "write_split",
    "read_split",
    "load_split_episodes",
    "write_eval",
    "write_attention_dump",
    "write_decision_dump",
]
