"""Training objectives, learning-rate schedule, optimizer step and the
training loop (teacher-forced imitation mixed with advantage actor-critic)."""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .archive import read_archive, write_archive
from .model import GeoVLNAgent
from .nn_core import ParamStore
from .rollout import BatchRollout, run_rollout
from .world import Episode

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
TERMINAL_REWARD = 2.0


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    lam_reg: float = 0.01
    gamma: float = 0.9
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    warmup_frac: float = 0.05
    lr_cycles: int = 1
    lr_gamma: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 8
    iterations: int = 5000
    clip_norm: float = 5.0
    seed: int = 0
    il_only: bool = False
    # iterations of pure imitation before the RL terms are switched on
    il_warmup: int = 0
    two_rollouts: bool = True
    success_radius: float = 3.0
    eval_every: int = 250
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.iterations < 1 or self.lr_cycles < 1:
            raise ValueError("batch_size, iterations and lr_cycles must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    il: float
    actor: float
    critic: float
    reg: float
    rl: float
    total: float
    lam: float
    lam_reg: float
    grad_norm: float = 0.0
    lr: float = 0.0


# --------------------------------------------------------------------------
# objectives


def _log_prob(probs: Tensor, cols: Tensor) -> Tensor:
    p = probs.gather(-1, cols.unsqueeze(-1)).squeeze(-1).double()
    if bool((p < PROB_FLOOR).any()):
        log.warning("probability below %.0e at a scored action; clamping", PROB_FLOOR)
    return torch.log(p.clamp_min(PROB_FLOOR))


def il_loss(probs: Tensor, teacher: Tensor | Sequence[int]) -> Tensor:
    """``-sum_t log p_t[a*_t]`` over the rows of ``probs`` (N x A)."""
    teacher = torch.as_tensor(teacher, dtype=torch.long)
    return -_log_prob(probs, teacher).sum()


def rewards(distances: Sequence[float], success_radius: float = 3.0) -> list[float]:
    """Progress reward per step, with the last step replaced by +-2.

    ``distances`` holds the distance to goal before the first action and
    after every action, so it has one more entry than there are steps.
    """
    steps = len(distances) - 1
    out = [distances[t] - distances[t + 1] for t in range(steps)]
    if steps:
        out[-1] = TERMINAL_REWARD if distances[-1] <= success_radius else -TERMINAL_REWARD
    return out


def discounted_returns(rewards_: Sequence[float], gamma: float) -> list[float]:
    out = [0.0] * len(rewards_)
    running = 0.0
    for t in range(len(rewards_) - 1, -1, -1):
        running = rewards_[t] + gamma * running
        out[t] = running
    return out


def entropy(probs: Tensor) -> Tensor:
    # zero-probability (masked) columns get neither value nor gradient
    p = probs.double()
    pos = p > 0
    safe = torch.where(pos, p, torch.ones_like(p))
    return -torch.where(pos, p * torch.log(safe), torch.zeros_like(p)).sum(dim=-1)


def a2c_losses(
    probs: Tensor,
    actions: Tensor | Sequence[int],
    returns: Tensor | Sequence[float],
    values: Tensor,
    baseline: Sequence[float] | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Actor, critic and entropy-regularizer sums over the rows of ``probs``.

    The advantage uses detached values so the actor term does not train the
    critic.  ``baseline`` replaces them with given constants, which makes the
    actor term an ordinary differentiable function (used by gradient checks).
    """
    actions = torch.as_tensor(actions, dtype=torch.long)
    returns = torch.as_tensor(returns, dtype=torch.float64)
    v = values.double()
    base = v.detach() if baseline is None else torch.as_tensor(baseline, dtype=torch.float64)
    advantage = returns - base
    actor = -(advantage * _log_prob(probs, actions)).sum()
    critic = ((returns - v) ** 2).sum()
    reg = -entropy(probs).sum()
    return actor, critic, reg


def total_loss(il: Tensor | float, rl: Tensor | float, lam: float) -> Tensor | float:
    return rl + lam * il


def rollout_losses(
    ro: BatchRollout,
    il_rows: set[int],
    rl_rows: set[int],
    n_episodes: int,
    config: TrainConfig,
    baselines: dict[int, list[float]] | None = None,
) -> dict[str, Tensor]:
    """Batch-mean objective terms from a rollout.

    ``il_rows`` contribute imitation terms, ``rl_rows`` contribute A2C terms
    (a row may belong to both in single-rollout mode).  ``baselines`` maps a
    row to fixed per-step advantage baselines (see ``a2c_losses``).
    """
    returns = {}
    for i in rl_rows:
        tr = ro.traces[i]
        returns[i] = discounted_returns(rewards(tr.distances, config.success_radius), config.gamma)
    zero = torch.zeros((), dtype=torch.float64)
    il, actor, critic, reg = zero, zero, zero, zero
    for rec in ro.steps:
        il_sel = [j for j, i in enumerate(rec.rows) if i in il_rows]
        rl_sel = [j for j, i in enumerate(rec.rows) if i in rl_rows]
        if il_sel:
            il = il + il_loss(rec.probs[il_sel], rec.teacher_cols[il_sel])
        if rl_sel:
            rets = [returns[rec.rows[j]][rec.t] for j in rl_sel]
            base = None if baselines is None else [baselines[rec.rows[j]][rec.t] for j in rl_sel]
            a, c, g = a2c_losses(rec.probs[rl_sel], rec.action_cols[rl_sel], rets, rec.values[rl_sel], base)
            actor, critic, reg = actor + a, critic + c, reg + g
    scale = 1.0 / n_episodes
    return {"il": il * scale, "actor": actor * scale, "critic": critic * scale, "reg": reg * scale}


def compose(terms: dict[str, Tensor], config: TrainConfig) -> tuple[Tensor, Tensor]:
    rl = terms["actor"] + terms["critic"] + config.lam_reg * terms["reg"]
    return rl, total_loss(terms["il"], rl, config.lam)


# --------------------------------------------------------------------------
# schedule and optimizer


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Linear warmup then cosine decay, optionally restarted ``lr_cycles`` times
    with the peak shrunk by ``lr_gamma`` per cycle."""
    cycle_len = config.iterations / config.lr_cycles
    cycle = min(int(iteration // cycle_len), config.lr_cycles - 1)
    pos = min(iteration - cycle * cycle_len, cycle_len)
    peak = config.lr_max * config.lr_gamma**cycle
    warm = config.warmup_frac * cycle_len
    if pos < warm:
        return config.lr_min + (peak - config.lr_min) * pos / warm
    progress = (pos - warm) / max(cycle_len - warm, 1e-12)
    return config.lr_min + (peak - config.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(agent: GeoVLNAgent, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for _, p in sorted(agent.named_parameters())]
    return torch.optim.AdamW(params, lr=config.lr_max, weight_decay=config.weight_decay)


def train_step(
    agent: GeoVLNAgent,
    optimizer: torch.optim.Optimizer,
    episodes: list[Episode],
    config: TrainConfig,
    rng: torch.Generator,
    iteration: int = 0,
) -> LossBreakdown:
    if not episodes:
        raise ValueError("empty batch")
    agent.train()
    b = len(episodes)
    if config.il_only or iteration < config.il_warmup:
        batch, modes = list(episodes), ["teacher"] * b
        il_rows, rl_rows = set(range(b)), set()
    elif config.two_rollouts:
        batch, modes = list(episodes) * 2, ["teacher"] * b + ["sample"] * b
        il_rows, rl_rows = set(range(b)), set(range(b, 2 * b))
    else:
        batch, modes = list(episodes), ["sample"] * b
        il_rows = rl_rows = set(range(b))
    ro = run_rollout(agent, batch, modes, rng)
    terms = rollout_losses(ro, il_rows, rl_rows, b, config)
    rl, total = compose(terms, config)
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite loss at iteration {iteration}: " + ", ".join(f"{k}={float(v)}" for k, v in terms.items()))

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    bad = [n for n, p in agent.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if bad:
        optimizer.zero_grad(set_to_none=True)
        raise NumericalError(f"non-finite gradients at iteration {iteration} in: {', '.join(bad)}")
    grad_norm = float(torch.nn.utils.clip_grad_norm_(agent.parameters(), config.clip_norm))
    lr = lr_schedule(iteration, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return LossBreakdown(
        il=float(terms["il"].detach()),
        actor=float(terms["actor"].detach()),
        critic=float(terms["critic"].detach()),
        reg=float(terms["reg"].detach()),
        rl=float(rl.detach()),
        total=float(total.detach()),
        lam=config.lam,
        lam_reg=config.lam_reg,
        grad_norm=grad_norm,
        lr=lr,
    )


def sample_batch(n: int, batch_size: int, rng: torch.Generator) -> list[int]:
    if batch_size >= n:
        return torch.randperm(n, generator=rng).tolist()
    return torch.randperm(n, generator=rng)[:batch_size].tolist()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path,
    agent: GeoVLNAgent,
    optimizer: torch.optim.Optimizer | None = None,
    rng: torch.Generator | None = None,
    iteration: int = 0,
    header: dict[str, str] | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in ParamStore.from_module(agent).items():
        arrays[f"param.{name}"] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        names = {id(p): n for n, p in agent.named_parameters()}
        for p, state in optimizer.state.items():
            for key, value in sorted(state.items()):
                arrays[f"optim.{key}.{names[id(p)]}"] = torch.as_tensor(value).detach().cpu().numpy()
    if rng is not None:
        arrays["rng.torch"] = rng.get_state().numpy()
    meta = {"format": "geovln-checkpoint-v1", "iteration": str(iteration)}
    meta.update(header or {})
    write_archive(path, arrays, meta)


def load_checkpoint(
    path: str | Path,
    agent: GeoVLNAgent,
    optimizer: torch.optim.Optimizer | None = None,
    rng: torch.Generator | None = None,
) -> dict[str, str]:
    """Restore parameters (and optionally optimizer/rng state) in place.

    Raises ``CheckpointError`` naming the first missing or mis-shaped
    parameter.
    """
    header, arrays = read_archive(path)
    params = dict(agent.named_parameters())
    stored = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    for name, p in params.items():
        if name not in stored:
            raise CheckpointError(f"{path}: parameter {name} missing from checkpoint")
        if tuple(stored[name].shape) != tuple(p.shape):
            raise CheckpointError(
                f"{path}: parameter {name} has shape {tuple(stored[name].shape)}, model expects {tuple(p.shape)}"
            )
    extra = sorted(set(stored) - set(params))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]} in checkpoint")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(stored[name]).to(p.dtype))
    if optimizer is not None:
        optimizer.state.clear()
        for name, p in params.items():
            state = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arr = arrays.get(f"optim.{key}.{name}")
                if arr is not None:
                    state[key] = torch.from_numpy(arr.copy())
            if state:
                optimizer.state[p] = state
    if rng is not None and "rng.torch" in arrays:
        rng.set_state(torch.from_numpy(arrays["rng.torch"].copy()))
    return header


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    iterations: int
    history: list[LossBreakdown]
    best_metric: float
    best_iteration: int
    wall_seconds: float


def train(
    agent: GeoVLNAgent,
    episodes: list[Episode],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    probe: Callable[[GeoVLNAgent], dict[str, float]] | None = None,
    header: dict[str, str] | None = None,
    resume: str | Path | None = None,
    stop_when: Callable[[dict[str, float]], bool] | None = None,
    max_iterations: int | None = None,
) -> TrainResult:
    """Run the training loop.

    ``probe`` is called every ``eval_every`` iterations and must return a
    dict with at least ``spl``; the best-SPL checkpoint is kept as
    ``best.ckpt``.  ``stop_when`` may end training early on a probe result.
    ``max_iterations`` caps this call (used to interrupt a run) without
    changing the schedule, which always spans ``config.iterations``.
    """
    rng = torch.Generator().manual_seed(config.seed)
    optimizer = make_optimizer(agent, config)
    start = 0
    best, best_it = -math.inf, -1
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        meta = load_checkpoint(resume, agent, optimizer, rng)
        start = int(meta["iteration"])
        best = float(meta.get("best_spl", "-inf"))
        best_it = int(meta.get("best_iteration", "-1"))
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a")
    hdr = dict(header or {})
    history: list[LossBreakdown] = []
    t0 = time.perf_counter()
    end = config.iterations if max_iterations is None else min(config.iterations, start + max_iterations)
    completed = start
    try:
        for it in range(start, end):
            batch = [episodes[i] for i in sample_batch(len(episodes), config.batch_size, rng)]
            loss = train_step(agent, optimizer, batch, config, rng, it)
            history.append(loss)
            completed = it + 1
            record = {"iteration": it, **asdict(loss)}
            metrics = None
            if probe is not None and (completed % config.eval_every == 0 or completed == config.iterations):
                metrics = probe(agent)
                record["probe"] = metrics
                if metrics["spl"] > best:
                    best, best_it = metrics["spl"], completed
                    if out is not None:
                        save_checkpoint(out / "best.ckpt", agent, None, None, completed, {**hdr, "best_spl": repr(best)})
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if out is not None and completed % config.checkpoint_every == 0:
                _save_last(out, agent, optimizer, rng, completed, hdr, best, best_it)
            if metrics is not None and stop_when is not None and stop_when(metrics):
                break
        if out is not None:
            _save_last(out, agent, optimizer, rng, completed, hdr, best, best_it)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(completed, history, best, best_it, time.perf_counter() - t0)


def _save_last(out: Path, agent, optimizer, rng, iteration: int, hdr: dict, best: float, best_it: int) -> None:
    save_checkpoint(
        out / "last.ckpt", agent, optimizer, rng, iteration,
        {**hdr, "best_spl": repr(best), "best_iteration": str(best_it)},
    )
