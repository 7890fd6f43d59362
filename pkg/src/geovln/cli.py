"""Command-line entry point: ``geovln {gen,train,eval,rollout,gradcheck}``.

Every command takes ``--config FILE`` and repeated ``--set key=value``
overrides.  Exit codes: 0 success, 2 configuration or input error, 3
numerical failure.  ``GEOVLN_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .archive import ArchiveError, read_archive, write_archive
from .config import ConfigError, RunConfig, load_config, parse_pairs
from .evaluation import (
    BASELINE_POLICIES,
    SplitEntry,
    SplitError,
    evaluate_split,
    load_split_episodes,
    read_split,
    teacher_agreement,
    write_attention_dump,
    write_decision_dump,
    write_eval,
    write_split,
)
from .learning import CheckpointError, NumericalError, compose, load_checkpoint, rollout_losses, train
from .model import GeoVLNAgent
from .nn_core import ParamStore, finite_diff_check
from .rollout import run_rollout
from .world import (
    WorldError,
    WorldGraph,
    generate_world,
    load_world,
    make_episode,
    sample_episodes,
    save_world,
    synthesized_feature_arrays,
)

log = logging.getLogger("geovln")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CONFIG_PREFIX = "cfg."


class UsageError(Exception):
    pass


def build_agent(cfg: RunConfig) -> GeoVLNAgent:
    agent = GeoVLNAgent(cfg.model_config())
    return agent.to(getattr(torch, cfg.dtype))


def config_header(cfg: RunConfig) -> dict[str, str]:
    return {CONFIG_PREFIX + k: v for k, v in cfg.resolved().items()}


def config_from_header(header: dict[str, str]) -> RunConfig:
    pairs = {k[len(CONFIG_PREFIX):]: v for k, v in header.items() if k.startswith(CONFIG_PREFIX)}
    return parse_pairs(pairs)


def _world_loader(cfg: RunConfig):
    """World cache that applies the external feature adapter when configured."""
    cache: dict[str, WorldGraph] = {}

    def load(path: str) -> WorldGraph:
        if path not in cache:
            world = load_world(path)
            if cfg.features_dir:
                adapter = Path(cfg.features_dir) / (Path(path).stem + ".features")
                _, arrays = read_archive(adapter)
                world = world.with_features(arrays)
            cache[path] = world
        return cache[path]

    return load


def _episodes(cfg: RunConfig, split: str | Path):
    path = Path(split)
    if not path.is_absolute() and not path.exists():
        path = Path(cfg.data_dir) / path
    if not path.exists():
        raise UsageError(f"split file {path} not found")
    load = _world_loader(cfg)
    worlds: dict[str, WorldGraph] = {}
    _, entries = read_split(path)
    for e in entries:
        key = str((path.parent / e.world_file).resolve())
        worlds[key] = load(key)
    return load_split_episodes(path, cfg.max_steps, worlds)


# --------------------------------------------------------------------------
# gen


def cmd_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    seen = [(f"world_seen_{i}.txt", cfg.world_seed + i) for i in range(cfg.n_seen_worlds)]
    unseen = [(f"world_unseen_{i}.txt", cfg.world_seed + 10_000 + i) for i in range(cfg.n_unseen_worlds)]
    names = [n for n, _ in seen + unseen] + ["train.split", "val_seen.split", "val_unseen.split", "config.txt"]
    if args.export_features:
        names += [Path(n).stem + ".features" for n, _ in seen + unseen]
    existing = [n for n in names if (out / n).exists()]
    if existing and not args.force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} in {out} (use --force)")

    header = config_header(cfg)
    worlds = {}
    for name, seed in seen + unseen:
        world = generate_world(cfg.n_nodes, cfg.extent, cfg.k_nearest, seed, cfg.feature_spec())
        save_world(world, out / name, header)
        if args.export_features:
            write_archive(out / (Path(name).stem + ".features"), synthesized_feature_arrays(world), header)
        worlds[name] = world

    plan = [
        ("train", seen, cfg.n_train, 1),
        ("val_seen", seen, cfg.n_val_seen, 2),
        ("val_unseen", unseen, cfg.n_val_unseen, 3),
    ]
    sizes = {}
    for split, pool, count, tag in plan:
        rng = np.random.default_rng([cfg.world_seed, tag])
        entries = []
        for i, (name, _) in enumerate(pool):
            share = count // len(pool) + (1 if i < count % len(pool) else 0)
            eps = sample_episodes(
                worlds[name], share, rng, cfg.min_hops, cfg.max_hops, cfg.success_radius, cfg.max_steps
            )
            entries += [SplitEntry(name, e.start, e.goal, e.seed) for e in eps]
        if len(entries) < count:
            log.warning("split %s has %d of %d requested episodes (worlds too small for the hop bounds)", split, len(entries), count)
        write_split(out / f"{split}.split", split, entries, header)
        sizes[split] = len(entries)
    (out / "config.txt").write_text(cfg.to_text())

    n_edges = sum(len(w.edges) for w in worlds.values())
    print(f"worlds={len(worlds)} nodes={cfg.n_nodes} edges={n_edges} " + " ".join(f"{k}={v}" for k, v in sizes.items()))
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    train_eps = _episodes(cfg, cfg.train_split)
    if not train_eps:
        raise UsageError(f"training split {cfg.train_split} has no episodes")
    probe_eps = _episodes(cfg, cfg.probe_split) if cfg.probe_split else train_eps
    tcfg = cfg.train_config()
    agent = build_agent(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    log.info("variant=%s resolved config:\n%s", cfg.variant, cfg.to_text())
    print(f"variant={cfg.variant} train_episodes={len(train_eps)} probe_episodes={len(probe_eps)}")

    def probe(a: GeoVLNAgent) -> dict[str, float]:
        result, traces = evaluate_split(a, probe_eps, cfg.success_radius)
        metrics = {**result.summary(), "agreement": teacher_agreement(traces)}
        print("probe " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()), flush=True)
        return metrics

    stop = None
    if args.stop_sr is not None:
        stop = lambda m: m["sr"] >= args.stop_sr and m["agreement"] >= args.stop_sr  # noqa: E731
    result = train(
        agent,
        train_eps,
        tcfg,
        out,
        probe,
        header={"variant": cfg.variant, **config_header(cfg)},
        resume=args.resume,
        stop_when=stop,
        max_iterations=args.max_iterations,
    )
    last = result.history[-1] if result.history else None
    summary = f"iterations={result.iterations} best_spl={result.best_metric:.4f} best_iteration={result.best_iteration}"
    if last is not None:
        summary += f" last_total={last.total:.6f}"
    print(summary)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / rollout


def _policy(args, cfg: RunConfig) -> tuple[GeoVLNAgent | str, RunConfig]:
    if args.policy:
        return args.policy, cfg
    if not args.checkpoint:
        raise UsageError("either --checkpoint or --policy is required")
    header, _ = read_archive(args.checkpoint)
    if not (args.config or args.set):
        cfg = config_from_header(header)
    agent = build_agent(cfg)
    load_checkpoint(args.checkpoint, agent)
    return agent, cfg


def cmd_eval(args, cfg: RunConfig) -> int:
    policy, cfg = _policy(args, cfg)
    episodes = _episodes(cfg, args.split)
    record = bool(args.dump_attention or args.dump_decisions)
    result, traces = evaluate_split(policy, episodes, cfg.success_radius, seed=args.seed, record=record)
    header = {"policy": policy if isinstance(policy, str) else "agent", "split": str(args.split), "seed": str(args.seed)}
    header.update(config_header(cfg))
    write_eval(args.out, result, header)
    if args.dump_attention:
        write_attention_dump(args.dump_attention, traces)
    if args.dump_decisions:
        write_decision_dump(args.dump_decisions, traces)
    s = result.summary()
    print(f"episodes={s['n']} TL={s['tl']:.4f} NE={s['ne']:.4f} SR={s['sr']:.4f} SPL={s['spl']:.4f}")
    return EXIT_OK


def cmd_rollout(args, cfg: RunConfig) -> int:
    policy, cfg = _policy(args, cfg)
    episodes = _episodes(cfg, args.split)
    if not 0 <= args.episode < len(episodes):
        raise UsageError(f"episode index {args.episode} outside 0..{len(episodes) - 1}")
    ep = episodes[args.episode]
    _, traces = evaluate_split(policy, [ep], cfg.success_radius, seed=args.seed, record=not isinstance(policy, str))
    tr = traces[0]
    print(f"start={ep.start} goal={ep.goal} instruction={' '.join(map(str, ep.instruction))} shortest={'-'.join(map(str, ep.path))}")
    for t, (a, teacher) in enumerate(zip(tr.actions, tr.teacher_actions)):
        line = f"t={t} action={a} teacher={teacher} dist={tr.distances[t + 1]:.4f}"
        if tr.probs:
            line += " probs=" + ",".join(f"{p:.3f}" for p in tr.probs[t])
        if tr.decisions and tr.decisions[t]["weights"] is not None:
            line += " weights=" + ",".join(f"{m}:{w:.3f}" for m, w in tr.decisions[t]["weights"].items())
        print(line)
    print(f"path={'-'.join(map(str, tr.nodes))} stopped={tr.stopped}")
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck

GRADCHECK_DEFAULTS = {
    "n_nodes": "3",
    "feature_dim": "4",
    "angle_repeat": "1",
    "d_h": "8",
    "heads": "2",
    "state_layers": "1",
    "lang_layers": "1",
    "lsa_iterations": "3",
    "n_landmarks": "3",
    "dropout": "0.0",
    "lsa_dropout": "0.0",
    "dtype": "float64",
    "max_steps": "3",
}


def gradcheck_world(cfg: RunConfig) -> tuple[WorldGraph, int, int]:
    """A small world plus a start/goal pair whose start has exactly two
    candidates (falls back to the first node of maximal degree)."""
    world = generate_world(cfg.n_nodes, cfg.extent, cfg.k_nearest, cfg.world_seed, cfg.feature_spec())
    degrees = [len(n) for n in world.neighbors]
    start = degrees.index(2) if 2 in degrees else int(np.argmax(degrees))
    hops = world.hop_distances(start)
    goal = int(np.argmax(hops))
    return world, start, goal


def gradcheck_loss(agent: GeoVLNAgent, episode, cfg: RunConfig):
    """Full-pipeline scalar: teacher-forced rollout scored with the complete
    objective (imitation, actor, critic and entropy terms).

    The actor's value baseline is a stop-gradient in training; here it is
    frozen to the unperturbed critic outputs so that the scalar and its
    autograd gradient describe the same function.
    """
    tcfg = cfg.train_config()
    reference = run_rollout(agent, [episode], "teacher", grad=False)
    baselines = {0: list(reference.traces[0].values)}

    def f(_params: ParamStore):
        ro = run_rollout(agent, [episode], "teacher", grad=True)
        terms = rollout_losses(ro, {0}, {0}, 1, tcfg, baselines)
        return compose(terms, tcfg)[1]

    return f


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    world, start, goal = gradcheck_world(cfg)
    episode = make_episode(world, start, goal, seed=0, max_steps=cfg.max_steps)
    agent = build_agent(cfg)
    agent.eval()
    params = ParamStore.from_module(agent)
    if args.inject_sign_flip:
        if args.inject_sign_flip not in params:
            raise UsageError(f"no parameter named {args.inject_sign_flip}")
        params[args.inject_sign_flip].register_hook(lambda g: -g)
    report = finite_diff_check(gradcheck_loss(agent, episode, cfg), params, tolerance=args.tolerance)
    print(f"# candidates_at_start={len(world.neighbors[start])} params={len(params)} scalars={params.num_scalars()}")
    for line in report.lines():
        print(line)
    print(f"max_rel_err={report.max_error:.3e} tolerance={args.tolerance:.0e} {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geovln", description="Desk-scale geometry-enhanced VLN agent")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("gen", help="generate worlds and split files")
    common(p)
    p.add_argument("--out", help="output directory (default: data_dir)")
    p.add_argument("--force", action="store_true", help="overwrite existing files")
    p.add_argument("--export-features", action="store_true", help="also write per-world feature-adapter archives")

    p = sub.add_parser("train", help="train an agent")
    common(p)
    p.add_argument("--variant", help="shorthand for --set variant=...")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-iterations", type=int, help="stop after this many iterations in this invocation")
    p.add_argument("--stop-sr", type=float, help="stop once probe SR and teacher agreement reach this value")

    for name, helptext in (("eval", "evaluate on a split"), ("rollout", "print one episode's trajectory")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--policy", choices=BASELINE_POLICIES, help="model-free baseline instead of a checkpoint")
        p.add_argument("--split", required=True)
        p.add_argument("--seed", type=int, default=0, help="seed for the random baseline")
        if name == "eval":
            p.add_argument("--out", default="eval.tsv")
            p.add_argument("--dump-attention", metavar="FILE")
            p.add_argument("--dump-decisions", metavar="FILE")
        else:
            p.add_argument("--episode", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-sign-flip", metavar="PARAM", help=argparse.SUPPRESS)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("GEOVLN_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.command == "gradcheck":
            overrides = [f"{k}={v}" for k, v in GRADCHECK_DEFAULTS.items()] + overrides
        if getattr(args, "variant", None):
            overrides.append(f"variant={args.variant}")
        cfg = load_config(args.config, overrides)
        cfg.model_config()
        cfg.train_config()
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, CheckpointError, ArchiveError, SplitError, WorldError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
