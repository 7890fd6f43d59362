"""Synthetic navigation worlds: connectivity graphs, panoramic observations,
templated instructions, a shortest-path teacher and episode stepping.

Conventions used everywhere in the package:

* heading is measured clockwise from the +y axis, in degrees in [0, 360);
* elevation is measured up from the horizontal plane, in degrees;
* the 36-view grid is enumerated elevation-major (-30, 0, +30), then heading
  ascending (0, 30, ..., 330), so ``index = row * 12 + heading // 30``;
* actions are 0-based: candidate ``i`` is action ``i`` and STOP is action
  ``K`` for a viewpoint with ``K`` candidates.
"""

from __future__ import annotations

import itertools
import math
import os
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np

MODALITIES = ("rgb", "dep", "nor")
N_VIEWS = 36
N_HEADINGS = 12
VIEW_ELEVATIONS = (-30.0, 0.0, 30.0)

PAD, GO, STOP_TOK = 0, 1, 2
LANDMARK_OFFSET = 3

# Upper edges (meters) of the depth buckets; the last bucket is open-ended.
DEPTH_BUCKET_EDGES = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0)

HEADING_CONVENTION = "clockwise_from_+y_degrees"
ELEVATION_CONVENTION = "up_from_horizontal_degrees"
GRID_CONVENTION = "elevation_major_then_heading_ascending"


class WorldError(ValueError):
    pass


def grid_angles(index: int) -> tuple[float, float]:
    """(heading, elevation) of a view-grid cell."""
    if not 0 <= index < N_VIEWS:
        raise WorldError(f"grid index {index} outside 0..35")
    return (index % N_HEADINGS) * 30.0, VIEW_ELEVATIONS[index // N_HEADINGS]


def snap_to_grid(heading: float, elevation: float) -> int:
    col = int(math.floor((heading % 360.0) / 30.0 + 0.5)) % N_HEADINGS
    row = min(max(int(math.floor(elevation / 30.0 + 0.5)), -1), 1) + 1
    return row * N_HEADINGS + col


def heading_elevation(src: np.ndarray, dst: np.ndarray) -> tuple[float, float]:
    dx, dy, dz = (float(v) for v in dst - src)
    heading = math.degrees(math.atan2(dx, dy)) % 360.0
    elevation = math.degrees(math.atan2(dz, math.hypot(dx, dy)))
    return heading, elevation


def depth_bucket(distance: float) -> int:
    return int(np.searchsorted(DEPTH_BUCKET_EDGES, distance, side="left"))


@dataclass(frozen=True)
class FeatureSpec:
    dim: int = 64
    noise: float = 0.05
    n_landmarks: int = 20
    # Seeds the embedding tables shared by every world, so that a landmark
    # looks the same in seen and unseen environments.
    bank_seed: int = 0


@dataclass(frozen=True)
class FeatureBank:
    rgb: np.ndarray  # (n_landmarks + 1, d); last row is WALL
    dep: np.ndarray  # (n_buckets + 1, d); last row is WALL
    nor_projection: np.ndarray  # (3, d)
    nor_wall: np.ndarray  # (d,)


@lru_cache(maxsize=16)
def feature_bank(spec: FeatureSpec) -> FeatureBank:
    rng = np.random.default_rng([spec.bank_seed, 0xBA4C])
    d = spec.dim
    bank = FeatureBank(
        rgb=rng.standard_normal((spec.n_landmarks + 1, d)),
        dep=rng.standard_normal((len(DEPTH_BUCKET_EDGES) + 2, d)),
        nor_projection=rng.standard_normal((3, d)),
        nor_wall=rng.standard_normal(d),
    )
    for arr in (bank.rgb, bank.dep, bank.nor_projection, bank.nor_wall):
        arr.setflags(write=False)
    return bank


@dataclass(frozen=True)
class Candidate:
    target_node: int
    heading: float
    elevation: float
    grid_index: int
    features: dict[str, np.ndarray]


@dataclass(frozen=True)
class Observation:
    viewpoint: int
    panorama: dict[str, np.ndarray]  # modality -> (36, d)
    candidates: tuple[Candidate, ...]

    @property
    def num_candidates(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True, eq=False)
class WorldGraph:
    positions: np.ndarray  # (n, 3) meters
    landmarks: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]  # undirected, stored as (u, v) with u < v
    seed: int
    extent: float = 20.0
    features: FeatureSpec = FeatureSpec()
    external: dict[str, np.ndarray] | None = None  # modality -> (n, 36, d)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.landmarks)

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for u, v in self.edges:
            adj[u].add(v)
            adj[v].add(u)
        return tuple(tuple(sorted(a)) for a in adj)

    def distance(self, u: int, v: int) -> float:
        return float(np.linalg.norm(self.positions[u] - self.positions[v]))

    def is_adjacent(self, u: int, v: int) -> bool:
        return v in self.neighbors[u]

    def with_features(self, external: dict[str, np.ndarray]) -> "WorldGraph":
        for m in MODALITIES:
            arr = external.get(m)
            if arr is None or arr.ndim != 3 or arr.shape[:2] != (self.n_nodes, N_VIEWS):
                raise WorldError(f"external {m} features must have shape ({self.n_nodes}, 36, d)")
        dims = {external[m].shape[2] for m in MODALITIES}
        if len(dims) != 1:
            raise WorldError("external features must share one dimensionality across modalities")
        spec = replace(self.features, dim=dims.pop())
        return replace(self, features=spec, external={m: external[m] for m in MODALITIES}, _cache={})

    def hop_distances(self, source: int) -> np.ndarray:
        key = ("hops", source)
        if key not in self._cache:
            dist = np.full(self.n_nodes, -1, dtype=np.int64)
            dist[source] = 0
            queue = deque([source])
            while queue:
                u = queue.popleft()
                for v in self.neighbors[u]:
                    if dist[v] < 0:
                        dist[v] = dist[u] + 1
                        queue.append(v)
            dist.setflags(write=False)
            self._cache[key] = dist
        return self._cache[key]

    def exit_cells(self, node: int) -> dict[int, int]:
        """Grid cell -> neighbor seen through it (nearest neighbor wins a shared cell)."""
        key = ("exits", node)
        if key not in self._cache:
            cells: dict[int, int] = {}
            for u in sorted(self.neighbors[node], key=lambda u: (self.distance(node, u), u)):
                cell = snap_to_grid(*heading_elevation(self.positions[node], self.positions[u]))
                cells.setdefault(cell, u)
            self._cache[key] = cells
        return self._cache[key]


def generate_world(
    n_nodes: int,
    extent: float = 20.0,
    k_nearest: int = 3,
    seed: int = 0,
    features: FeatureSpec = FeatureSpec(),
) -> WorldGraph:
    """Random geometric graph with k-nearest-neighbor edges, made connected.

    Edges are only drawn between nodes whose elevation angle is at most 45
    degrees, so that every candidate direction lies within half a grid cell
    of the nearest view.  Layouts that cannot be connected under that rule
    are redrawn from a derived seed.
    """
    if n_nodes < 2:
        raise WorldError("a world needs at least two nodes")
    for attempt in itertools.count():
        rng = np.random.default_rng([seed, attempt])
        xy = rng.uniform(0.0, extent, size=(n_nodes, 2))
        z = rng.uniform(0.0, extent / 4.0, size=(n_nodes, 1))
        positions = np.hstack([xy, z])
        landmarks = tuple(int(x) for x in rng.integers(0, features.n_landmarks, size=n_nodes))
        edges = _connect(positions, k_nearest)
        if edges is not None:
            positions.setflags(write=False)
            return WorldGraph(positions, landmarks, edges, seed, extent, features)
    raise AssertionError("unreachable")


def _connect(positions: np.ndarray, k: int) -> tuple[tuple[int, int], ...] | None:
    n = len(positions)
    delta = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(delta, axis=-1)
    horizontal = np.linalg.norm(delta[..., :2], axis=-1)
    admissible = (np.abs(delta[..., 2]) <= horizontal) & ~np.eye(n, dtype=bool)

    edges: set[tuple[int, int]] = set()
    for i in range(n):
        order = [j for j in np.argsort(dist[i], kind="stable") if admissible[i, j]]
        for j in order[:k]:
            edges.add((min(i, int(j)), max(i, int(j))))

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in edges:
        parent[find(u)] = find(v)
    while len({find(i) for i in range(n)}) > 1:
        roots = np.array([find(i) for i in range(n)])
        bridge = admissible & (roots[:, None] != roots[None, :])
        if not bridge.any():
            return None
        masked = np.where(bridge, dist, np.inf)
        i, j = np.unravel_index(int(np.argmin(masked)), masked.shape)
        edges.add((min(int(i), int(j)), max(int(i), int(j))))
        parent[find(int(i))] = find(int(j))

    degree = np.zeros(n, dtype=int)
    for u, v in edges:
        degree[u] += 1
        degree[v] += 1
    if degree.max() > N_VIEWS:
        return None
    return tuple(sorted(edges))


def _noise(world: WorldGraph, node: int, cell: int, modality: str) -> np.ndarray:
    rng = np.random.default_rng([world.seed, node, cell, MODALITIES.index(modality), 0x9015E])
    return world.features.noise * rng.standard_normal(world.features.dim)


def synthesize_features(world: WorldGraph, viewpoint: int, grid_index: int, modality: str) -> np.ndarray:
    if modality not in MODALITIES:
        raise WorldError(f"unknown modality {modality!r}")
    if not 0 <= grid_index < N_VIEWS:
        raise WorldError(f"grid index {grid_index} outside 0..35")
    if world.external is not None:
        return np.array(world.external[modality][viewpoint, grid_index], dtype=np.float64)
    bank = feature_bank(world.features)
    target = world.exit_cells(viewpoint).get(grid_index)
    if target is None:
        base = {"rgb": bank.rgb[-1], "dep": bank.dep[-1], "nor": bank.nor_wall}[modality]
    elif modality == "rgb":
        base = bank.rgb[world.landmarks[target]]
    elif modality == "dep":
        base = bank.dep[depth_bucket(world.distance(viewpoint, target))]
    else:
        direction = world.positions[target] - world.positions[viewpoint]
        base = (direction / np.linalg.norm(direction)) @ bank.nor_projection
    return base + _noise(world, viewpoint, grid_index, modality)


def observe(world: WorldGraph, node: int) -> Observation:
    if not 0 <= node < world.n_nodes:
        raise WorldError(f"node {node} not in world with {world.n_nodes} nodes")
    key = ("obs", node)
    if key in world._cache:
        return world._cache[key]
    panorama = {}
    for m in MODALITIES:
        pano = np.stack([synthesize_features(world, node, j, m) for j in range(N_VIEWS)])
        pano.setflags(write=False)
        panorama[m] = pano
    candidates = []
    for u in world.neighbors[node]:
        heading, elevation = heading_elevation(world.positions[node], world.positions[u])
        cell = snap_to_grid(heading, elevation)
        candidates.append(Candidate(u, heading, elevation, cell, {m: panorama[m][cell] for m in MODALITIES}))
    obs = Observation(node, panorama, tuple(candidates))
    world._cache[key] = obs
    return obs


# --------------------------------------------------------------------------
# episodes


@dataclass(frozen=True, eq=False)
class Episode:
    world: WorldGraph
    start: int
    goal: int
    path: tuple[int, ...]
    instruction: tuple[int, ...]
    max_steps: int = 15
    seed: int = 0

    @property
    def shortest_length(self) -> float:
        return sum(self.world.distance(a, b) for a, b in zip(self.path, self.path[1:]))


def shortest_path(world: WorldGraph, start: int, goal: int) -> tuple[int, ...]:
    """BFS shortest path; among equal-length paths the lexicographically
    smallest node sequence is returned."""
    to_goal = world.hop_distances(goal)
    if to_goal[start] < 0:
        raise WorldError(f"goal {goal} unreachable from {start}")
    path = [start]
    while path[-1] != goal:
        here = path[-1]
        path.append(min(v for v in world.neighbors[here] if to_goal[v] == to_goal[here] - 1))
    return tuple(path)


def instruction_for(world: WorldGraph, path: tuple[int, ...]) -> tuple[int, ...]:
    return (GO, *(LANDMARK_OFFSET + world.landmarks[v] for v in path[1:]), STOP_TOK)


def make_episode(world: WorldGraph, start: int, goal: int, seed: int = 0, max_steps: int = 15) -> Episode:
    for node in (start, goal):
        if not 0 <= node < world.n_nodes:
            raise WorldError(f"node {node} not in world")
    if start == goal:
        raise WorldError("start and goal must differ")
    path = shortest_path(world, start, goal)
    return Episode(world, start, goal, path, instruction_for(world, path), max_steps, seed)


def teacher_action(episode: Episode, node: int) -> int:
    """0-based teacher action at ``node``; STOP is ``K``."""
    world = episode.world
    nbrs = world.neighbors[node]
    if node == episode.goal:
        return len(nbrs)
    to_goal = world.hop_distances(episode.goal)
    return min(range(len(nbrs)), key=lambda i: (to_goal[nbrs[i]], i))


def step(episode: Episode, node: int, action: int, steps_taken: int) -> tuple[int, bool, float]:
    """Apply a 0-based ``action`` at ``node`` after ``steps_taken`` earlier actions.

    Returns ``(next_node, done, euclidean distance to goal)``.
    """
    world = episode.world
    nbrs = world.neighbors[node]
    if not 0 <= action <= len(nbrs):
        raise WorldError(f"action {action} outside 0..{len(nbrs)} at node {node}")
    if action == len(nbrs):
        return node, True, world.distance(node, episode.goal)
    nxt = nbrs[action]
    return nxt, steps_taken + 1 >= episode.max_steps, world.distance(nxt, episode.goal)


def sample_episodes(
    world: WorldGraph,
    count: int,
    rng: np.random.Generator,
    min_hops: int = 2,
    max_hops: int = 6,
    min_distance: float = 3.0,
    max_steps: int = 15,
) -> list[Episode]:
    """Draw ``count`` episodes whose start-goal pairs satisfy the hop and
    distance bounds.  Returns fewer if the world has too few valid pairs."""
    pairs = []
    for s in range(world.n_nodes):
        hops = world.hop_distances(s)
        for g in range(world.n_nodes):
            if min_hops <= hops[g] <= max_hops and world.distance(s, g) > min_distance:
                pairs.append((s, g))
    if not pairs:
        return []
    picks = rng.choice(len(pairs), size=count, replace=len(pairs) < count)
    return [
        make_episode(world, *pairs[int(i)], seed=int(rng.integers(2**31)), max_steps=max_steps)
        for i in picks
    ]


# --------------------------------------------------------------------------
# serialization


def save_world(world: WorldGraph, path: str | os.PathLike, extra_header: dict[str, str] | None = None) -> None:
    spec = world.features
    lines = [
        "# geovln world v1",
        *(f"# {k}={v}" for k, v in (extra_header or {}).items()),
        f"seed={world.seed}",
        f"n_nodes={world.n_nodes}",
        f"extent={world.extent!r}",
        f"heading_convention={HEADING_CONVENTION}",
        f"elevation_convention={ELEVATION_CONVENTION}",
        f"grid_convention={GRID_CONVENTION}",
        f"feature_dim={spec.dim}",
        f"feature_noise={spec.noise!r}",
        f"n_landmarks={spec.n_landmarks}",
        f"bank_seed={spec.bank_seed}",
        "nodes",
    ]
    for i, (x, y, z) in enumerate(world.positions.tolist()):
        lines.append(f"{i} {x!r} {y!r} {z!r} {world.landmarks[i]}")
    lines.append("edges")
    lines.extend(f"{u} {v}" for u, v in world.edges)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_world(path: str | os.PathLike) -> WorldGraph:
    header: dict[str, str] = {}
    nodes: list[tuple[float, float, float, int]] = []
    edges: list[tuple[int, int]] = []
    section = "header"
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line in ("nodes", "edges"):
                section = line
                continue
            if section == "header":
                key, _, value = line.partition("=")
                header[key] = value
            elif section == "nodes":
                idx, x, y, z, lm = line.split()
                if int(idx) != len(nodes):
                    raise WorldError(f"{path}: node ids must be consecutive from 0")
                nodes.append((float(x), float(y), float(z), int(lm)))
            else:
                u, v = (int(t) for t in line.split())
                edges.append((min(u, v), max(u, v)))
    if int(header.get("n_nodes", -1)) != len(nodes):
        raise WorldError(f"{path}: node count does not match header")
    if header.get("heading_convention", HEADING_CONVENTION) != HEADING_CONVENTION:
        raise WorldError(f"{path}: unsupported heading convention {header['heading_convention']}")
    spec = FeatureSpec(
        dim=int(header["feature_dim"]),
        noise=float(header["feature_noise"]),
        n_landmarks=int(header["n_landmarks"]),
        bank_seed=int(header["bank_seed"]),
    )
    positions = np.array([n[:3] for n in nodes], dtype=np.float64)
    positions.setflags(write=False)
    return WorldGraph(
        positions,
        tuple(n[3] for n in nodes),
        tuple(sorted(set(edges))),
        int(header["seed"]),
        float(header["extent"]),
        spec,
    )


def synthesized_feature_arrays(world: WorldGraph) -> dict[str, np.ndarray]:
    """All panoramas as ``modality -> (n, 36, d)``, the feature-adapter layout."""
    return {m: np.stack([observe(world, v).panorama[m] for v in range(world.n_nodes)]) for m in MODALITIES}
