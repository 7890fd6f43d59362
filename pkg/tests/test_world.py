from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geovln.world import (
    DEPTH_BUCKET_EDGES,
    GO,
    LANDMARK_OFFSET,
    MODALITIES,
    N_VIEWS,
    STOP_TOK,
    FeatureSpec,
    WorldError,
    WorldGraph,
    depth_bucket,
    feature_bank,
    generate_world,
    grid_angles,
    heading_elevation,
    load_world,
    make_episode,
    observe,
    sample_episodes,
    save_world,
    shortest_path,
    snap_to_grid,
    step,
    synthesize_features,
    teacher_action,
)


def _floyd_warshall(world: WorldGraph) -> np.ndarray:
    n = world.n_nodes
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0)
    for u, v in world.edges:
        d[u, v] = d[v, u] = 1
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


def _all_shortest_paths(world, start, goal, fw):
    out = []

    def walk(path):
        here = path[-1]
        if here == goal:
            out.append(tuple(path))
            return
        for v in world.neighbors[here]:
            if fw[v, goal] == fw[here, goal] - 1:
                walk(path + [v])

    walk([start])
    return out


def _two_node_world(b=(5.0, 0.0, 0.0)):
    pos = np.array([[0.0, 0.0, 0.0], b])
    return WorldGraph(pos, (0, 1), ((0, 1),), seed=0)


def test_two_node_world_single_edge():
    w = generate_world(2, seed=1)
    assert w.edges == ((0, 1),)
    assert [len(n) for n in w.neighbors] == [1, 1]


def test_generation_is_deterministic():
    a, b = generate_world(30, seed=9), generate_world(30, seed=9)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.edges == b.edges and a.landmarks == b.landmarks
    assert generate_world(30, seed=10).positions.tobytes() != a.positions.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_fifty_node_world_invariants(seed):
    w = generate_world(50, k_nearest=3, seed=seed)
    fw = _floyd_warshall(w)
    assert np.isfinite(fw).all()
    degrees = [len(n) for n in w.neighbors]
    assert 1 <= min(degrees) and max(degrees) <= 36
    assert all(u != v for u, v in w.edges)
    assert len({tuple(p) for p in w.positions.tolist()}) == 50
    assert (w.positions[:, :2] >= 0).all() and (w.positions[:, :2] <= 20).all()
    assert (w.positions[:, 2] >= 0).all() and (w.positions[:, 2] <= 5).all()


def test_grid_enumeration():
    assert grid_angles(0) == (0.0, -30.0)
    assert grid_angles(12 + 3) == (90.0, 0.0)
    assert grid_angles(35) == (330.0, 30.0)
    assert [snap_to_grid(*grid_angles(j)) for j in range(N_VIEWS)] == list(range(N_VIEWS))
    with pytest.raises(WorldError):
        grid_angles(36)


def test_east_neighbor_geometry():
    w = _two_node_world()
    obs = observe(w, 0)
    (c,) = obs.candidates
    assert c.heading == pytest.approx(90.0) and c.elevation == pytest.approx(0.0)
    assert c.grid_index == 12 + 3
    assert heading_elevation(np.zeros(3), np.array([0.0, 1.0, 0.0]))[0] == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_snap_within_fifteen_degrees(seed):
    w = generate_world(40, seed=seed)
    for v in range(w.n_nodes):
        for c in observe(w, v).candidates:
            gh, ge = grid_angles(c.grid_index)
            dh = abs(c.heading - gh) % 360
            assert min(dh, 360 - dh) <= 15 + 1e-9
            assert abs(c.elevation - ge) <= 15 + 1e-9


def test_observation_contract(world20):
    for v in range(world20.n_nodes):
        obs = observe(world20, v)
        assert len(obs.candidates) == len(world20.neighbors[v])
        assert [c.target_node for c in obs.candidates] == list(world20.neighbors[v])
        for m in MODALITIES:
            assert obs.panorama[m].shape == (36, 64)
            for c in obs.candidates:
                assert c.features[m].tobytes() == obs.panorama[m][c.grid_index].tobytes()
    with pytest.raises(WorldError):
        observe(world20, world20.n_nodes)


def test_observe_is_pure(world20):
    fresh = load_world_copy(world20)
    a, b = observe(world20, 3), observe(fresh, 3)
    for m in MODALITIES:
        assert a.panorama[m].tobytes() == b.panorama[m].tobytes()
    assert synthesize_features(world20, 3, 7, "dep").tobytes() == synthesize_features(fresh, 3, 7, "dep").tobytes()


def load_world_copy(w):
    return WorldGraph(w.positions, w.landmarks, w.edges, w.seed, w.extent, w.features)


def test_wall_cells_differ_only_by_noise(world20):
    node = 0
    exits = world20.exit_cells(node)
    walls = [j for j in range(N_VIEWS) if j not in exits][:2]
    for m in MODALITIES:
        a, b = (synthesize_features(world20, node, j, m) for j in walls)
        cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        assert cos > 0.99


def test_depth_buckets():
    assert depth_bucket(1.0) != depth_bucket(9.0)
    assert depth_bucket(1.0) == DEPTH_BUCKET_EDGES.index(1.0)
    assert depth_bucket(9.0) == DEPTH_BUCKET_EDGES.index(10.0)
    assert depth_bucket(100.0) == len(DEPTH_BUCKET_EDGES)
    near, far = _two_node_world((1.0, 0.0, 0.0)), _two_node_world((9.0, 0.0, 0.0))
    bank = feature_bank(FeatureSpec())
    fn = synthesize_features(near, 0, 15, "dep")
    ff = synthesize_features(far, 0, 15, "dep")
    assert np.abs(fn - bank.dep[depth_bucket(1.0)]).max() < 0.5
    assert np.abs(ff - bank.dep[depth_bucket(9.0)]).max() < 0.5
    assert np.abs(fn - ff).max() > 0.5


def test_landmark_features_shared_across_worlds():
    a, b = generate_world(20, seed=1), generate_world(20, seed=2)
    bank = feature_bank(a.features)
    for w in (a, b):
        for cell, u in w.exit_cells(0).items():
            f = synthesize_features(w, 0, cell, "rgb")
            assert np.abs(f - bank.rgb[w.landmarks[u]]).max() < 0.4


@pytest.mark.parametrize("seed", range(3))
def test_shortest_paths_against_floyd_warshall(seed):
    w = generate_world(50, seed=seed)
    fw = _floyd_warshall(w)
    rng = np.random.default_rng(seed)
    for _ in range(40):
        s, g = (int(x) for x in rng.choice(50, 2, replace=False))
        path = shortest_path(w, s, g)
        assert len(path) - 1 == fw[s, g]
        assert all(w.is_adjacent(a, b) for a, b in zip(path, path[1:]))
        assert path == min(_all_shortest_paths(w, s, g, fw))


def test_adjacent_episode():
    w = generate_world(20, seed=4)
    u = w.neighbors[0][0]
    ep = make_episode(w, 0, u)
    assert ep.path == (0, u)
    assert ep.instruction == (GO, LANDMARK_OFFSET + w.landmarks[u], STOP_TOK)
    assert ep.max_steps == 15


def test_tie_break_prefers_smaller_sequence():
    # square 0-1-3, 0-2-3: two shortest paths, 0,1,3 wins
    pos = np.array([[0, 0, 0], [4, 0, 0], [0, 4, 0], [4, 4, 0]], dtype=float)
    w = WorldGraph(pos, (0, 1, 2, 3), ((0, 1), (0, 2), (1, 3), (2, 3)), seed=0)
    assert make_episode(w, 0, 3).path == (0, 1, 3)
    assert make_episode(w, 3, 0).path == (3, 1, 0)


def test_make_episode_errors():
    w = WorldGraph(np.eye(3) * 5, (0, 1, 2), ((0, 1),), seed=0)
    with pytest.raises(WorldError):
        make_episode(w, 0, 2)
    with pytest.raises(WorldError):
        make_episode(w, 1, 1)


def test_instruction_follows_path(world20):
    ep = make_episode(world20, 0, 17)
    assert ep.instruction[0] == GO and ep.instruction[-1] == STOP_TOK
    assert [t - LANDMARK_OFFSET for t in ep.instruction[1:-1]] == [world20.landmarks[v] for v in ep.path[1:]]


def test_teacher_recovers_from_wrong_moves():
    w = generate_world(50, seed=2)
    fw = _floyd_warshall(w)
    rng = np.random.default_rng(0)
    for _ in range(30):
        s, g = (int(x) for x in rng.choice(50, 2, replace=False))
        ep = make_episode(w, s, g)
        node = int(rng.integers(50))
        a = teacher_action(ep, node)
        nbrs = w.neighbors[node]
        if node == g:
            assert a == len(nbrs)
            continue
        best = min(fw[v, g] for v in nbrs)
        assert fw[nbrs[a], g] == best == fw[node, g] - 1
        assert a == min(i for i, v in enumerate(nbrs) if fw[v, g] == best)


def test_teacher_rollout_reaches_goal(world20):
    eps = sample_episodes(world20, 30, np.random.default_rng(1))
    for ep in eps:
        node, t = ep.start, 0
        visited = [node]
        while True:
            a = teacher_action(ep, node)
            node, done, dist = step(ep, node, a, t)
            t += 1
            if done:
                break
            visited.append(node)
        assert node == ep.goal and dist == 0.0
        assert tuple(visited) == ep.path


def test_step_rules(world20):
    ep = make_episode(world20, 0, 17, max_steps=15)
    k = len(world20.neighbors[0])
    assert step(ep, 0, k, 0) == (0, True, world20.distance(0, 17))
    nxt, done, _ = step(ep, 0, 0, 0)
    assert nxt == world20.neighbors[0][0] and not done
    assert step(ep, 0, 0, 14)[1]
    with pytest.raises(WorldError):
        step(ep, 0, k + 1, 0)
    goal_ep = make_episode(world20, 17, 0)
    assert step(goal_ep, 0, len(world20.neighbors[0]), 3) == (0, True, 0.0)


def test_sample_episodes_bounds(world20):
    eps = sample_episodes(world20, 50, np.random.default_rng(2), min_hops=2, max_hops=4, min_distance=3.0)
    assert len(eps) == 50
    for ep in eps:
        assert 2 <= len(ep.path) - 1 <= 4
        assert world20.distance(ep.start, ep.goal) > 3.0
    assert sample_episodes(generate_world(2), 5, np.random.default_rng(0)) == []


def test_world_file_round_trip(tmp_path, world20):
    path = tmp_path / "w.txt"
    save_world(world20, path)
    back = load_world(path)
    assert back.positions.tobytes() == world20.positions.tobytes()
    assert back.edges == world20.edges and back.landmarks == world20.landmarks
    assert back.seed == world20.seed and back.features == world20.features
    text = path.read_text()
    assert "heading_convention=clockwise_from_+y_degrees" in text
    save_world(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_external_features_override(world20):
    ext = {m: np.full((world20.n_nodes, 36, 5), i, dtype=np.float64) for i, m in enumerate(MODALITIES)}
    w = world20.with_features(ext)
    obs = observe(w, 2)
    assert obs.panorama["dep"].shape == (36, 5) and (obs.panorama["dep"] == 1).all()
    with pytest.raises(WorldError):
        world20.with_features({m: np.zeros((3, 36, 5)) for m in MODALITIES})


@settings(max_examples=200, deadline=None)
@given(st.floats(-720, 720, allow_nan=False), st.floats(-89, 89))
def test_snap_is_nearest_cell(heading, elevation):
    cell = snap_to_grid(heading, elevation)
    h, e = grid_angles(cell)
    dh = abs(heading % 360 - h) % 360
    assert min(dh, 360 - dh) <= 15 + 1e-9
    if abs(elevation) <= 45:
        assert abs(elevation - e) <= 15 + 1e-9
    assert math.isfinite(h)
