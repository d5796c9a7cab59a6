import json
import math

import numpy as np
import pytest

from navdistill import world as W


def brute_force_shortest(g, a, b):
    """Enumerate every simple path; min length, ties by smallest node sequence."""
    best = []

    def dfs(path, length):
        u = path[-1]
        if u == b:
            best.append((length, tuple(path)))
            return
        for v, w in g.adj[u]:
            if v not in path:
                dfs(path + [v], length + w)

    dfs([a], 0.0)
    lo = min(L for L, _ in best)
    tied = sorted(p for L, p in best if L <= lo + 1e-9)
    return lo, list(tied[0])


def grid_world(positions, edges, landmarks=None, objects=None, v_land=24, v_obj=16):
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[0]
    if landmarks is None:
        landmarks = [i % v_land for i in range(n)]
    if objects is None:
        objects = [[i % v_obj] for i in range(n)]
    ed = []
    for a, b in edges:
        a, b = min(a, b), max(a, b)
        w = float(np.linalg.norm(positions[a] - positions[b]))
        ed.append((a, b, w))
    return W.WorldGraph(seed=0, positions=positions, landmarks=landmarks,
                        objects=objects, edges=sorted(set(ed)), v_land=v_land,
                        v_obj=v_obj, feature_seed=0)


# ---------------------------------------------------------------------------
# generation


def test_generate_world_deterministic():
    a = W.world_to_json(W.generate_world(seed=7, n_nodes=30))
    b = W.world_to_json(W.generate_world(seed=7, n_nodes=30))
    assert a == b


def test_generate_world_different_seeds_differ():
    a = W.world_to_json(W.generate_world(seed=7, n_nodes=30))
    b = W.world_to_json(W.generate_world(seed=8, n_nodes=30))
    assert a != b


def test_too_few_nodes():
    with pytest.raises(W.TooFewNodes):
        W.generate_world(seed=0, n_nodes=1)


def test_world_connected_and_degree_band():
    # connectivity on every seed; mean degree lands in a sane band on average
    mean_degs = []
    for seed in range(20):
        g = W.generate_world(seed=seed, n_nodes=50, target_degree=3.0)
        dist = g.distances_from(0)
        assert np.all(np.isfinite(dist))
        mean_degs.append(2 * len(g.edges) / g.n_nodes)
    avg = float(np.mean(mean_degs))
    assert 2.0 <= avg <= 5.0, avg


def test_edge_weights_are_euclidean():
    g = W.generate_world(seed=3, n_nodes=25)
    for a, b, w in g.edges:
        d = float(np.linalg.norm(g.positions[a] - g.positions[b]))
        assert abs(w - d) <= 1e-9


def test_no_self_loops_or_duplicates():
    g = W.generate_world(seed=5, n_nodes=40)
    seen = set()
    for a, b, _ in g.edges:
        assert a < b
        assert (a, b) not in seen
        seen.add((a, b))


def test_positions_inside_extent():
    g = W.generate_world(seed=11, n_nodes=60, extent=30.0)
    assert np.all(g.positions >= 0.0) and np.all(g.positions <= 30.0)


# ---------------------------------------------------------------------------
# shortest paths


def test_shortest_path_line():
    g = grid_world([[0, 0], [1, 0], [2, 0]], [(0, 1), (1, 2)])
    length, path = W.shortest_path(g, 0, 2)
    assert path == [0, 1, 2]
    assert abs(length - 2.0) <= 1e-12


def test_shortest_path_same_node():
    g = grid_world([[0, 0], [1, 0]], [(0, 1)])
    assert W.shortest_path(g, 0, 0) == (0.0, [0])


def test_shortest_path_unknown_node():
    g = grid_world([[0, 0], [1, 0]], [(0, 1)])
    with pytest.raises(W.UnknownNode):
        W.shortest_path(g, 0, 9)


def test_tie_break_diamond():
    # two equal-length routes 0-1-3 and 0-2-3; the smaller middle node wins
    g = grid_world([[0, 0], [1, 1], [1, -1], [2, 0]],
                   [(0, 1), (0, 2), (1, 3), (2, 3)])
    length, path = W.shortest_path(g, 0, 3)
    assert path == [0, 1, 3]
    lo, po = brute_force_shortest(g, 0, 3)
    assert path == po and abs(length - lo) <= 1e-9


def test_tie_break_matches_brute_force_fuzz():
    rng = np.random.default_rng(0)
    for trial in range(40):
        n = int(rng.integers(4, 9))
        # snap positions to a grid so exact ties are common
        pos = rng.integers(0, 4, size=(n, 2)).astype(float)
        pos += 1e-4 * np.arange(n)[:, None] * 0  # keep duplicates allowed
        edges = set()
        for i in range(n - 1):
            edges.add((i, i + 1))
        extra = int(rng.integers(1, n))
        for _ in range(extra):
            a, b = rng.integers(0, n, size=2)
            if a != b:
                edges.add((min(int(a), int(b)), max(int(a), int(b))))
        # drop zero-length edges (duplicate grid points) to keep paths well posed
        edges = {(a, b) for a, b in edges
                 if np.linalg.norm(pos[a] - pos[b]) > 1e-9}
        if not edges or len(W._components(n, edges)) != 1:
            continue
        g = grid_world(pos, edges)
        a, b = int(rng.integers(0, n)), int(rng.integers(0, n))
        lo, po = brute_force_shortest(g, a, b)
        length, path = W.shortest_path(g, a, b)
        assert abs(length - lo) <= 1e-9, (trial, a, b)
        assert path == po, (trial, a, b, path, po)


def test_metric_properties_exhaustive():
    # symmetry and triangle inequality over all node triples of small worlds
    for seed in (0, 1):
        g = W.generate_world(seed=seed, n_nodes=12)
        n = g.n_nodes
        d = np.array([g.distances_from(i) for i in range(n)])
        assert np.allclose(d, d.T, atol=1e-9)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    assert d[i, j] <= d[i, k] + d[k, j] + 1e-9


def test_oracle_next_action():
    g = grid_world([[0, 0], [1, 0], [2, 0]], [(0, 1), (1, 2)])
    assert W.oracle_next_action(g, 0, 2) == 1
    assert W.oracle_next_action(g, 1, 2) == 2
    assert W.oracle_next_action(g, 2, 2) == W.STOP


def test_oracle_follows_tie_break():
    g = grid_world([[0, 0], [1, 1], [1, -1], [2, 0]],
                   [(0, 1), (0, 2), (1, 3), (2, 3)])
    assert W.oracle_next_action(g, 0, 3) == 1


def test_oracle_strictly_decreases_distance():
    g = W.generate_world(seed=2, n_nodes=30)
    dist = g.distances_from(17)
    for start in range(g.n_nodes):
        cur = start
        for _ in range(g.n_nodes):
            if cur == 17:
                break
            nxt = W.oracle_next_action(g, cur, 17)
            assert dist[nxt] < dist[cur]
            cur = nxt
        assert cur == 17


# ---------------------------------------------------------------------------
# episodes


def test_episode_two_node_world():
    g = grid_world([[0, 0], [1, 0]], [(0, 1)])
    e = W.generate_episode(g, seed=0, min_hops=1, max_hops=1)
    assert sorted([e.start_node, e.goal_node]) == [0, 1]
    assert e.oracle_path in ((0, 1), (1, 0))


def test_episode_hop_range_respected():
    g = W.generate_world(seed=9, n_nodes=40)
    for s in range(30):
        e = W.generate_episode(g, seed=s, min_hops=5, max_hops=6)
        assert len(e.oracle_path) in (6, 7)


def test_episode_no_feasible_pair():
    g = grid_world([[0, 0], [1, 0]], [(0, 1)])
    with pytest.raises(W.NoFeasiblePair):
        W.generate_episode(g, seed=0, min_hops=5, max_hops=7)


def test_episode_deterministic():
    g = W.generate_world(seed=4, n_nodes=40)
    a = W.generate_episode(g, seed=13, min_hops=2, max_hops=4)
    b = W.generate_episode(g, seed=13, min_hops=2, max_hops=4)
    assert a == b


def test_episode_oracle_path_is_shortest():
    g = W.generate_world(seed=6, n_nodes=40)
    e = W.generate_episode(g, seed=1, min_hops=3, max_hops=6)
    length, path = W.shortest_path(g, e.start_node, e.goal_node)
    assert list(e.oracle_path) == path


def test_instruction_layout():
    g = grid_world([[0, 0], [1, 0], [2, 0]], [(0, 1), (1, 2)],
                   landmarks=[5, 6, 7], objects=[[0], [1], [2]])
    e = W.generate_episode(g, seed=0, min_hops=2, max_hops=2)
    toks = list(e.instruction)
    assert toks[0] == W.BOS and toks[-1] == W.EOS
    assert toks[-3] == W.FIND
    assert toks[-2] == W.object_token(e.target_object, g.v_land)
    # hops use (direction, landmark) pairs in path order
    assert len(toks) == 1 + 2 * e.n_hops + 2 + 1
    for i, (u, v) in enumerate(zip(e.oracle_path[:-1], e.oracle_path[1:])):
        assert toks[1 + 2 * i] == W.direction_token(
            W.direction_bucket(W.bearing(g, u, v)))
        assert toks[2 + 2 * i] == W.landmark_token(g.landmarks[v])
    vs = W.vocab_size(g.v_land, g.v_obj)
    assert all(0 <= t < vs for t in toks)


def test_instruction_without_grounding():
    g = grid_world([[0, 0], [1, 0]], [(0, 1)])
    e = W.generate_episode(g, seed=0, min_hops=1, max_hops=1, grounding=False)
    assert W.FIND not in e.instruction


def test_target_object_present_at_goal():
    g = W.generate_world(seed=12, n_nodes=40)
    for s in range(10):
        e = W.generate_episode(g, seed=s, min_hops=2, max_hops=5)
        assert e.target_object in g.objects[e.goal_node]


def test_direction_bucket_edges():
    assert W.direction_bucket(0.0) == 0
    assert W.direction_bucket(math.pi / 4) == 1
    assert W.direction_bucket(math.pi) == 4
    assert W.direction_bucket(2 * math.pi - 0.01) == 0
    assert W.direction_bucket(math.pi / 8 - 0.01) == 0
    assert W.direction_bucket(math.pi / 8 + 0.01) == 1


# ---------------------------------------------------------------------------
# observations


def test_observation_shape_and_angles():
    g = W.generate_world(seed=0, n_nodes=20)
    obs = W.render_observation(g, 0, noise_seed=0)
    assert obs.views.shape == (36, 32)
    assert obs.angles.shape == (36,)
    assert abs(obs.angles[1] - 2 * math.pi / 36) <= 1e-12


def test_neighbor_at_ten_degrees_maps_to_view_one():
    theta = math.radians(10.0)
    g = grid_world([[0, 0], [math.cos(theta), math.sin(theta)]], [(0, 1)])
    obs = W.render_observation(g, 0, noise_seed=0)
    assert obs.neighbor_view_index[1] == 1


def test_neighbor_view_index_is_angularly_closest():
    g = W.generate_world(seed=3, n_nodes=30)
    obs = W.render_observation(g, 5, noise_seed=0)
    for nb, idx in obs.neighbor_view_index.items():
        theta = W.bearing(g, 5, nb)
        gaps = np.abs((theta - obs.angles + math.pi) % (2 * math.pi) - math.pi)
        assert gaps[idx] <= gaps.min() + 1e-12


def test_observation_noise_free_is_deterministic():
    g = W.generate_world(seed=1, n_nodes=20)
    a = W.render_observation(g, 2, noise_seed=0, sigma=0.0)
    b = W.render_observation(g, 2, noise_seed=99, sigma=0.0)
    assert np.array_equal(a.views, b.views)


def test_observation_same_noise_seed_matches():
    g = W.generate_world(seed=1, n_nodes=20)
    a = W.render_observation(g, 2, noise_seed=7)
    b = W.render_observation(g, 2, noise_seed=7)
    assert np.array_equal(a.views, b.views)
    c = W.render_observation(g, 2, noise_seed=8)
    assert not np.array_equal(a.views, c.views)


def test_observation_unknown_node():
    g = W.generate_world(seed=1, n_nodes=20)
    with pytest.raises(W.UnknownNode):
        W.render_observation(g, 99, noise_seed=0)


def test_landmark_table_shared_across_worlds():
    g1 = W.generate_world(seed=1, n_nodes=20, feature_seed=0)
    g2 = W.generate_world(seed=2, n_nodes=20, feature_seed=0)
    t1 = W.landmark_table(g1.v_land, 32, g1.feature_seed)
    t2 = W.landmark_table(g2.v_land, 32, g2.feature_seed)
    assert t1 is t2


# ---------------------------------------------------------------------------
# serialization


def test_world_json_round_trip():
    g = W.generate_world(seed=21, n_nodes=30)
    text = W.world_to_json(g)
    g2 = W.world_from_json(text)
    assert W.world_to_json(g2) == text
    assert np.array_equal(g.positions, g2.positions)
    assert g.edges == g2.edges


def test_world_json_rejects_bad_format():
    with pytest.raises(ValueError):
        W.world_from_json(json.dumps({"format": "something-else", "version": 1}))
    g = W.generate_world(seed=21, n_nodes=10)
    doc = json.loads(W.world_to_json(g))
    doc["version"] = 99
    with pytest.raises(ValueError):
        W.world_from_json(json.dumps(doc))


def test_episode_json_round_trip():
    g = W.generate_world(seed=21, n_nodes=40)
    eps = [W.generate_episode(g, seed=s, min_hops=2, max_hops=5) for s in range(5)]
    text = W.episodes_to_json(eps, world_seed=g.seed)
    eps2 = W.episodes_from_json(text)
    assert eps2 == eps
    assert W.episodes_to_json(eps2, world_seed=g.seed) == text
