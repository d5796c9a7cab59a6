"""Procedural navigation worlds, episodes, and panoramic observations.

A world is a connected undirected graph in a bounded square: nodes carry a
position, a landmark id, and a few object ids; edge weights are Euclidean
distances.  Episodes pair a start/goal with the oracle shortest path, a
synthetic instruction that encodes that path (direction bucket + landmark
per hop, plus a FIND clause for the target object), and the target object.
Observations split the panorama into K angular views whose features mix a
landmark embedding, a Fourier angle encoding, and Gaussian noise.

Everything is a pure function of (graph, seeds); worlds and episodes are
immutable after creation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

STOP = -1  # action sentinel

# token layout: 4 specials, 8 direction buckets, landmarks, objects
PAD, BOS, EOS, FIND = 0, 1, 2, 3
N_SPECIALS = 4
N_DIRECTIONS = 8


def direction_token(bucket: int) -> int:
    return N_SPECIALS + bucket


def landmark_token(landmark_id: int) -> int:
    return N_SPECIALS + N_DIRECTIONS + landmark_id


def object_token(object_id: int, v_land: int) -> int:
    return N_SPECIALS + N_DIRECTIONS + v_land + object_id


def vocab_size(v_land: int, v_obj: int) -> int:
    return N_SPECIALS + N_DIRECTIONS + v_land + v_obj


class TooFewNodes(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class NoFeasiblePair(RuntimeError):
    """No (start, goal) pair with an in-range hop count was found in the retry budget."""


@dataclass
class WorldGraph:
    seed: int
    positions: np.ndarray            # (n, 2) meters
    landmarks: list[int]             # per node, in [0, v_land)
    objects: list[list[int]]         # per node, ids in [0, v_obj)
    edges: list[tuple[int, int, float]]   # (a, b, weight), a < b
    v_land: int
    v_obj: int
    feature_seed: int
    target_degree: float = 3.0
    extent: float = 30.0
    adj: dict[int, list[tuple[int, float]]] = field(default_factory=dict, repr=False)
    _dist_cache: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.adj:
            self.adj = {i: [] for i in range(self.n_nodes)}
            for a, b, w in self.edges:
                self.adj[a].append((b, w))
                self.adj[b].append((a, w))
            for nbrs in self.adj.values():
                nbrs.sort()

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    def check_node(self, node: int):
        if not 0 <= node < self.n_nodes:
            raise UnknownNode(f"node {node} not in world of {self.n_nodes} nodes")

    def neighbors(self, node: int) -> list[int]:
        self.check_node(node)
        return [v for v, _ in self.adj[node]]

    def edge_weight(self, a: int, b: int) -> float:
        self.check_node(a)
        for v, w in self.adj[a]:
            if v == b:
                return w
        raise UnknownNode(f"no edge between {a} and {b}")

    def distances_from(self, src: int) -> np.ndarray:
        """Dijkstra distances from ``src`` to every node, cached per source."""
        self.check_node(src)
        if src not in self._dist_cache:
            self._dist_cache[src] = _dijkstra(self, src)
        return self._dist_cache[src]


def _dijkstra(g: WorldGraph, src: int) -> np.ndarray:
    import heapq

    dist = np.full(g.n_nodes, np.inf)
    dist[src] = 0.0
    heap = [(0.0, src)]
    done = np.zeros(g.n_nodes, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, w in g.adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def _components(n: int, edges: set[tuple[int, int]]) -> list[list[int]]:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def generate_world(seed: int, n_nodes: int, target_degree: float = 3.0,
                   v_land: int = 24, v_obj: int = 16, extent: float = 30.0,
                   feature_seed: int = 0) -> WorldGraph:
    """A connected world: k-nearest-neighbor edges plus bridges between components.

    ``feature_seed`` drives the landmark appearance tables used by
    ``render_observation``; keeping it equal across worlds makes landmark
    features transfer to unseen layouts.
    """
    if n_nodes < 2:
        raise TooFewNodes(f"need at least 2 nodes, got {n_nodes}")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, extent, size=(n_nodes, 2))
    landmarks = [int(x) for x in rng.integers(0, v_land, size=n_nodes)]
    objects = []
    for _ in range(n_nodes):
        count = int(rng.integers(1, 4))
        objects.append(sorted(int(o) for o in rng.choice(v_obj, size=count, replace=False)))

    k = max(1, int(round(target_degree)))
    diffs = positions[:, None, :] - positions[None, :, :]
    dmat = np.sqrt((diffs ** 2).sum(axis=2))
    edge_set: set[tuple[int, int]] = set()
    for i in range(n_nodes):
        order = np.argsort(dmat[i], kind="stable")
        picked = 0
        for j in order:
            if j == i:
                continue
            edge_set.add((min(i, int(j)), max(i, int(j))))
            picked += 1
            if picked == k:
                break
    # bridge remaining components with the closest cross pair
    while True:
        comps = _components(n_nodes, edge_set)
        if len(comps) == 1:
            break
        base = comps[0]
        best = None
        for other in comps[1:]:
            for a in base:
                for b in other:
                    d = dmat[a, b]
                    if best is None or d < best[0]:
                        best = (d, min(a, b), max(a, b))
        edge_set.add((best[1], best[2]))

    edges = [(a, b, float(dmat[a, b])) for a, b in sorted(edge_set)]
    return WorldGraph(seed=seed, positions=positions, landmarks=landmarks,
                      objects=objects, edges=edges, v_land=v_land, v_obj=v_obj,
                      feature_seed=feature_seed, target_degree=target_degree,
                      extent=extent)


def shortest_path(g: WorldGraph, a: int, b: int) -> tuple[float, list[int]]:
    """Minimal-weight path; exact-tie routes resolve to the lexicographically
    smallest node-id sequence (greedy reconstruction against goal distances)."""
    g.check_node(a)
    g.check_node(b)
    if a == b:
        return 0.0, [a]
    dist_b = g.distances_from(b)
    total = float(dist_b[a])
    path = [a]
    u = a
    while u != b:
        nxt = None
        for v, w in g.adj[u]:  # sorted by id: first hit is the smallest
            if abs(w + dist_b[v] - dist_b[u]) <= 1e-9:
                nxt = v
                break
        path.append(nxt)
        u = nxt
    return total, path


def oracle_next_action(g: WorldGraph, current: int, goal: int) -> int:
    """STOP at the goal, otherwise the next node of the tie-broken shortest path."""
    g.check_node(current)
    g.check_node(goal)
    if current == goal:
        return STOP
    dist = g.distances_from(goal)
    for v, w in g.adj[current]:
        if abs(w + dist[v] - dist[current]) <= 1e-9:
            return v
    raise UnknownNode(f"no shortest-path step from {current} to {goal}")


def bearing(g: WorldGraph, a: int, b: int) -> float:
    """Angle of the a->b direction in [0, 2*pi)."""
    dx, dy = g.positions[b] - g.positions[a]
    return math.atan2(dy, dx) % (2.0 * math.pi)


def direction_bucket(angle: float) -> int:
    return int(math.floor(angle / (2.0 * math.pi) * N_DIRECTIONS + 0.5)) % N_DIRECTIONS


@dataclass(frozen=True)
class Episode:
    seed: int
    start_node: int
    goal_node: int
    target_object: int
    oracle_path: tuple[int, ...]
    instruction: tuple[int, ...]
    min_hops: int
    max_hops: int

    @property
    def n_hops(self) -> int:
        return len(self.oracle_path) - 1


def make_instruction(g: WorldGraph, oracle_path, target_object: int,
                     grounding: bool = True) -> tuple[int, ...]:
    toks = [BOS]
    for u, v in zip(oracle_path[:-1], oracle_path[1:]):
        toks.append(direction_token(direction_bucket(bearing(g, u, v))))
        toks.append(landmark_token(g.landmarks[v]))
    if grounding:
        toks.append(FIND)
        toks.append(object_token(target_object, g.v_land))
    toks.append(EOS)
    return tuple(toks)


def generate_episode(g: WorldGraph, seed: int, min_hops: int = 4, max_hops: int = 7,
                     grounding: bool = True, max_retries: int = 1000) -> Episode:
    """Uniformly sampled (start, goal) with an in-range shortest-path hop count."""
    rng = np.random.default_rng([g.seed, seed])
    for _ in range(max_retries):
        start = int(rng.integers(0, g.n_nodes))
        goal = int(rng.integers(0, g.n_nodes))
        if start == goal:
            continue
        length, path = shortest_path(g, start, goal)
        hops = len(path) - 1
        if not min_hops <= hops <= max_hops:
            continue
        target = int(rng.choice(g.objects[goal]))
        return Episode(seed=seed, start_node=start, goal_node=goal, target_object=target,
                       oracle_path=tuple(path),
                       instruction=make_instruction(g, path, target, grounding),
                       min_hops=min_hops, max_hops=max_hops)
    raise NoFeasiblePair(
        f"no (start, goal) with hops in [{min_hops}, {max_hops}] after {max_retries} tries")


# ---------------------------------------------------------------------------
# observations


@dataclass
class Observation:
    views: np.ndarray                 # (K, D_v)
    angles: np.ndarray                # (K,)
    neighbor_view_index: dict[int, int]


_table_cache: dict[tuple[int, int, int], np.ndarray] = {}


def landmark_table(v_land: int, d_v: int, feature_seed: int) -> np.ndarray:
    """Per-landmark appearance vectors (last row is the background)."""
    key = (v_land, d_v, feature_seed)
    if key not in _table_cache:
        rng = np.random.default_rng([feature_seed, 1_000_003])
        _table_cache[key] = rng.standard_normal((v_land + 1, d_v))
    return _table_cache[key]


def angle_encoding(angle: float, d_v: int) -> np.ndarray:
    """Fourier features (sin m*a, cos m*a) for harmonics m = 1..d_v/2."""
    m = np.arange(1, d_v // 2 + 1)
    enc = np.empty(d_v)
    enc[0::2] = np.sin(m * angle)
    enc[1::2] = np.cos(m * angle)
    return enc


_angle_cache: dict[tuple[int, int], np.ndarray] = {}


def _angle_matrix(k: int, d_v: int) -> np.ndarray:
    if (k, d_v) not in _angle_cache:
        angles = 2.0 * math.pi * np.arange(k) / k
        _angle_cache[(k, d_v)] = np.stack(
            [angle_encoding(a, d_v) for a in angles])
    return _angle_cache[(k, d_v)]


def render_observation(g: WorldGraph, node: int, noise_seed: int, k: int = 36,
                       d_v: int = 32, sigma: float = 0.05) -> Observation:
    """K angular views around ``node``: the view facing a neighbor shows that
    neighbor's landmark, the rest show background; plus angle encoding and noise."""
    g.check_node(node)
    angles = 2.0 * math.pi * np.arange(k) / k
    table = landmark_table(g.v_land, d_v, g.feature_seed)

    content = np.full(k, g.v_land)   # background row
    claim: dict[int, tuple[float, int]] = {}
    neighbor_view_index: dict[int, int] = {}
    for nb in g.neighbors(node):
        theta = bearing(g, node, nb)
        idx = int(round(theta / (2.0 * math.pi) * k)) % k
        neighbor_view_index[nb] = idx
        gap = abs((theta - angles[idx] + math.pi) % (2.0 * math.pi) - math.pi)
        if idx not in claim or (gap, nb) < claim[idx]:
            claim[idx] = (gap, nb)
    for idx, (_, nb) in claim.items():
        content[idx] = g.landmarks[nb]

    views = table[content] + _angle_matrix(k, d_v)
    if sigma > 0:
        rng = np.random.default_rng([g.seed, noise_seed, node])
        views += sigma * rng.standard_normal((k, d_v))
    return Observation(views=views, angles=angles, neighbor_view_index=neighbor_view_index)


# ---------------------------------------------------------------------------
# serialization (versioned JSON with seeds for provenance)

WORLD_FORMAT = "navdistill-world"
EPISODE_FORMAT = "navdistill-episodes"
FORMAT_VERSION = 1


def world_to_json(g: WorldGraph) -> str:
    doc = {
        "format": WORLD_FORMAT,
        "version": FORMAT_VERSION,
        "seed": g.seed,
        "feature_seed": g.feature_seed,
        "target_degree": g.target_degree,
        "extent": g.extent,
        "v_land": g.v_land,
        "v_obj": g.v_obj,
        "positions": [[float(x), float(y)] for x, y in g.positions],
        "landmarks": list(g.landmarks),
        "objects": [list(o) for o in g.objects],
        "edges": [[a, b, w] for a, b, w in g.edges],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def world_from_json(text: str) -> WorldGraph:
    doc = json.loads(text)
    if doc.get("format") != WORLD_FORMAT:
        raise ValueError(f"not a world document: format={doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported world version {doc.get('version')!r}")
    return WorldGraph(seed=doc["seed"], positions=np.array(doc["positions"]),
                      landmarks=list(doc["landmarks"]),
                      objects=[list(o) for o in doc["objects"]],
                      edges=[(int(a), int(b), float(w)) for a, b, w in doc["edges"]],
                      v_land=doc["v_land"], v_obj=doc["v_obj"],
                      feature_seed=doc["feature_seed"],
                      target_degree=doc["target_degree"], extent=doc["extent"])


def episodes_to_json(episodes: list[Episode], world_seed: int) -> str:
    doc = {
        "format": EPISODE_FORMAT,
        "version": FORMAT_VERSION,
        "world_seed": world_seed,
        "episodes": [
            {
                "seed": e.seed,
                "start": e.start_node,
                "goal": e.goal_node,
                "target_object": e.target_object,
                "oracle_path": list(e.oracle_path),
                "instruction": list(e.instruction),
                "min_hops": e.min_hops,
                "max_hops": e.max_hops,
            }
            for e in episodes
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def episodes_from_json(text: str) -> list[Episode]:
    doc = json.loads(text)
    if doc.get("format") != EPISODE_FORMAT:
        raise ValueError(f"not an episode document: format={doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported episode version {doc.get('version')!r}")
    return [
        Episode(seed=e["seed"], start_node=e["start"], goal_node=e["goal"],
                target_object=e["target_object"], oracle_path=tuple(e["oracle_path"]),
                instruction=tuple(e["instruction"]), min_hops=e["min_hops"],
                max_hops=e["max_hops"])
        for e in doc["episodes"]
    ]
