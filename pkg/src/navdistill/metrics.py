"""Evaluation: episode rollouts, navigation/grounding metrics, latency bench.

Success is exact goal-node arrival (the graph is discrete, so no radius).
Path length sums every traversed edge, including the shortest known-graph
walk behind a jump to a non-adjacent ghost and any revisits that walk incurs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import world as W


class EmptyBenchmark(ValueError):
    pass


@dataclass
class EpisodeResult:
    episode_seed: int
    taken_path: list[int]
    path_length: float          # p, meters
    oracle_length: float        # l, meters
    stopped: bool
    success: bool
    object_choice: int | None = None
    grounding_success: bool = False

    def __post_init__(self):
        assert self.path_length >= 0
        assert not self.success or self.stopped
        assert not self.grounding_success or self.success


def rollout(model: M.DuetModel | None, episode: W.Episode, g: W.WorldGraph,
            mode="greedy", rng: np.random.Generator | None = None,
            t_max: int = 15, grounding: bool = True) -> EpisodeResult:
    """Run the policy from the start node until STOP or the step cap.

    ``mode`` is "greedy", "sample", "oracle" (follow the shortest path;
    no model required), or a callable (fused_logits, tmap, node) -> action
    for constructed policies in tests.
    """
    start, goal = episode.start_node, episode.goal_node
    oracle_length, _ = W.shortest_path(g, start, goal)
    node = start
    path = [start]
    length = 0.0
    fine_cls = None
    needs_model = mode != "oracle"
    if needs_model and model is None:
        raise ValueError("rollout needs a model unless mode='oracle'")
    if needs_model:
        f_L, _ = model.encode_instruction(model.embed_instruction(episode.instruction))
        tmap = M.TopoMap(world=g)
    for step in range(t_max):
        if needs_model:
            obs = W.render_observation(g, node, noise_seed=episode.seed * 101 + step)
            rel = (g.positions[node] - g.positions[start]) / g.extent
            h_t, _ = model.encode_panorama(obs, rel)
            M.update_topo_map(tmap, node, obs, h_t)
            tmap.freeze_features()
            co = model.coarse_forward(f_L, tmap)
            fi = model.fine_forward(f_L, h_t)
            fused = model.fuse_scores(co, fi, tmap, obs.neighbor_view_index)
            fine_cls = fi.cls
        if mode == "oracle":
            action = W.oracle_next_action(g, node, goal)
        elif callable(mode):
            action = mode(fused, tmap, node)
        else:
            action = model.predict_action(fused, mode=mode, rng=rng)
        if action == M.STOP:
            break
        hop_length, hop_path = W.shortest_path(g, node, action)
        length += hop_length
        path.extend(hop_path[1:])
        node = action
    success = node == goal
    choice = None
    gsuccess = False
    if grounding and model is not None and fine_cls is not None:
        objs = g.objects[node]
        if objs:
            scores = model.ground_scores(fine_cls, objs)
            choice = int(objs[int(np.argmax(scores))])
            gsuccess = success and choice == episode.target_object
    return EpisodeResult(episode_seed=episode.seed, taken_path=path,
                         path_length=length, oracle_length=oracle_length,
                         stopped=True, success=success, object_choice=choice,
                         grounding_success=gsuccess)


# ---------------------------------------------------------------------------
# metrics


def _weight(r: EpisodeResult) -> float:
    denom = max(r.path_length, r.oracle_length)
    if denom == 0.0:
        return 1.0       # start == goal and no movement
    return r.oracle_length / denom


def success_rate(results: list[EpisodeResult]) -> float:
    if not results:
        return 0.0
    return sum(r.success for r in results) / len(results)


def spl(results: list[EpisodeResult]) -> float:
    if not results:
        return 0.0
    return sum(_weight(r) for r in results if r.success) / len(results)


def rgs_rgspl(results: list[EpisodeResult]) -> tuple[float, float]:
    if not results:
        return 0.0, 0.0
    rgs = sum(r.grounding_success for r in results) / len(results)
    rgspl = sum(_weight(r) for r in results if r.grounding_success) / len(results)
    return rgs, rgspl


def evaluate(model: M.DuetModel, episodes: list[W.Episode], g: W.WorldGraph,
             t_max: int = 15) -> dict:
    results = [rollout(model, ep, g, mode="greedy", t_max=t_max)
               for ep in episodes]
    rgs, rgspl = rgs_rgspl(results)
    return {"sr": success_rate(results), "spl": spl(results),
            "rgs": rgs, "rgspl": rgspl, "n": len(results)}


# ---------------------------------------------------------------------------
# latency


def bench_latency(model: M.DuetModel, episodes: list[W.Episode],
                  g: W.WorldGraph, repeats: int = 1, t_max: int = 15) -> dict:
    """Wall-clock greedy-rollout timing, single-threaded, first pass warmed up."""
    if repeats < 1 or not episodes:
        raise EmptyBenchmark(f"repeats={repeats}, episodes={len(episodes)}")
    rollout(model, episodes[0], g, mode="greedy", t_max=t_max)   # warmup
    per_episode_ms = []
    for _ in range(repeats):
        for ep in episodes:
            t0 = time.perf_counter()
            rollout(model, ep, g, mode="greedy", t_max=t_max)
            per_episode_ms.append((time.perf_counter() - t0) * 1000.0)
    arr = np.array(per_episode_ms)
    return {"median_ms": float(np.median(arr)),
            "p90_ms": float(np.percentile(arr, 90)),
            "mean_ms": float(arr.mean()),
            "per_episode_ms": per_episode_ms,
            "params": model.n_params()}


def compare_latency(teacher: M.DuetModel, student: M.DuetModel,
                    episodes: list[W.Episode], g: W.WorldGraph,
                    repeats: int = 1, t_max: int = 15) -> dict:
    tea = bench_latency(teacher, episodes, g, repeats=repeats, t_max=t_max)
    stu = bench_latency(student, episodes, g, repeats=repeats, t_max=t_max)
    return {"teacher": tea, "student": stu,
            "speedup": tea["median_ms"] / stu["median_ms"],
            "param_ratio": student.n_params() / teacher.n_params()}
