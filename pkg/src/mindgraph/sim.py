"""Synthetic pedestrian episodes over a :class:`~mindgraph.graph.SpatialGraph`.

Every random draw comes from a stream derived from ``(master_seed, purpose,
*keys)`` through :class:`numpy.random.SeedSequence` spawn keys, so results do
not depend on generation order or thread count.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import (
    GraphError,
    NoPathError,
    SpatialGraph,
    k_shortest_paths,
    shortest_path,
)

TEST_FRACTION = 0.3
DEFAULT_TAU = 0.2
DEFAULT_ALPHA = 0.5
KL_EPS = 1e-12

# stream purposes
_PROFILES, _EPISODES, _DRIFT = 1, 2, 3


class SimulationError(RuntimeError):
    pass


def stream(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``keys`` under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed: int, *keys: int) -> int:
    """A 32-bit seed for a sub-run (e.g. the drifted dataset) derived from ``master_seed``."""
    return int(np.random.SeedSequence(master_seed, spawn_key=keys).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class AgentProfile:
    agent_id: int
    preferences: np.ndarray
    rationality_temperature: float = DEFAULT_TAU
    attempts: int = 1

    def __post_init__(self):
        p = np.asarray(self.preferences, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"agent {self.agent_id}: preferences must lie on the simplex")
        if not self.rationality_temperature > 0:
            raise ValueError("rationality_temperature must be positive")
        object.__setattr__(self, "preferences", p)

    @property
    def favourite(self) -> int:
        """Index of the most preferred goal (lowest index on ties)."""
        return int(np.argmax(self.preferences))

    @property
    def least_favourite(self) -> int:
        return int(np.argmin(self.preferences))


@dataclass(frozen=True)
class Episode:
    agent_id: int
    episode_id: int
    path: tuple[int, ...]
    timestamps: tuple[int, ...]
    origin: int
    goal: int
    split: str = "train"
    goal_hidden: bool = False

    def __len__(self):
        return len(self.path)

    def to_record(self) -> dict:
        return {
            "agent": self.agent_id,
            "episode": self.episode_id,
            "origin": self.origin,
            "goal": self.goal,
            "path": list(self.path),
            "ts": list(self.timestamps),
            "split": self.split,
        }

    @classmethod
    def from_record(cls, rec: dict) -> Episode:
        return cls(
            agent_id=int(rec["agent"]),
            episode_id=int(rec["episode"]),
            path=tuple(int(v) for v in rec["path"]),
            timestamps=tuple(int(t) for t in rec["ts"]),
            origin=int(rec["origin"]),
            goal=int(rec["goal"]),
            split=rec.get("split", "train"),
        )


@dataclass(frozen=True)
class FalseGoalInfo:
    false_goal: int
    pass_index: int


@dataclass
class Dataset:
    graph_hash: str
    episodes: list[Episode]
    master_seed: int
    params: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Episode]:
        return [e for e in self.episodes if e.split == name]

    @property
    def train(self) -> list[Episode]:
        return self.split("train")

    @property
    def test(self) -> list[Episode]:
        return self.split("test")

    def header(self) -> dict:
        return {
            "graph_hash": self.graph_hash,
            "master_seed": self.master_seed,
            "params": self.params,
            "num_episodes": len(self.episodes),
        }


def validate_episode(g: SpatialGraph, e: Episode) -> None:
    if not e.path:
        raise SimulationError(f"episode {e.agent_id}/{e.episode_id}: empty path")
    if e.path[0] != e.origin:
        raise SimulationError(f"episode {e.agent_id}/{e.episode_id}: path does not start at origin")
    if not e.goal_hidden and e.path[-1] != e.goal:
        raise SimulationError(f"episode {e.agent_id}/{e.episode_id}: path does not end at goal")
    if len(e.timestamps) != len(e.path):
        raise SimulationError(f"episode {e.agent_id}/{e.episode_id}: timestamp count mismatch")
    if any(b - a != 1 for a, b in zip(e.timestamps[:-1], e.timestamps[1:])):
        raise SimulationError(f"episode {e.agent_id}/{e.episode_id}: timestamps must step by 1")
    for u, v in zip(e.path[:-1], e.path[1:]):
        if not g.has_edge(u, v):
            raise SimulationError(f"episode {e.agent_id}/{e.episode_id}: ({u}, {v}) is not an edge")


# ---------------------------------------------------------------- profiles

def sample_agent_profiles(
    g: SpatialGraph,
    num_agents: int,
    dirichlet_alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
    tau: float = DEFAULT_TAU,
) -> list[AgentProfile]:
    if num_agents < 1:
        raise ValueError("num_agents must be >= 1")
    if not dirichlet_alpha > 0:
        raise ValueError("dirichlet_alpha must be positive")
    if g.num_goals == 0:
        raise GraphError("goal set is empty")
    return [
        AgentProfile(a, _dirichlet(stream(seed, _PROFILES, a), dirichlet_alpha, g.num_goals), tau)
        for a in range(num_agents)
    ]


def _dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    p = rng.dirichlet(np.full(k, alpha))
    return p / p.sum()


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; ``q`` is clamped at 1e-12 and renormalised."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a probability vector")
    q = np.maximum(q, KL_EPS)
    q = q / q.sum()
    nz = p > 0
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / q[nz]))))


def generate_drifted_profiles(
    profiles: list[AgentProfile],
    kl_threshold: float = 1.0,
    dirichlet_alpha: float = DEFAULT_ALPHA,
    seed: int = 0,
    max_attempts: int = 10_000,
) -> list[AgentProfile]:
    """Redraw each agent's preferences until KL(original || new) exceeds the threshold."""
    if not kl_threshold >= 0:
        raise ValueError("kl_threshold must be non-negative")
    out = []
    for prof in profiles:
        rng = stream(seed, _DRIFT, prof.agent_id)
        k = len(prof.preferences)
        for attempt in range(1, max_attempts + 1):
            new = _dirichlet(rng, dirichlet_alpha, k)
            if kl_divergence(prof.preferences, new) > kl_threshold:
                out.append(replace(prof, preferences=new, attempts=attempt))
                break
        else:
            raise SimulationError(
                f"agent {prof.agent_id}: no draw exceeded KL {kl_threshold} in {max_attempts} attempts"
            )
    return out


# ---------------------------------------------------------------- episodes

def path_choice_probabilities(lengths, tau: float) -> np.ndarray:
    """Softmax over ``-length_j / (tau * length_1)``; shortest path first."""
    lengths = np.asarray(lengths, dtype=np.float64)
    scale = tau * lengths[0] if lengths[0] > 0 else tau
    logits = -lengths / scale
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


class PathCache:
    """Memoised k-shortest-path queries for one graph."""

    def __init__(self, g: SpatialGraph):
        self.g = g
        self._cache: dict[tuple[int, int, int], list] = {}

    def __call__(self, src: int, dst: int, k: int):
        key = (src, dst, k)
        hit = self._cache.get(key)
        if hit is None:
            hit = k_shortest_paths(self.g, src, dst, k)
            self._cache[key] = hit
        return hit


def generate_episode(
    g: SpatialGraph,
    profile: AgentProfile,
    episode_id: int,
    k_paths: int,
    rng: np.random.Generator,
    max_retries: int = 100,
    paths: PathCache | None = None,
) -> Episode:
    paths = paths or PathCache(g)
    goal = g.goals[int(rng.choice(g.num_goals, p=profile.preferences))]
    candidates = None
    for _ in range(max_retries):
        origin = int(rng.integers(g.num_nodes - 1))
        if origin >= goal:
            origin += 1
        try:
            candidates = paths(origin, goal, k_paths)
            break
        except NoPathError:
            continue
    if candidates is None:
        raise SimulationError(
            f"agent {profile.agent_id} episode {episode_id}: goal {goal} unreachable "
            f"from {max_retries} sampled origins (last tried {origin})"
        )
    probs = path_choice_probabilities([p.length for p in candidates], profile.rationality_temperature)
    chosen = candidates[int(rng.choice(len(candidates), p=probs))]
    return Episode(
        agent_id=profile.agent_id,
        episode_id=episode_id,
        path=chosen.nodes,
        timestamps=tuple(range(1, len(chosen.nodes) + 1)),
        origin=origin,
        goal=goal,
    )


def generate_dataset(
    g: SpatialGraph,
    profiles: list[AgentProfile],
    episodes_per_agent: int,
    k_paths: int = 5,
    master_seed: int = 0,
    test_fraction: float = TEST_FRACTION,
    threads: int = 1,
) -> Dataset:
    """Simulate ``episodes_per_agent`` episodes per profile.

    The last ``round(test_fraction * n)`` episode ids of each agent form the
    test split.
    """
    if episodes_per_agent < 1:
        raise ValueError("episodes_per_agent must be >= 1")
    cache = PathCache(g)
    n_test = int(math.floor(test_fraction * episodes_per_agent + 0.5))

    def one_agent(prof: AgentProfile) -> list[Episode]:
        eps = []
        for i in range(episodes_per_agent):
            e = generate_episode(g, prof, i, k_paths, stream(master_seed, _EPISODES, prof.agent_id, i), paths=cache)
            split = "test" if i >= episodes_per_agent - n_test else "train"
            eps.append(replace(e, split=split))
        return eps

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(one_agent, profiles))
    else:
        chunks = [one_agent(p) for p in profiles]
    episodes = sorted((e for c in chunks for e in c), key=lambda e: (e.agent_id, e.episode_id))
    params = {
        "episodes_per_agent": episodes_per_agent,
        "k_paths": k_paths,
        "test_fraction": test_fraction,
        "num_agents": len(profiles),
        "tau": profiles[0].rationality_temperature if profiles else DEFAULT_TAU,
    }
    return Dataset(g.content_hash(), episodes, master_seed, params)


def truncate(e: Episode, fraction: float) -> Episode:
    """Prefix with ``ceil(fraction * T)`` steps (at least one); goal kept but hidden."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = prefix_length(len(e.path), fraction)
    return replace(e, path=e.path[:n], timestamps=e.timestamps[:n], goal_hidden=True)


def prefix_length(T: int, fraction: float) -> int:
    # the 1e-9 guard keeps products like 0.7 * 10 from rounding up
    return max(1, min(T, math.ceil(fraction * T - 1e-9)))


# ---------------------------------------------------------------- false goals

def synthesize_false_goal_episode(
    g: SpatialGraph,
    profile: AgentProfile,
    near_radius: float | None = None,
    episode_id: int = 0,
    max_overhead: float = 0.5,
) -> tuple[Episode, FalseGoalInfo]:
    """Route to the favourite goal through a waypoint close to the least-favourite one.

    Origins are scanned by increasing id. Waypoints are nodes within
    ``near_radius`` of the false goal, nearest first. Routes that avoid the
    false goal itself are preferred; routes through it are accepted only
    when no avoiding route exists (e.g. on a line graph).
    """
    true_goal = g.goals[profile.favourite]
    false_goal = g.goals[profile.least_favourite]
    if true_goal == false_goal:
        raise SimulationError(f"agent {profile.agent_id}: favourite and least favourite goals coincide")
    if near_radius is None:
        near_radius = 1.5 * g.mean_edge_length()
    xy = g.coords()
    d_false = np.hypot(*(xy - xy[false_goal]).T)
    near = [int(v) for v in np.lexsort((np.arange(g.num_nodes), d_false)) if d_false[v] <= near_radius]

    for allow_through in (False, True):
        waypoints = near if allow_through else [w for w in near if w != false_goal]
        for origin in range(g.num_nodes):
            if origin in (true_goal, false_goal) or d_false[origin] <= near_radius:
                continue
            try:
                direct = shortest_path(g, origin, true_goal).length
            except NoPathError:
                continue
            for w in waypoints:
                if w == true_goal:
                    continue
                try:
                    leg1 = shortest_path(g, origin, w)
                    leg2 = shortest_path(g, w, true_goal)
                except NoPathError:
                    continue
                route = leg1.nodes + leg2.nodes[1:]
                if len(set(route)) != len(route):
                    continue
                if not allow_through and false_goal in route:
                    continue
                if leg1.length + leg2.length > (1 + max_overhead) * direct:
                    continue
                pass_index = int(np.argmin(d_false[list(route)]))
                ep = Episode(
                    agent_id=profile.agent_id,
                    episode_id=episode_id,
                    path=route,
                    timestamps=tuple(range(1, len(route) + 1)),
                    origin=origin,
                    goal=true_goal,
                    split="test",
                )
                return ep, FalseGoalInfo(false_goal, pass_index)
    raise SimulationError(
        f"agent {profile.agent_id}: no origin yields a route within {near_radius:g} m of goal {false_goal}"
    )


# ---------------------------------------------------------------- files

def write_dataset(ds: Dataset, path) -> Path:
    """Write ``path`` (JSON lines) plus a ``.header.json`` sidecar."""
    path = Path(path)
    with path.open("w") as fh:
        for e in ds.episodes:
            fh.write(json.dumps(e.to_record(), separators=(",", ":")) + "\n")
    header_path(path).write_text(json.dumps(ds.header(), indent=1, sort_keys=True) + "\n")
    return path


def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".header.json")


def read_dataset(path) -> Dataset:
    path = Path(path)
    header = json.loads(header_path(path).read_text())
    episodes = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                episodes.append(Episode.from_record(json.loads(line)))
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise SimulationError(f"{path}:{lineno}: bad episode record ({exc})") from None
    return Dataset(header["graph_hash"], episodes, header["master_seed"], header.get("params", {}))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
