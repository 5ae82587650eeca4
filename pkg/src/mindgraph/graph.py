"""Spatial graphs: storage, JSON ingestion, synthetic generation, path search.

Node ids are dense integers ``0..|V|-1``. Edges are directed and carry an
authoritative length in meters; coordinates are only used for proximity
tests, never for path costs.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_EARTH_RADIUS_M = 6_371_008.8


class GraphError(ValueError):
    """Raised for malformed graph input."""


class NoPathError(LookupError):
    """Raised when the destination cannot be reached from the source."""

    def __init__(self, src: int, dst: int):
        super().__init__(f"no path from node {src} to node {dst}")
        self.src = src
        self.dst = dst


@dataclass(frozen=True)
class PathResult:
    nodes: tuple[int, ...]
    length: float


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    """Immutable directed graph with a designated candidate-goal subset.

    ``adjacency[u]`` lists ``(v, length)`` for every outgoing edge of ``u``,
    sorted by ``v``.
    """

    x: np.ndarray
    y: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    length: np.ndarray
    goals: tuple[int, ...]
    adjacency: tuple[tuple[tuple[int, float], ...], ...] = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return len(self.x)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def num_goals(self) -> int:
        return len(self.goals)

    def goal_index(self, node: int) -> int:
        return self._goal_lookup()[node]

    def _goal_lookup(self) -> dict[int, int]:
        cache = self.__dict__.get("_goal_cache")
        if cache is None:
            cache = {v: i for i, v in enumerate(self.goals)}
            object.__setattr__(self, "_goal_cache", cache)
        return cache

    def edge_length(self, u: int, v: int) -> float:
        """Length of the shortest parallel edge ``u -> v``."""
        best = math.inf
        for w, ln in self.adjacency[u]:
            if w == v and ln < best:
                best = ln
        if best == math.inf:
            raise GraphError(f"({u}, {v}) is not an edge")
        return best

    def has_edge(self, u: int, v: int) -> bool:
        return any(w == v for w, _ in self.adjacency[u])

    def mean_edge_length(self) -> float:
        return float(np.mean(self.length))

    def coords(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=1)

    def adjacency_matrix(self, self_loops: bool = False) -> np.ndarray:
        """Dense boolean out-neighbour mask, ``A[i, j]`` true for edge i -> j."""
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        a[self.src, self.dst] = True
        if self_loops:
            np.fill_diagonal(a, True)
        return a

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "nodes": [
                {"id": i, "x": float(self.x[i]), "y": float(self.y[i])}
                for i in range(self.num_nodes)
            ],
            "edges": [
                {"src": int(s), "dst": int(d), "length": float(ln)}
                for s, d, ln in zip(self.src, self.dst, self.length)
            ],
            "goals": [int(v) for v in self.goals],
        }

    def content_hash(self) -> str:
        cached = self.__dict__.get("_hash")
        if cached is None:
            blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
            cached = hashlib.sha256(blob.encode()).hexdigest()
            object.__setattr__(self, "_hash", cached)
        return cached

    def with_goals(self, goals) -> SpatialGraph:
        return build_graph(self.x, self.y, self.src, self.dst, self.length, goals)


def build_graph(x, y, src, dst, length, goals) -> SpatialGraph:
    """Validate arrays and assemble a :class:`SpatialGraph`."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    src = np.asarray(src, dtype=np.int64).reshape(-1)
    dst = np.asarray(dst, dtype=np.int64).reshape(-1)
    length = np.asarray(length, dtype=np.float64).reshape(-1)
    n = len(x)
    if len(y) != n:
        raise GraphError("x and y coordinate arrays differ in length")
    if not (len(src) == len(dst) == len(length)):
        raise GraphError("edge arrays differ in length")
    for k in range(len(src)):
        for end, v in (("src", src[k]), ("dst", dst[k])):
            if not 0 <= v < n:
                raise GraphError(f"edges[{k}]: {end} {int(v)} is not a node (|V|={n})")
        if not (length[k] > 0 and math.isfinite(length[k])):
            raise GraphError(f"edges[{k}]: length must be positive, got {length[k]!r}")
    goals = tuple(int(v) for v in goals)
    if not goals:
        raise GraphError("goal set is empty")
    if len(set(goals)) != len(goals):
        raise GraphError("goal set contains duplicates")
    for v in goals:
        if not 0 <= v < n:
            raise GraphError(f"goal {v} is not a node (|V|={n})")

    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for s, d, ln in zip(src.tolist(), dst.tolist(), length.tolist()):
        adj[s].append((d, ln))
    adjacency = tuple(tuple(sorted(a)) for a in adj)
    for arr in (x, y, src, dst, length):
        arr.setflags(write=False)
    return SpatialGraph(x, y, src, dst, length, goals, adjacency)


# ---------------------------------------------------------------- ingestion

def project_equirectangular(lon, lat, lon0: float, lat0: float):
    """Local planar projection of geographic degrees to meters around (lon0, lat0)."""
    lon = np.radians(np.asarray(lon, dtype=np.float64) - lon0)
    lat = np.radians(np.asarray(lat, dtype=np.float64) - lat0)
    x = _EARTH_RADIUS_M * lon * math.cos(math.radians(lat0))
    y = _EARTH_RADIUS_M * lat
    return x, y


def graph_from_dict(doc: dict, where: str = "<graph>") -> SpatialGraph:
    if not isinstance(doc, dict):
        raise GraphError(f"{where}: top level must be a JSON object")
    unknown = set(doc) - {"nodes", "edges", "goals", "format_version"}
    if unknown:
        raise GraphError(f"{where}: unknown top-level keys {sorted(unknown)}")
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise GraphError(f"{where}: unsupported format_version {version!r}")
    for key in ("nodes", "edges", "goals"):
        if not isinstance(doc.get(key), list):
            raise GraphError(f"{where}: '{key}' must be a list")

    nodes = doc["nodes"]
    n = len(nodes)
    x = np.zeros(n)
    y = np.zeros(n)
    seen = set()
    geographic = bool(nodes) and "lon" in nodes[0]
    lon = np.zeros(n)
    lat = np.zeros(n)
    for k, rec in enumerate(nodes):
        try:
            i = int(rec["id"])
            if geographic:
                lon[i], lat[i] = float(rec["lon"]), float(rec["lat"])
            else:
                x[i], y[i] = float(rec["x"]), float(rec["y"])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise GraphError(f"{where}: nodes[{k}]: bad node record {rec!r} ({exc})") from None
        if i in seen:
            raise GraphError(f"{where}: nodes[{k}]: duplicate id {i}")
        seen.add(i)
    if seen != set(range(n)):
        raise GraphError(f"{where}: node ids must be dense in [0, {n})")
    if geographic:
        x, y = project_equirectangular(lon, lat, float(lon.mean()), float(lat.mean()))

    src, dst, length = [], [], []
    for k, rec in enumerate(doc["edges"]):
        if not isinstance(rec, dict) or set(rec) - {"src", "dst", "length", "bidirectional"}:
            raise GraphError(f"{where}: edges[{k}]: bad edge record {rec!r}")
        try:
            s, d, ln = int(rec["src"]), int(rec["dst"]), float(rec["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"{where}: edges[{k}]: bad edge record {rec!r} ({exc})") from None
        for end, v in (("src", s), ("dst", d)):
            if not 0 <= v < n:
                raise GraphError(f"{where}: edges[{k}]: {end} {v} is not a node (|V|={n})")
        if not (ln > 0 and math.isfinite(ln)):
            raise GraphError(f"{where}: edges[{k}]: length must be positive, got {ln!r}")
        src.append(s)
        dst.append(d)
        length.append(ln)
        if rec.get("bidirectional", False):
            src.append(d)
            dst.append(s)
            length.append(ln)
    try:
        return build_graph(x, y, src, dst, length, doc["goals"])
    except GraphError as exc:
        raise GraphError(f"{where}: {exc}") from None


def load_graph(source) -> SpatialGraph:
    path = Path(source)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: JSON parse error at line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return graph_from_dict(doc, where=str(path))


def save_graph(g: SpatialGraph, dest) -> Path:
    path = Path(dest)
    path.write_text(json.dumps(g.to_dict(), indent=1) + "\n")
    return path


# ---------------------------------------------------------------- generation

def generate_synthetic_graph(
    grid_width: int,
    grid_height: int,
    diagonal_probability: float = 0.0,
    jitter: float = 0.0,
    num_goals: int = 2,
    seed: int = 0,
    spacing: float = 10.0,
) -> SpatialGraph:
    """Jittered grid with reciprocal street edges and optional diagonal shortcuts.

    Node ``r * grid_width + c`` sits at column ``c``, row ``r``. Every grid
    edge exists in both directions, so the result is strongly connected.
    ``jitter`` is a fraction of ``spacing``.
    """
    if grid_width < 2 or grid_height < 2:
        raise GraphError("grid dimensions must be >= 2")
    n = grid_width * grid_height
    if num_goals < 2 or num_goals > n:
        raise GraphError(f"num_goals must be in [2, {n}], got {num_goals}")
    rng = np.random.default_rng(seed)
    cols, rows = np.meshgrid(np.arange(grid_width), np.arange(grid_height))
    x = cols.ravel() * spacing + rng.uniform(-jitter, jitter, n) * spacing
    y = rows.ravel() * spacing + rng.uniform(-jitter, jitter, n) * spacing

    pairs = []
    for r in range(grid_height):
        for c in range(grid_width):
            u = r * grid_width + c
            if c + 1 < grid_width:
                pairs.append((u, u + 1))
            if r + 1 < grid_height:
                pairs.append((u, u + grid_width))
    diag = rng.random((grid_height - 1, grid_width - 1, 2)) < diagonal_probability
    for r in range(grid_height - 1):
        for c in range(grid_width - 1):
            u = r * grid_width + c
            if diag[r, c, 0]:
                pairs.append((u, u + grid_width + 1))
            if diag[r, c, 1]:
                pairs.append((u + 1, u + grid_width))

    src, dst, length = [], [], []
    for u, v in pairs:
        d = float(math.hypot(x[u] - x[v], y[u] - y[v]))
        src += [u, v]
        dst += [v, u]
        length += [d, d]
    goals = np.sort(rng.choice(n, size=num_goals, replace=False))
    return build_graph(x, y, src, dst, length, goals.tolist())


# ---------------------------------------------------------------- path search

def path_length(g: SpatialGraph, nodes) -> float:
    """Sum of edge lengths accumulated left to right."""
    total = 0.0
    for u, v in zip(nodes[:-1], nodes[1:]):
        total += g.edge_length(u, v)
    return total


def _dijkstra_path(adjacency, src, dst, banned_nodes=frozenset(), banned_edges=frozenset()):
    """Shortest path with lexicographic tie-breaking on the node sequence.

    Edge lengths are strictly positive, so every predecessor on a shortest
    path is settled before its successor; exact ties are resolved by
    comparing the full node sequences through the already-final predecessors.
    """
    if src in banned_nodes:
        return None
    dist = {src: 0.0}
    pred: dict[int, int] = {}
    done = set()
    heap = [(0.0, src)]

    def trace(v):
        out = [v]
        while v in pred:
            v = pred[v]
            out.append(v)
        return out[::-1]

    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dst:
            return tuple(trace(u)), d
        for v, ln in adjacency[u]:
            if v in done or v in banned_nodes or (u, v) in banned_edges:
                continue
            nd = d + ln
            old = dist.get(v)
            if old is None or nd < old:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd == old and pred.get(v) != u and trace(u) + [v] < trace(pred[v]) + [v]:
                pred[v] = u
    return None


def shortest_path(g: SpatialGraph, src: int, dst: int) -> PathResult:
    for v in (src, dst):
        if not 0 <= v < g.num_nodes:
            raise GraphError(f"node {v} out of range")
    found = _dijkstra_path(g.adjacency, src, dst)
    if found is None:
        raise NoPathError(src, dst)
    nodes, _ = found
    return PathResult(nodes, path_length(g, nodes))


def k_shortest_paths(g: SpatialGraph, src: int, dst: int, k: int) -> list[PathResult]:
    """Up to ``k`` loopless paths ordered by (length, node sequence).

    Yen's deviation scheme: each accepted path spawns spur searches that
    forbid the root prefix nodes and the edges already used by accepted
    paths sharing that prefix.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    first = shortest_path(g, src, dst)
    accepted = [first]
    if src == dst:
        return accepted
    candidates: list[tuple[float, tuple[int, ...]]] = []
    seen = {first.nodes}
    while len(accepted) < k:
        last = accepted[-1].nodes
        for i in range(len(last) - 1):
            spur = last[i]
            root = last[: i + 1]
            banned_edges = {
                (p.nodes[i], p.nodes[i + 1])
                for p in accepted
                if len(p.nodes) > i + 1 and p.nodes[: i + 1] == root
            }
            found = _dijkstra_path(
                g.adjacency, spur, dst,
                banned_nodes=frozenset(root[:-1]), banned_edges=frozenset(banned_edges),
            )
            if found is None:
                continue
            full = root[:-1] + found[0]
            if full in seen:
                continue
            seen.add(full)
            heapq.heappush(candidates, (path_length(g, full), full))
        if not candidates:
            break
        ln, nodes = heapq.heappop(candidates)
        accepted.append(PathResult(nodes, ln))
    return accepted


def reachable_from(g: SpatialGraph, start: int, reverse: bool = False) -> set[int]:
    """Breadth-first reachability, following edges backwards when ``reverse``."""
    if reverse:
        nbrs = [[] for _ in range(g.num_nodes)]
        for s, d in zip(g.src.tolist(), g.dst.tolist()):
            nbrs[d].append(s)
    else:
        nbrs = [[v for v, _ in a] for a in g.adjacency]
    seen = {start}
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in nbrs[u]:
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return seen


def cost_to_goals(g: SpatialGraph, goals=None) -> np.ndarray:
    """Shortest-path distance from every node to each goal, shape (|goals|, |V|).

    Unreachable entries are ``inf``.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import dijkstra

    goals = g.goals if goals is None else tuple(goals)
    best: dict[tuple[int, int], float] = {}
    for s, d, ln in zip(g.src.tolist(), g.dst.tolist(), g.length.tolist()):
        if ln < best.get((d, s), math.inf):
            best[(d, s)] = ln
    rows, cols = zip(*best) if best else ((), ())
    rev = csr_matrix((list(best.values()), (rows, cols)), shape=(g.num_nodes, g.num_nodes))
    return dijkstra(rev, directed=True, indices=list(goals))
