"""Independent reference implementations used only by the tests.

Nothing here imports the library's algorithms; each oracle is the slowest
obviously-correct version of the thing it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def all_simple_paths(edges: dict[tuple[int, int], float], n: int, src: int, dst: int):
    """Every simple path src -> dst as (length, nodes), via plain DFS.

    ``edges`` maps (u, v) to the shortest parallel edge length.
    """
    out = []
    adj = {u: sorted(v for (a, v) in edges if a == u) for u in range(n)}

    def dfs(u, seen, nodes):
        if u == dst:
            total = 0.0
            for a, b in zip(nodes[:-1], nodes[1:]):
                total += edges[(a, b)]
            out.append((total, tuple(nodes)))
            return
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                nodes.append(v)
                dfs(v, seen, nodes)
                nodes.pop()
                seen.discard(v)

    dfs(src, {src}, [src])
    out.sort()
    return out


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def wilcoxon_enumerate(d) -> tuple[float, float]:
    """(W, exact two-sided p) by listing all 2^n sign assignments of |d|."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    a = np.abs(d)
    n = len(a)
    # mid-ranks by direct counting
    ranks = np.array([np.sum(a < x) + (np.sum(a == x) + 1) / 2 for x in a])
    w_plus = ranks[d > 0].sum()
    w_obs = min(w_plus, ranks.sum() - w_plus)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        wp = float(np.dot(signs, ranks))
        if min(wp, ranks.sum() - wp) <= w_obs + 1e-9:
            hits += 1
    return float(w_obs), hits / 2**n


def kl(p, q) -> float:
    return float(sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0))


def softmax(x):
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def line_graph_dict(n: int, goals, spacing: float = 1.0) -> dict:
    """Bidirectional path 0 - 1 - ... - n-1 on the x axis."""
    return {
        "nodes": [{"id": i, "x": spacing * i, "y": 0.0} for i in range(n)],
        "edges": [e for i in range(n - 1) for e in (
            {"src": i, "dst": i + 1, "length": spacing},
            {"src": i + 1, "dst": i, "length": spacing},
        )],
        "goals": list(goals),
    }
