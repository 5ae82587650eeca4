"""Neural building blocks: modules, sinusoidal time encoding, transformer
trajectory encoder, graph attention, fusion MLP.

Batched inputs are padded node-id matrices ``(B, T)`` with a boolean mask;
padded steps never influence valid ones.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from .tensor import Tensor, parameter

NEG_INF = -1e9


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, d_in, (d_in, d_out))
        self.bias = uniform_init(rng, d_in, (d_out,)) if bias else None

    def __call__(self, x):
        y = tt.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes, rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tt.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x):
        return tt.layer_norm(x, self.gamma, self.beta)


# ---------------------------------------------------------------- time encoding

def time_embed(t, dim: int) -> np.ndarray:
    """Interleaved ``sin(t / 10000^(2i/dim))``, ``cos(...)`` for ``i < dim/2``."""
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freq = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    ang = t[..., None] * freq
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def pad_paths(paths) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length node sequences into ``(B, T)`` ids and a validity mask."""
    if not paths or any(len(p) == 0 for p in paths):
        raise ValueError("paths must be non-empty")
    T = max(len(p) for p in paths)
    nodes = np.zeros((len(paths), T), dtype=np.int64)
    mask = np.zeros((len(paths), T), dtype=bool)
    for i, p in enumerate(paths):
        nodes[i, : len(p)] = p
        mask[i, : len(p)] = True
    return nodes, mask


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x[b, t]`` over valid ``t``; ``x`` is ``(B, T, d)``."""
    m = mask.astype(np.float64)
    weights = (m / m.sum(axis=1, keepdims=True))[:, :, None]
    return tt.tsum(x * weights, axis=1)


# ---------------------------------------------------------------- transformer

class TransformerBlock(Module):
    """Post-norm encoder block: self-attention and feed-forward, each with residual + layer norm."""

    def __init__(self, d_model: int, num_heads: int, d_ff: int, rng: np.random.Generator):
        if d_model % num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        self.num_heads = num_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)
        self.norm2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, key_bias: np.ndarray) -> Tensor:
        B, T, d = x.shape
        h = self.num_heads
        dh = d // h

        def heads(t):
            return tt.transpose(tt.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        scores = tt.matmul(q, tt.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)) + key_bias
        attn = tt.softmax(scores, axis=-1)
        ctx = tt.reshape(tt.transpose(tt.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
        x = self.norm1(x + self.wo(ctx))
        return self.norm2(x + self.ff2(tt.relu(self.ff1(x))))


class TrajectoryEncoder(Module):
    """Mean-pooled transformer over ``Embed(v_t) + TimeEmbed(t)``, ``t = 1..T``.

    Embeddings are scaled by ``sqrt(d_model)`` so node identity and the unit
    amplitude time code start on the same footing.
    """

    def __init__(self, d_model=64, num_heads=4, d_ff=128, num_blocks=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.blocks = [TransformerBlock(d_model, num_heads, d_ff, rng) for _ in range(num_blocks)]

    def __call__(self, table: Tensor, nodes: np.ndarray, mask: np.ndarray) -> Tensor:
        T = nodes.shape[1]
        x = tt.embedding_lookup(table, nodes) * math.sqrt(self.d_model) + time_embed(np.arange(1, T + 1), self.d_model)[None]
        key_bias = np.where(mask, 0.0, NEG_INF)[:, None, None, :]
        for blk in self.blocks:
            x = blk(x, key_bias)
        return masked_mean(x, mask)


def encode_trajectory(path, node_embedding_table: Tensor, encoder: TrajectoryEncoder) -> Tensor:
    """``h_traj`` for a single node sequence, shape ``(d_model,)``."""
    if len(path) == 0:
        raise ValueError("empty path")
    nodes, mask = pad_paths([list(path)])
    return encoder(node_embedding_table, nodes, mask)[0]


# ---------------------------------------------------------------- graph attention

class GATLayer(Module):
    """Single-head graph attention.

    ``alpha_ij = softmax_j(LeakyReLU(a^T [W h_i || W h_j]))`` over ``j`` in the
    mask row ``i``; output ``i`` is ``sum_j alpha_ij W h_j``. Rows with no
    admissible neighbour produce zeros.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, leaky_slope: float = 0.2):
        self.W = uniform_init(rng, d_in, (d_in, d_out))
        self.a = uniform_init(rng, 2 * d_out, (2 * d_out,))
        self.leaky_slope = leaky_slope
        self.d_out = d_out

    def attention(self, h, neighbours: np.ndarray):
        wh = tt.matmul(h, self.W)
        n = wh.shape[0]
        d = self.d_out
        s_i = tt.reshape(tt.matmul(wh, self.a[:d]), (n, 1))
        s_j = tt.reshape(tt.matmul(wh, self.a[d:]), (1, n))
        e = tt.leaky_relu(s_i + s_j, self.leaky_slope) + np.where(neighbours, 0.0, NEG_INF)
        has_any = neighbours.any(axis=1, keepdims=True).astype(np.float64)
        return tt.softmax(e, axis=-1) * has_any, wh

    def __call__(self, h, neighbours: np.ndarray) -> Tensor:
        if h.shape[0] != neighbours.shape[0]:
            raise tt.ShapeError(f"gat: {h.shape[0]} feature rows for {neighbours.shape[0]} nodes")
        alpha, wh = self.attention(h, neighbours)
        return tt.matmul(alpha, wh)


def gat_layer(g, node_features, layer: GATLayer, self_loops: bool = True) -> Tensor:
    return layer(tt.as_tensor(node_features), g.adjacency_matrix(self_loops=self_loops))


class GraphEncoder(Module):
    """Stacked GAT layers over node embeddings, pooled over the context path."""

    def __init__(self, dims, rng: np.random.Generator, self_loops: bool = True, leaky_slope: float = 0.2):
        self.layers = [GATLayer(a, b, rng, leaky_slope) for a, b in zip(dims[:-1], dims[1:])]
        self.self_loops = self_loops

    def node_states(self, table: Tensor, neighbours: np.ndarray) -> Tensor:
        h = table
        for i, layer in enumerate(self.layers):
            h = layer(h, neighbours)
            if i < len(self.layers) - 1:
                h = tt.leaky_relu(h, layer.leaky_slope)
        return h

    def __call__(self, table, neighbours, nodes: np.ndarray, mask: np.ndarray, states=None) -> Tensor:
        states = self.node_states(table, neighbours) if states is None else states
        return masked_mean(tt.embedding_lookup(states, nodes), mask)


def encode_graph(g, node_embedding_table: Tensor, encoder: GraphEncoder, context_path) -> Tensor:
    if len(context_path) == 0:
        raise ValueError("empty context path")
    nodes, mask = pad_paths([list(context_path)])
    adj = g.adjacency_matrix(self_loops=encoder.self_loops)
    return encoder(node_embedding_table, adj, nodes, mask)[0]


def fuse(h_traj, h_graph, mlp: MLP) -> Tensor:
    """``MLP([h_traj || h_graph])``."""
    first = mlp.layers[0].weight.shape[0]
    if h_traj.shape[-1] + h_graph.shape[-1] != first:
        raise tt.ShapeError(
            f"fuse: inputs {h_traj.shape} and {h_graph.shape} do not match MLP input {first}"
        )
    return mlp(tt.concat([h_traj, h_graph], axis=-1))
