"""Comparison models: Bayesian inverse planning (plain and with per-agent
priors), GRU and LSTM sequence classifiers, and a lite character-network
model conditioned on an agent's past episodes.

The inverse-planning likelihood is a reconstruction: each observed step is
scored Boltzmann-rationally by how much it changes the shortest-path
cost-to-go of a goal, net of the step's own length.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .graph import SpatialGraph, cost_to_goals
from .nn import MLP, Linear, Module, TrajectoryEncoder, pad_paths, uniform_init
from .tensor import Tensor
from .sim import Episode
from .training import (
    GoalInferenceModel, Sample, holdout_split, prefix_samples, train_loop, validation_brier,
)


# ---------------------------------------------------------------- inverse planning

@dataclass
class BtomConfig:
    beta: float = 1.0
    prior_mode: str = "uniform"
    # express beta per mean edge length instead of per meter
    normalize_by_mean_edge: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.prior_mode not in ("uniform", "empirical"):
            raise ValueError("prior_mode must be 'uniform' or 'empirical'")


class BToM(GoalInferenceModel):
    """P(g | v_1..v_t) ∝ prior(g) · Π_s exp(-β [C(v_{s+1}, g) - C(v_s, g) + len(v_s, v_{s+1})])."""

    name = "btom"

    def __init__(self, g: SpatialGraph, config: BtomConfig | None = None, cost_table: np.ndarray | None = None):
        self.g = g
        self.config = config or BtomConfig()
        self.cost = cost_to_goals(g) if cost_table is None else np.asarray(cost_table, dtype=np.float64)
        if self.cost.shape != (g.num_goals, g.num_nodes):
            raise ValueError(f"cost table shape {self.cost.shape} != {(g.num_goals, g.num_nodes)}")
        scale = g.mean_edge_length() if self.config.normalize_by_mean_edge else 1.0
        self.beta = self.config.beta / scale

    def log_likelihood(self, path) -> np.ndarray:
        path = list(path)
        if not path:
            raise ValueError("empty trajectory")
        out = np.zeros(self.g.num_goals)
        if len(path) == 1:
            return out
        steps = np.array([self.g.edge_length(u, v) for u, v in zip(path[:-1], path[1:])])
        c = self.cost[:, path]
        with np.errstate(invalid="ignore"):
            delta = c[:, 1:] - c[:, :-1] + steps
        dead = ~np.isfinite(c[:, 1:]).all(axis=1)
        out = -self.beta * np.where(np.isfinite(delta), delta, 0.0).sum(axis=1)
        out[dead] = -np.inf
        return out

    def prior(self, agent_id=None) -> np.ndarray:
        return np.full(self.g.num_goals, 1.0 / self.g.num_goals)

    def posterior(self, path, agent_id=None) -> np.ndarray:
        prior = self.prior(agent_id)
        with np.errstate(divide="ignore"):
            logp = np.log(prior) + self.log_likelihood(path)
        if not np.isfinite(logp).any():
            return prior.copy()
        logp -= logp[np.isfinite(logp)].max()
        p = np.exp(logp)
        return p / p.sum()

    def infer_batch(self, paths, agent_ids=None) -> np.ndarray:
        ids = agent_ids if agent_ids is not None else [None] * len(paths)
        return np.stack([self.posterior(p, a) for p, a in zip(paths, ids)])

    def save(self, path) -> Path:
        meta = {"kind": self.name, "config": asdict(self.config), "graph_hash": self.g.content_hash()}
        return tt.save_arrays(path, {"cost": self.cost}, meta)

    @classmethod
    def load(cls, path, g) -> BToM:
        arrays, meta = tt.load_arrays(path)
        if meta.get("graph_hash") != g.content_hash():
            raise ValueError(f"{path}: cost table was computed on a different graph")
        return cls(g, BtomConfig(**meta["config"]), arrays["cost"])


def btom_infer(g: SpatialGraph, partial_path, config: BtomConfig | None = None) -> np.ndarray:
    return BToM(g, config).posterior(partial_path)


class ExtendedBToM(BToM):
    """Inverse planning with Laplace-smoothed per-agent goal frequencies as the prior."""

    name = "extended_btom"

    def __init__(self, g, config=None, cost_table=None):
        super().__init__(g, config or BtomConfig(prior_mode="empirical"), cost_table)
        self.agent_priors: dict[int, np.ndarray] = {}
        self.population_prior = np.full(g.num_goals, 1.0 / g.num_goals)

    def fit(self, dataset, g=None) -> None:
        k = self.g.num_goals
        counts: dict[int, np.ndarray] = {}
        for e in dataset.train:
            counts.setdefault(e.agent_id, np.zeros(k))[self.g.goal_index(e.goal)] += 1
        self.set_counts(counts)

    def set_counts(self, counts: dict[int, np.ndarray]) -> None:
        k = self.g.num_goals
        total = np.zeros(k)
        self.agent_priors = {}
        for a, c in sorted(counts.items()):
            self.agent_priors[int(a)] = (c + 1) / (c.sum() + k)
            total += c
        self.population_prior = (total + 1) / (total.sum() + k)

    def prior(self, agent_id=None) -> np.ndarray:
        return self.agent_priors.get(agent_id, self.population_prior)

    def prior_table(self) -> dict:
        return {
            "agents": {str(a): p.tolist() for a, p in self.agent_priors.items()},
            "population": self.population_prior.tolist(),
        }

    def save(self, path) -> Path:
        Path(path).write_text(json.dumps({"kind": self.name, "config": asdict(self.config),
                                          "graph_hash": self.g.content_hash(), **self.prior_table()},
                                         indent=1, sort_keys=True) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path, g) -> ExtendedBToM:
        doc = json.loads(Path(path).read_text())
        if doc.get("graph_hash") != g.content_hash():
            raise ValueError(f"{path}: prior table was fitted on a different graph")
        m = cls(g, BtomConfig(**doc["config"]))
        m.agent_priors = {int(a): np.array(p) for a, p in doc["agents"].items()}
        m.population_prior = np.array(doc["population"])
        return m


# ---------------------------------------------------------------- learned baselines

@dataclass
class BaselineConfig:
    d_embed: int = 64
    hidden: int = 64
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 5.0
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    patience: int = 8
    train_fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 0.95)
    # character-network settings
    num_past: int = 10
    d_char: int = 32
    num_heads: int = 4
    d_ff: int = 128
    num_blocks: int = 1

    def __post_init__(self):
        self.train_fractions = tuple(float(f) for f in self.train_fractions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_fractions"] = list(self.train_fractions)
        return d

    @classmethod
    def from_dict(cls, d) -> BaselineConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown baseline config fields {sorted(unknown)}")
        return cls(**d)


class _Learned(Module, GoalInferenceModel):
    learned = True

    def __init__(self, config: BaselineConfig, g: SpatialGraph):
        self.config = config
        self.num_nodes = g.num_nodes
        self.num_goals = g.num_goals
        self.graph_hash = g.content_hash()

    def logits(self, paths, agent_ids) -> Tensor:
        raise NotImplementedError

    def batch_loss(self, batch: list[Sample], rng, epoch):
        loss = tt.cross_entropy(
            self.logits([s.path for s in batch], [s.agent_id for s in batch]),
            [s.goal_index for s in batch],
        )
        return loss, {"total": loss.item(), "goal_ce": loss.item()}

    def training_episodes(self, dataset) -> list[Episode]:
        return list(dataset.train)

    def fit(self, dataset, g, progress=None):
        c = self.config
        train_eps, val_eps = holdout_split(self.training_episodes(dataset), c.val_fraction)
        validate = (lambda: validation_brier(self, val_eps, g, c.train_fractions)) if val_eps else None
        self.trace = train_loop(
            self, prefix_samples(train_eps, g, c.train_fractions), epochs=c.epochs, batch_size=c.batch_size,
            lr=c.lr, seed=c.seed, clip_norm=c.clip_norm, weight_decay=c.weight_decay, progress=progress,
            validate=validate, patience=c.patience,
        )
        return self.trace

    def infer_batch(self, paths, agent_ids=None) -> np.ndarray:
        ids = list(agent_ids) if agent_ids is not None else [None] * len(paths)
        return tt.softmax(self.logits([tuple(p) for p in paths], ids), axis=-1).data

    def _meta(self) -> dict:
        return {
            "kind": self.name,
            "config": self.config.to_dict(),
            "num_nodes": self.num_nodes,
            "num_goals": self.num_goals,
            "graph_hash": self.graph_hash,
        }

    def save(self, path) -> Path:
        return tt.save_arrays(path, self.state_dict(), self._meta())

    @classmethod
    def load(cls, path, g):
        arrays, meta = tt.load_arrays(path)
        if meta.get("num_goals") != g.num_goals or meta.get("num_nodes") != g.num_nodes:
            raise ValueError(f"{path}: checkpoint does not match graph dimensions")
        model = cls._from_meta(meta, g)
        model.load_state_dict(arrays)
        return model

    @classmethod
    def _from_meta(cls, meta, g):
        return cls(BaselineConfig.from_dict(meta["config"]), g)


class RecurrentGoalModel(_Learned):
    """Node embeddings -> GRU or LSTM -> last valid hidden state -> linear -> softmax."""

    def __init__(self, config: BaselineConfig, g: SpatialGraph, cell: str = "gru"):
        super().__init__(config, g)
        if cell not in ("gru", "lstm"):
            raise ValueError("cell must be 'gru' or 'lstm'")
        self.cell = cell
        self.name = cell
        rng = np.random.default_rng(config.seed)
        d, h = config.d_embed, config.hidden
        gates = 3 if cell == "gru" else 4
        self.embed = uniform_init(rng, d, (g.num_nodes, d))
        self.w_x = uniform_init(rng, h, (d, gates * h))
        self.w_h = uniform_init(rng, h, (h, gates * h))
        self.b = uniform_init(rng, h, (gates * h,))
        self.out = Linear(h, g.num_goals, rng)

    def gru_step(self, xp: Tensor, h: Tensor) -> Tensor:
        """``xp`` is the precomputed input projection ``x W_x + b``."""
        H = self.config.hidden
        hp = tt.matmul(h, self.w_h)
        z = tt.sigmoid(xp[:, :H] + hp[:, :H])
        r = tt.sigmoid(xp[:, H:2 * H] + hp[:, H:2 * H])
        n = tt.tanh(xp[:, 2 * H:] + r * hp[:, 2 * H:])
        return (1.0 - z) * n + z * h

    def lstm_step(self, xp: Tensor, h: Tensor, c: Tensor):
        H = self.config.hidden
        pre = xp + tt.matmul(h, self.w_h)
        i = tt.sigmoid(pre[:, :H])
        f = tt.sigmoid(pre[:, H:2 * H])
        g = tt.tanh(pre[:, 2 * H:3 * H])
        o = tt.sigmoid(pre[:, 3 * H:])
        c = f * c + i * g
        return o * tt.tanh(c), c

    def encode(self, nodes: np.ndarray, mask: np.ndarray) -> Tensor:
        B, T = nodes.shape
        H = self.config.hidden
        xp = tt.matmul(tt.embedding_lookup(self.embed, nodes), self.w_x) + self.b
        h = Tensor(np.zeros((B, H)))
        c = Tensor(np.zeros((B, H)))
        for t in range(T):
            m = mask[:, t : t + 1].astype(np.float64)
            x_t = xp[:, t, :]
            if self.cell == "gru":
                h_new = self.gru_step(x_t, h)
            else:
                h_new, c_new = self.lstm_step(x_t, h, c)
                c = c_new * m + c * (1.0 - m)
            h = h_new * m + h * (1.0 - m)
        return h

    def logits(self, paths, agent_ids=None) -> Tensor:
        nodes, mask = pad_paths(paths)
        return self.out(self.encode(nodes, mask))

    def _meta(self):
        return {**super()._meta(), "cell": self.cell}

    @classmethod
    def _from_meta(cls, meta, g):
        return cls(BaselineConfig.from_dict(meta["config"]), g, meta["cell"])


def rnn_predict(model: RecurrentGoalModel, partial_path, g=None) -> np.ndarray:
    return model.infer(partial_path)


class ToMNetLite(_Learned):
    """Character embedding from past episodes plus a current-trajectory encoding.

    ``e_char`` is the projected mean encoding of up to ``num_past`` training
    episodes of the same agent (the lowest episode ids); agents without past
    episodes get a zero vector. Those episodes are excluded from the
    training samples so a prefix never sees its own completed path.
    """

    name = "tomnet"

    def __init__(self, config: BaselineConfig, g: SpatialGraph):
        super().__init__(config, g)
        c = config
        rng = np.random.default_rng(c.seed)
        self.embed = uniform_init(rng, c.d_embed, (g.num_nodes, c.d_embed))
        self.char_net = TrajectoryEncoder(c.d_embed, c.num_heads, c.d_ff, c.num_blocks, rng)
        self.char_proj = Linear(c.d_embed, c.d_char, rng)
        self.mental_net = TrajectoryEncoder(c.d_embed, c.num_heads, c.d_ff, c.num_blocks, rng)
        self.predictor = MLP([c.d_char + c.d_embed, c.hidden, g.num_goals], rng)
        self.past: dict[int, list[tuple[int, ...]]] = {}

    def set_past(self, dataset) -> None:
        by_agent: dict[int, list] = {}
        for e in sorted(dataset.train, key=lambda e: (e.agent_id, e.episode_id)):
            lst = by_agent.setdefault(e.agent_id, [])
            if len(lst) < self.config.num_past:
                lst.append(e)
        self.past = {a: [e.path for e in eps] for a, eps in by_agent.items()}
        self._past_ids = {(e.agent_id, e.episode_id) for eps in by_agent.values() for e in eps}

    def training_episodes(self, dataset):
        self.set_past(dataset)
        return [e for e in dataset.train if (e.agent_id, e.episode_id) not in self._past_ids]

    def character(self, agent_ids) -> Tensor:
        agents = sorted({a for a in agent_ids if a is not None and self.past.get(a)})
        rows = {}
        if agents:
            paths = [p for a in agents for p in self.past[a]]
            nodes, mask = pad_paths(paths)
            enc = self.char_net(self.embed, nodes, mask)
            start = 0
            for a in agents:
                n = len(self.past[a])
                rows[a] = self.char_proj(tt.mean(enc[start : start + n], axis=0, keepdims=True))
                start += n
        zero = Tensor(np.zeros((1, self.config.d_char)))
        return tt.concat([rows.get(a, zero) for a in agent_ids], axis=0)

    def predict(self, e_char, h_current) -> Tensor:
        return self.predictor(tt.concat([e_char, h_current], axis=-1))

    def current(self, paths) -> Tensor:
        nodes, mask = pad_paths(paths)
        return self.mental_net(self.embed, nodes, mask)

    def logits(self, paths, agent_ids=None) -> Tensor:
        ids = list(agent_ids) if agent_ids is not None else [None] * len(paths)
        return self.predict(self.character(ids), self.current(paths))

    def logits_without_character(self, paths) -> Tensor:
        return self.predict(Tensor(np.zeros((len(paths), self.config.d_char))), self.current(paths))

    def _meta(self):
        return {**super()._meta(), "past": {str(a): [list(p) for p in ps] for a, ps in self.past.items()}}

    @classmethod
    def _from_meta(cls, meta, g):
        m = cls(BaselineConfig.from_dict(meta["config"]), g)
        m.past = {int(a): [tuple(p) for p in ps] for a, ps in meta.get("past", {}).items()}
        return m


def tomnet_predict(model: ToMNetLite, partial_path, agent_id, g=None) -> np.ndarray:
    return model.infer(partial_path, agent_id)
