"""Hierarchical belief -> desire -> intention VAE for goal inference.

Pipeline: trajectory transformer and graph attention encoders are fused into
``h_fused``; three Gaussian latent levels are inferred in sequence, each
conditioned on ``h_fused`` and the samples of the levels before it; the
concatenated latents feed a softmax goal predictor.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .nn import MLP, GraphEncoder, Linear, Module, TrajectoryEncoder, pad_paths, uniform_init
from .tensor import Tensor
from .training import (
    GoalInferenceModel, Sample, batched, holdout_split, prefix_samples, train_loop, validation_brier,
)

LEVEL_NAMES = ("belief", "desire", "intention")


@dataclass
class ModelConfig:
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    num_blocks: int = 2
    gat_layers: int = 2
    gat_self_loops: bool = True
    d_fused: int = 64
    latent_dims: tuple[int, ...] = (16, 16, 16)
    hidden: int = 64
    num_levels: int = 3
    beta_kl: float = 0.1
    beta_recon: float = 0.5
    prior: str = "hierarchical"
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    kl_warmup_epochs: int = 5
    # initial bias of the log-variance outputs; a small starting variance keeps
    # sampling noise from drowning the encoder means early in training
    logvar_init: float = 0.0
    clip_norm: float = 5.0
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    patience: int = 8
    train_fractions: tuple[float, ...] = (0.25, 0.5, 0.75, 0.95)
    # goal head reads posterior means during training as it does at inference;
    # samples still feed the priors, the KL and the reconstruction terms
    goal_from_mean: bool = True
    # fixed sinusoidal features of node coordinates added to the learned
    # embeddings; 0 disables, otherwise the number of cycles across the map
    spatial_scale: float = 3.0
    # inverted dropout on embedding entries and on h_fused, training only
    dropout: float = 0.0
    # "zero" starts the learned node embeddings at 0 so early training leans on
    # the spatial features; "uniform" is the usual fan-in initialisation
    embed_init: str = "zero"

    def __post_init__(self):
        self.latent_dims = tuple(int(d) for d in self.latent_dims)
        self.train_fractions = tuple(float(f) for f in self.train_fractions)
        if self.num_levels not in (1, 2, 3):
            raise ValueError("num_levels must be 1, 2 or 3")
        if len(self.latent_dims) < self.num_levels or min(self.latent_dims) < 1:
            raise ValueError("latent_dims must give a positive size for every level")
        if min(self.d_model, self.d_fused, self.hidden) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.beta_kl < 0 or self.beta_recon < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.val_fraction < 1 or self.patience < 0:
            raise ValueError("val_fraction must be in [0, 1) and patience >= 0")
        if self.prior not in ("hierarchical", "unit"):
            raise ValueError("prior must be 'hierarchical' or 'unit'")
        if self.embed_init not in ("zero", "uniform"):
            raise ValueError("embed_init must be 'zero' or 'uniform'")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_dims"] = list(self.latent_dims)
        d["train_fractions"] = list(self.train_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentState:
    mu: list[Tensor]
    logvar: list[Tensor]
    z: list[Tensor]

    @property
    def num_levels(self) -> int:
        return len(self.z)


@dataclass
class LossBreakdown:
    total: Tensor
    goal_ce: float
    kl: list[float]
    recon: list[float]
    beta_kl: float
    beta_recon: float
    kl_sum: float = field(init=False)
    recon_sum: float = field(init=False)

    def __post_init__(self):
        self.kl_sum = float(sum(self.kl))
        self.recon_sum = float(sum(self.recon))

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "goal_ce": self.goal_ce,
            "kl": self.kl_sum,
            "recon": self.recon_sum,
        }


def spatial_features(xy: np.ndarray, dim: int, scale: float, seed: int) -> np.ndarray | None:
    """Random Fourier features of coordinates normalised to the unit box.

    Amplitude is ``1/sqrt(dim)`` so that after the trajectory encoder's
    ``sqrt(dim)`` scaling they sit on the same footing as the time code.
    """
    if scale <= 0:
        return None
    if dim % 2:
        raise ValueError("spatial features need an even embedding size")
    lo = xy.min(axis=0)
    extent = max(float((xy.max(axis=0) - lo).max()), 1e-12)
    unit = (xy - lo) / extent
    freqs = np.random.default_rng([seed, 7]).normal(scale=scale, size=(2, dim // 2))
    ang = 2 * np.pi * unit @ freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1) / np.sqrt(dim)


def _dropout(x, p, rng):
    if not p:
        return x
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p))


class HiVAE(Module, GoalInferenceModel):
    name = "hivae"
    learned = True

    def __init__(self, config: ModelConfig, g):
        self.config = config
        self.num_nodes = g.num_nodes
        self.num_goals = g.num_goals
        self.graph_hash = g.content_hash()
        self._neighbours = g.adjacency_matrix(self_loops=config.gat_self_loops)
        c = config
        rng = np.random.default_rng(c.seed)
        self.embed = uniform_init(rng, c.d_model, (g.num_nodes, c.d_model))
        if c.embed_init == "zero":
            # drawn anyway so the remaining parameters see the same stream
            self.embed.data[...] = 0.0
        self._spatial = spatial_features(g.coords(), c.d_model, c.spatial_scale, c.seed)
        self.traj = TrajectoryEncoder(c.d_model, c.num_heads, c.d_ff, c.num_blocks, rng)
        self.graph = GraphEncoder([c.d_model] * (c.gat_layers + 1), rng, c.gat_self_loops)
        self.fusion = MLP([2 * c.d_model, c.d_fused, c.d_fused], rng)
        dims = c.latent_dims[: c.num_levels]
        self.encoders = [MLP([c.d_fused + sum(dims[:l]), c.hidden, 2 * dims[l]], rng) for l in range(len(dims))]
        for enc, d in zip(self.encoders, dims):
            enc.layers[-1].bias.data[d:] = c.logvar_init
        self.priors = (
            [Linear(sum(dims[:l]), 2 * dims[l], rng) for l in range(1, len(dims))]
            if c.prior == "hierarchical" else []
        )
        self.decoders = [MLP([dims[l], c.hidden, c.d_fused], rng) for l in range(len(dims))]
        self.predictor = MLP([sum(dims), c.hidden, g.num_goals], rng)

    # -- forward pieces
    def encode(self, nodes: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
        """``h_fused`` for a padded batch; graph attention runs once per call.

        An ``rng`` turns on dropout when the config asks for it.
        """
        p = self.config.dropout if rng is not None else 0.0
        table = _dropout(self.embed, p, rng)
        if self._spatial is not None:
            table = table + self._spatial
        h_traj = self.traj(table, nodes, mask)
        h_graph = self.graph(table, self._neighbours, nodes, mask)
        return _dropout(self.fusion(tt.concat([h_traj, h_graph], axis=-1)), p, rng)

    def infer_mind_states(self, h_fused, rng=None, num_levels=None, inject=None, noise=None) -> LatentState:
        """Sequential b -> d -> i inference.

        ``rng=None`` and ``noise=None`` select evaluation mode (``z = mu``).
        ``noise`` supplies the standard-normal draws per level explicitly.
        ``inject`` maps a level index to a tensor that replaces that level's
        sample.
        """
        num_levels = num_levels or self.config.num_levels
        mus, logvars, zs = [], [], []
        for l in range(num_levels):
            inp = tt.concat([h_fused] + zs, axis=-1) if zs else h_fused
            out = self.encoders[l](inp)
            d = self.config.latent_dims[l]
            mu, logvar = out[..., :d], out[..., d:]
            if noise is not None:
                z = mu + tt.exp(0.5 * logvar) * noise[l]
            elif rng is not None:
                z = tt.reparameterize(mu, logvar, rng)
            else:
                z = mu
            if inject and l in inject:
                z = tt.as_tensor(inject[l])
            mus.append(mu)
            logvars.append(logvar)
            zs.append(z)
        return LatentState(mus, logvars, zs)

    def prior_params(self, latents: LatentState, level: int):
        mu_q = latents.mu[level]
        if level == 0 or self.config.prior == "unit":
            zero = np.zeros(mu_q.shape)
            return tt.Tensor(zero), tt.Tensor(zero)
        parents = tt.concat(latents.z[:level], axis=-1)
        out = self.priors[level - 1](parents)
        d = self.config.latent_dims[level]
        return out[..., :d], out[..., d:]

    def goal_logits(self, latents: LatentState, use_mean: bool = False) -> Tensor:
        return self.predictor(tt.concat(latents.mu if use_mean else latents.z, axis=-1))

    def predict_goal(self, latents: LatentState) -> np.ndarray:
        return tt.softmax(self.goal_logits(latents), axis=-1).data

    # -- objective
    def compute_loss(self, paths, goal_indices, rng, kl_scale: float = 1.0) -> LossBreakdown:
        if len(paths) == 0:
            raise ValueError("empty batch")
        c = self.config
        nodes, mask = pad_paths(paths)
        h_fused = self.encode(nodes, mask, rng)
        B = len(paths)
        dims = c.latent_dims[: c.num_levels]
        noise = None if rng is None else [rng.standard_normal((B, d)) for d in dims]
        latents = self.infer_mind_states(h_fused, noise=noise)
        goal_ce = tt.cross_entropy(self.goal_logits(latents, c.goal_from_mean), goal_indices)
        target = h_fused.detach()
        # Decoders read latents inferred from the detached h_fused (same noise).
        # Otherwise the reconstruction gradient reaches the trunk through the
        # encoders and rewards a constant, trivially reconstructible h_fused.
        rec_latents = self.infer_mind_states(target, noise=noise)
        kls, recons = [], []
        for l in range(latents.num_levels):
            mu_p, logvar_p = self.prior_params(latents, l)
            kls.append(tt.gaussian_kl(latents.mu[l], latents.logvar[l], mu_p, logvar_p) * (1.0 / B))
            diff = self.decoders[l](rec_latents.z[l]) - target
            recons.append(tt.mean(diff * diff))
        beta_kl = c.beta_kl * kl_scale
        total = goal_ce
        if beta_kl:
            total = total + beta_kl * sum(kls[1:], kls[0])
        if c.beta_recon:
            total = total + c.beta_recon * sum(recons[1:], recons[0])
        return LossBreakdown(
            total, goal_ce.item(), [k.item() for k in kls], [r.item() for r in recons], beta_kl, c.beta_recon,
        )

    def batch_loss(self, batch: list[Sample], rng, epoch: int):
        warm = self.config.kl_warmup_epochs
        scale = min(1.0, epoch / warm) if warm > 0 else 1.0
        lb = self.compute_loss([s.path for s in batch], [s.goal_index for s in batch], rng, scale)
        return lb.total, lb.as_dict()

    # -- inference
    def infer_batch(self, paths, agent_ids=None) -> np.ndarray:
        nodes, mask = pad_paths([tuple(p) for p in paths])
        if nodes.max() >= self.num_nodes:
            raise IndexError("node id outside the embedding table")
        return self.predict_goal(self.infer_mind_states(self.encode(nodes, mask)))

    def fit(self, dataset, g, progress=None):
        c = self.config
        train_eps, val_eps = holdout_split(dataset.train, c.val_fraction)
        samples = prefix_samples(train_eps, g, c.train_fractions)
        validate = (lambda: validation_brier(self, val_eps, g, c.train_fractions)) if val_eps else None
        self.trace = train_loop(
            self, samples, epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, seed=c.seed,
            clip_norm=c.clip_norm, weight_decay=c.weight_decay, progress=progress,
            validate=validate, patience=c.patience,
        )
        return self.trace

    def latent_means(self, paths, batch_size=256) -> list[np.ndarray]:
        outs = []
        for chunk in batched(list(paths), batch_size):
            nodes, mask = pad_paths(chunk)
            lat = self.infer_mind_states(self.encode(nodes, mask))
            outs.append([m.data for m in lat.mu])
        return [np.concatenate([o[l] for o in outs]) for l in range(self.config.num_levels)]

    # -- persistence
    def save(self, path) -> Path:
        meta = {
            "kind": self.name,
            "config": self.config.to_dict(),
            "num_nodes": self.num_nodes,
            "num_goals": self.num_goals,
            "graph_hash": self.graph_hash,
        }
        return tt.save_arrays(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path, g) -> HiVAE:
        arrays, meta = tt.load_arrays(path)
        if meta.get("num_goals") != g.num_goals or meta.get("num_nodes") != g.num_nodes:
            raise ValueError(
                f"{path}: checkpoint built for {meta.get('num_nodes')} nodes / {meta.get('num_goals')} goals, "
                f"graph has {g.num_nodes} / {g.num_goals}"
            )
        model = cls(ModelConfig.from_dict(meta["config"]), g)
        model.load_state_dict(arrays)
        return model


def train(dataset, g, config: ModelConfig, progress=None) -> tuple[HiVAE, list[dict]]:
    """Fit a fresh model; returns it with its per-epoch loss trace."""
    if not dataset.train:
        raise ValueError("dataset has no training episodes")
    model = HiVAE(config, g)
    trace = model.fit(dataset, g, progress)
    return model, trace


def infer(model: HiVAE, partial_path, g=None) -> np.ndarray:
    return model.infer(partial_path)


def save_config(config: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
