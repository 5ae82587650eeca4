"""Shared pieces for learned goal-inference models: the inference interface,
prefix-augmented training samples, and the minibatch Adam loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .sim import Episode, prefix_length, stream
from .tensor import Adam

log = logging.getLogger(__name__)

TRAIN_FRACTIONS = (0.25, 0.5, 0.75, 0.95)
_TRAIN_STREAM = 11


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class GoalInferenceModel:
    """Common surface: ``infer_batch`` returns one normalised posterior row per path."""

    name = "model"
    learned = False

    def fit(self, dataset, g) -> None:
        """Optional fitting hook (priors, training)."""

    def infer_batch(self, paths, agent_ids=None) -> np.ndarray:
        raise NotImplementedError

    def infer(self, path, agent_id=None) -> np.ndarray:
        return self.infer_batch([tuple(path)], None if agent_id is None else [agent_id])[0]


@dataclass(frozen=True)
class Sample:
    path: tuple[int, ...]
    goal_index: int
    agent_id: int
    episode_id: int


def prefix_samples(episodes: list[Episode], g, fractions=TRAIN_FRACTIONS) -> list[Sample]:
    out = []
    for e in episodes:
        gi = g.goal_index(e.goal)
        for f in fractions:
            n = prefix_length(len(e.path), f)
            out.append(Sample(e.path[:n], gi, e.agent_id, e.episode_id))
    return out


def holdout_split(episodes: list[Episode], fraction: float):
    """Per agent, the highest ``round(fraction * n)`` episode ids become validation episodes."""
    if not 0 <= fraction < 1:
        raise ValueError("validation fraction must be in [0, 1)")
    by_agent: dict[int, list[Episode]] = {}
    for e in episodes:
        by_agent.setdefault(e.agent_id, []).append(e)
    train, val = [], []
    for aid in sorted(by_agent):
        eps = sorted(by_agent[aid], key=lambda e: e.episode_id)
        k = int(math.floor(fraction * len(eps) + 0.5))
        cut = len(eps) - k
        train += eps[:cut]
        val += eps[cut:]
    return train, val


def validation_brier(model, episodes: list[Episode], g, fractions=TRAIN_FRACTIONS, batch_size: int = 256) -> float:
    """Mean Brier score of ``model`` over prefixes of ``episodes``."""
    total, count = 0.0, 0
    for f in fractions:
        for chunk in batched(episodes, batch_size):
            P = model.infer_batch(
                [e.path[: prefix_length(len(e.path), f)] for e in chunk], [e.agent_id for e in chunk]
            )
            Y = np.zeros_like(P)
            Y[np.arange(len(chunk)), [g.goal_index(e.goal) for e in chunk]] = 1.0
            total += float(((P - Y) ** 2).sum())
            count += len(chunk)
    return total / count


def clip_gradients(params, max_norm: float) -> float:
    sq = sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def train_loop(model, samples: list[Sample], *, epochs, batch_size, lr, seed, clip_norm=5.0, weight_decay=0.0,
               progress=None, validate=None, patience=0):
    """Minibatch Adam on ``model.batch_loss(batch, rng, epoch) -> (loss, parts)``.

    With ``validate`` (a zero-argument callable returning a score, lower is
    better) the parameters from the best-scoring epoch are restored at the
    end, and training stops after ``patience`` epochs without improvement
    when ``patience > 0``. Returns the per-epoch trace of sample-weighted
    mean loss components.
    """
    if not samples:
        raise ValueError("no training samples")
    params = model.named_parameters()
    opt = Adam(params, lr=lr, weight_decay=weight_decay)
    rng = stream(seed, _TRAIN_STREAM)
    trace = []
    best, best_state, since = math.inf, None, 0
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        sums: dict[str, float] = {}
        for bi, start in enumerate(range(0, len(samples), batch_size)):
            batch = [samples[i] for i in order[start : start + batch_size]]
            loss, parts = model.batch_loss(batch, rng, epoch)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, bi, value)
            opt.zero_grad()
            loss.backward()
            clip_gradients(params.values(), clip_norm)
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
        row = {"epoch": epoch, **{k: v / len(samples) for k, v in sums.items()}}
        if validate is not None:
            row["val"] = score = float(validate())
            if score < best:
                best, best_state, since = score, model.state_dict(), 0
            else:
                since += 1
        trace.append(row)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        if progress:
            progress(row)
        if validate is not None and patience and since >= patience:
            log.info("stopping after epoch %d; best validation score %.4f", epoch, best)
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return trace


def batched(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]
