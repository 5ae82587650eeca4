import math

import numpy as np
import pytest

from mindgraph import tensor as tt
from mindgraph.baselines import (
    BaselineConfig, BToM, BtomConfig, ExtendedBToM, RecurrentGoalModel, ToMNetLite, btom_infer, rnn_predict,
    tomnet_predict,
)
from mindgraph.graph import build_graph, generate_synthetic_graph, graph_from_dict
from mindgraph.sim import Dataset, Episode, generate_dataset, sample_agent_profiles
from oracles import line_graph_dict, numeric_grad


def line(n, goals, spacing=1.0):
    return graph_from_dict(line_graph_dict(n, goals, spacing))


def walk(agent, eid, origin, goal, split="train"):
    step = 1 if goal > origin else -1
    path = tuple(range(origin, goal + step, step))
    return Episode(agent, eid, path, tuple(range(1, len(path) + 1)), origin, goal, split)


def toy_dataset(g, agent_goals, per_agent, seed=0):
    """Agents walk along a line to their fixed goal from random interior origins."""
    rng = np.random.default_rng(seed)
    eps = []
    for a, goal in enumerate(agent_goals):
        for i in range(per_agent):
            goal_i = goal if goal is not None else g.goals[int(rng.integers(2))]
            origin = int(rng.integers(1, g.num_nodes - 1))
            eps.append(walk(a, i, origin, goal_i))
    return Dataset(g.content_hash(), eps, seed)


SMALL = dict(d_embed=8, hidden=8, d_char=4, d_ff=16, num_heads=2, batch_size=16, lr=1e-2, patience=0,
             val_fraction=0.0)


# ---------------------------------------------------------------- BToM

def test_btom_line_example():
    g = line(3, [0, 2])
    p = btom_infer(g, [0, 1], BtomConfig(beta=2.0))
    want = np.array([math.exp(-4), 1.0]) / (1 + math.exp(-4))
    assert np.allclose(p, want, atol=1e-12)


def test_btom_origin_only_uniform():
    g = generate_synthetic_graph(5, 5, 0.2, 0.2, 6, seed=1)
    assert np.allclose(btom_infer(g, [7]), np.full(6, 1 / 6), atol=1e-15)


def test_btom_small_beta_keeps_prior():
    g = generate_synthetic_graph(5, 5, 0.2, 0.2, 6, seed=1)
    p = btom_infer(g, [0, 1, 2, 3], BtomConfig(beta=1e-12))
    assert np.allclose(p, 1 / 6, atol=1e-9)


def test_btom_scale_invariance():
    g = generate_synthetic_graph(5, 4, 0.3, 0.2, 4, seed=2)
    k = 7.5
    big = build_graph(g.x * k, g.y * k, g.src, g.dst, g.length * k, g.goals)
    path = [0, 1, 2, 7]
    if not all(g.has_edge(u, v) for u, v in zip(path, path[1:])):
        path = [0, 1, 2, 3]
    a = btom_infer(g, path, BtomConfig(beta=1.3, normalize_by_mean_edge=False))
    b = btom_infer(big, path, BtomConfig(beta=1.3 / k, normalize_by_mean_edge=False))
    assert np.allclose(a, b, atol=1e-12)


def test_btom_unreachable_goal_gets_zero():
    # one-way edges 0->1->2 plus 3->2; goal 3 cannot be reached once at node 1
    g = build_graph([0, 1, 2, 3], [0, 0, 0, 1], [0, 1, 3], [1, 2, 2], [1.0, 1.0, 1.0], [2, 3])
    p = btom_infer(g, [0, 1])
    assert p[1] == 0.0 and p[0] == 1.0


def test_btom_save_load(tmp_path):
    g = generate_synthetic_graph(4, 4, 0.2, 0.2, 3, seed=0)
    m = BToM.load(BToM(g).save(tmp_path / "b.json"), g)
    assert np.array_equal(m.infer([0, 1]), BToM(g).infer([0, 1]))
    other = generate_synthetic_graph(4, 4, 0.2, 0.2, 3, seed=1)
    with pytest.raises(ValueError):
        BToM.load(tmp_path / "b.json", other)


def test_btom_config_validation():
    with pytest.raises(ValueError):
        BtomConfig(beta=0.0)


# ---------------------------------------------------------------- extended BToM

def test_extended_prior_dominance_and_smoothing():
    g = line(5, [0, 4])
    m = ExtendedBToM(g)
    m.fit(toy_dataset(g, [0, 4], 8))
    assert np.argmax(m.infer([2], agent_id=0)) == 0
    assert np.argmax(m.infer([2], agent_id=1)) == 1
    # agent 0 never visited goal 4: (0 + 1) / (8 + 2)
    assert m.prior(0)[1] == pytest.approx(1 / 10)
    for a in (0, 1):
        assert m.prior(a).sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(m.prior(99), [0.5, 0.5])


def test_extended_matches_btom_when_uniform():
    g = generate_synthetic_graph(5, 5, 0.2, 0.2, 4, seed=3)
    m = ExtendedBToM(g)
    m.set_counts({0: np.full(4, 5.0)})
    plain = BToM(g)
    for path in ([0], [0, 1], [0, 1, 2, 3]):
        assert np.allclose(m.infer(path, agent_id=0), plain.infer(path), atol=1e-15)


def test_extended_save_load(tmp_path):
    g = line(5, [0, 4])
    m = ExtendedBToM(g)
    m.fit(toy_dataset(g, [0, 4], 5))
    back = ExtendedBToM.load(m.save(tmp_path / "e.json"), g)
    assert np.array_equal(back.infer([2, 3], 1), m.infer([2, 3], 1))


# ---------------------------------------------------------------- recurrent

@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_recurrent_gate_gradients(cell):
    g = line(6, [0, 5])
    m = RecurrentGoalModel(BaselineConfig(d_embed=3, hidden=2), g, cell)
    paths, targets = [(1, 2, 3), (4, 3)], [1, 0]

    def loss_at(name, value):
        saved = m.named_parameters()[name].data.copy()
        m.named_parameters()[name].data[...] = value
        out = tt.cross_entropy(m.logits(paths), targets).item()
        m.named_parameters()[name].data[...] = saved
        return out

    m.zero_grad()
    tt.cross_entropy(m.logits(paths), targets).backward()
    for name in ("w_h", "w_x", "b"):
        p = m.named_parameters()[name]
        num = numeric_grad(lambda v: loss_at(name, v), p.data.copy())
        assert np.max(np.abs(p.grad - num) / np.maximum(1, np.abs(num))) < 1e-6


@pytest.mark.parametrize("cell", ["gru", "lstm"])
def test_recurrent_toy_task(cell):
    g = line(9, [0, 8])
    ds = toy_dataset(g, [None], 60, seed=1)
    m = RecurrentGoalModel(BaselineConfig(epochs=15, **SMALL), g, cell)
    m.fit(ds, g)
    hits = [np.argmax(rnn_predict(m, e.path)) == g.goal_index(e.goal) for e in ds.episodes]
    assert np.mean(hits) > 0.9
    P = m.infer_batch([e.path[:2] for e in ds.episodes])
    assert np.max(np.abs(P.sum(1) - 1)) < 1e-9


def test_recurrent_padding_invariance():
    g = line(9, [0, 8])
    m = RecurrentGoalModel(BaselineConfig(d_embed=4, hidden=4), g, "lstm")
    alone = m.infer_batch([(3, 4)])
    batched = m.infer_batch([(3, 4), (1, 2, 3, 4, 5, 6)])[:1]
    assert np.allclose(alone, batched, atol=1e-14)


def test_recurrent_save_load(tmp_path):
    g = line(6, [0, 5])
    m = RecurrentGoalModel(BaselineConfig(d_embed=4, hidden=4, seed=3), g, "gru")
    back = RecurrentGoalModel.load(m.save(tmp_path / "r.json"), g)
    assert back.cell == "gru" and np.array_equal(back.infer([1, 2]), m.infer([1, 2]))


# ---------------------------------------------------------------- ToMNet-lite

def test_tomnet_zero_character_branch():
    g = line(7, [0, 6])
    m = ToMNetLite(BaselineConfig(**SMALL), g)
    paths = [(2, 3), (4,)]
    with_none = m.logits(paths, [None, None]).data
    assert np.array_equal(with_none, m.logits_without_character(paths).data)


def test_tomnet_character_separation():
    g = line(9, [0, 8])
    ds = toy_dataset(g, [0, 8], 40, seed=2)
    cfg = BaselineConfig(epochs=20, num_past=5, train_fractions=(0.01, 0.5, 1.0), **SMALL)
    m = ToMNetLite(cfg, g)
    m.fit(ds, g)
    assert len(m.past[0]) == 5
    p0, p1 = tomnet_predict(m, [4], 0), tomnet_predict(m, [4], 1)
    assert np.argmax(p0) == 0 and np.argmax(p1) == 1


def test_tomnet_excludes_character_episodes():
    g = line(7, [0, 6])
    ds = toy_dataset(g, [0, 6], 12)
    m = ToMNetLite(BaselineConfig(num_past=4, **SMALL), g)
    used = m.training_episodes(ds)
    assert len(used) == 2 * (12 - 4)
    assert all(e.episode_id >= 4 for e in used)


def test_tomnet_save_load(tmp_path):
    g = line(7, [0, 6])
    m = ToMNetLite(BaselineConfig(**SMALL), g)
    m.set_past(toy_dataset(g, [0, 6], 6))
    back = ToMNetLite.load(m.save(tmp_path / "t.json"), g)
    assert np.array_equal(back.infer([3, 2], 1), m.infer([3, 2], 1))


def test_all_baselines_normalised_on_generated_data():
    g = generate_synthetic_graph(6, 5, 0.1, 0.2, 4, seed=0)
    ds = generate_dataset(g, sample_agent_profiles(g, 3, seed=0), 20, master_seed=0)
    ext = ExtendedBToM(g)
    ext.fit(ds)
    tom = ToMNetLite(BaselineConfig(**SMALL), g)
    tom.set_past(ds)
    models = [BToM(g), ext, RecurrentGoalModel(BaselineConfig(**SMALL), g, "gru"),
              RecurrentGoalModel(BaselineConfig(**SMALL), g, "lstm"), tom]
    paths = [e.path[: max(1, len(e.path) // 2)] for e in ds.test]
    ids = [e.agent_id for e in ds.test]
    for m in models:
        P = m.infer_batch(paths, ids)
        assert np.max(np.abs(P.sum(1) - 1)) < 1e-9 and P.min() >= 0
