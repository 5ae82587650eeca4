"""Follow one test episode and print how each model's belief in the true goal
changes as more of the path is revealed.

Runs in about a minute: a small grid, a short HiVAE training run.
"""
import numpy as np

from mindgraph.baselines import BToM, ExtendedBToM
from mindgraph.graph import generate_synthetic_graph
from mindgraph.hivae import ModelConfig, train
from mindgraph.sim import generate_dataset, sample_agent_profiles

g = generate_synthetic_graph(10, 8, 0.1, 0.2, num_goals=6, seed=4)
profiles = sample_agent_profiles(g, 6, seed=4)
ds = generate_dataset(g, profiles, 60, master_seed=4)

ext = ExtendedBToM(g)
ext.fit(ds)
hivae, trace = train(ds, g, ModelConfig(d_model=32, d_ff=64, d_fused=32, hidden=32, epochs=12))
print(f"HiVAE trained for {len(trace)} epochs, best validation Brier {min(r['val'] for r in trace):.3f}")

models = {"BToM": BToM(g), "Extended BToM": ext, "HiVAE": hivae}
ep = max(ds.test, key=lambda e: len(e.path))
truth = g.goal_index(ep.goal)
print(f"agent {ep.agent_id}, {len(ep.path)} steps from node {ep.origin} to goal node {ep.goal}")
print(f"agent preferences: {np.round(profiles[ep.agent_id].preferences, 2)}")
print()
print(f"{'steps':>6}" + "".join(f"{name:>15}" for name in models))
for t in range(1, len(ep.path) + 1, max(1, len(ep.path) // 8)):
    row = [m.infer_batch([ep.path[:t]], [ep.agent_id])[0, truth] for m in models.values()]
    print(f"{t:>6}" + "".join(f"{p:>15.3f}" for p in row))
