"""Walk an agent past the goal it likes least and watch the distance-driven
model get pulled toward it while the preference-aware one does not."""
from mindgraph.baselines import BToM, ExtendedBToM
from mindgraph.evaluation import false_goal_checkpoints
from mindgraph.graph import generate_synthetic_graph
from mindgraph.sim import generate_dataset, sample_agent_profiles, synthesize_false_goal_episode

g = generate_synthetic_graph(12, 10, 0.1, 0.2, num_goals=8, seed=2)
profiles = sample_agent_profiles(g, 5, seed=2)
ext = ExtendedBToM(g)
ext.fit(generate_dataset(g, profiles, 80, master_seed=2))
plain = BToM(g)

for prof in profiles:
    ep, info = synthesize_false_goal_episode(g, prof, episode_id=0)
    fg = g.goal_index(info.false_goal)
    print(f"agent {prof.agent_id}: true goal {ep.goal}, false goal {info.false_goal} "
          f"(preference {prof.preferences[fg]:.3f}), closest pass at step {info.pass_index}")
    for t in false_goal_checkpoints(info.pass_index, 5):
        a = plain.infer(ep.path[:t])[fg]
        b = ext.infer(ep.path[:t], prof.agent_id)[fg]
        print(f"    {t:>3} steps   BToM {a:.3f}   Extended BToM {b:.3f}")
