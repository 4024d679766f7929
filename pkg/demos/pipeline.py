"""A miniature end-to-end run: data, world model, imitation in imagination.

Sizes are reduced so the script finishes in about ten minutes on one CPU
core.  The first argument sets the world-model steps (default 3000).  DITTO
depends on the world model most: with 2000 steps on 40 play episodes its
latents barely separate the grid cells, the reward is flat and the agent
scored under a tenth of the expert, while both BC agents matched it.
"""

import sys

import torch

from ditto.agent import LatentPolicy, train_agent
from ditto.baselines import PixelBCPolicy, train_dbc, train_pixel_bc
from ditto.config import TrainConfig
from ditto.envsim import NoisyExpert, RandomPolicy, ScriptedExpert, collect_episodes, collect_mixture, make_env
from ditto.evaluation import evaluate
from ditto.rewards import RewardSpec
from ditto.worldmodel import encode_dataset, train_world_model

torch.set_num_threads(1)
wm_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
env = make_env("patrol")
cfg = TrainConfig().updated(wm__deter=128, wm__hidden=128, wm__cnn_depth=16, wm__batch_size=16, wm__seq_len=16,
                            agent__batch_size=128, wm__log_every=0, agent__log_every=0)

# 1. Data: the world model sees exploratory play, the agents only see expert episodes.
play = collect_mixture(env, [(RandomPolicy(5), 50), (NoisyExpert(env, 0.3), 50)], seed=1)
experts = collect_episodes(ScriptedExpert(env), env, 5, seed=2)
print(f"{len(play)} play episodes, {len(experts)} expert episodes")

# 2. World model on everything, then encode the expert episodes into latents.
wm = train_world_model(play + experts, cfg, env.spec, steps=wm_steps).model
print("world model", wm.checkpoint_id[:12])
store = encode_dataset(experts, wm)

# 3. DITTO: actor-critic in imagination, rewarded for matching expert latents.
ditto = train_agent(store, wm, RewardSpec("ditto_dot"), cfg, steps=600)
curve = [c["intrinsic_return"] for c in ditto.curves]
print(f"intrinsic return {curve[0]:.2f} -> {curve[-1]:.2f} (max {cfg.agent.horizon})")

# 4. Baselines trained on the same expert data.
dbc = train_dbc(store, wm, cfg, steps=600)
bc = train_pixel_bc(experts, cfg, env.spec, steps=600)

# 5. Real-environment returns, relative to the scripted expert on the same seeds.
#    Actions are greedy; sampled actions cost the latent agents a few points.
for name, policy in [("ditto", LatentPolicy(ditto.agent.actor, wm, greedy=True)),
                     ("d-bc", LatentPolicy(dbc.agent.actor, wm, greedy=True)),
                     ("pixel bc", PixelBCPolicy(bc.model, greedy=True))]:
    result = evaluate(policy, env, episodes=10, seed=3)
    print(f"{name:9s} return {result.mean:5.2f} +- {result.stderr:.2f}  ({result.relative:.2f} of expert)")
