"""Offline imitation learning by on-policy RL inside a learned world model.

Modules:
    envsim      pixel environments, scripted experts, episode collection
    datastore   episode files, sequence sampling, latent stores
    worldmodel  RSSM world model with categorical latents
    rewards     latent-matching and adversarial rewards
    agent       imagination actor-critic (DITTO)
    baselines   D-BC, D-GAIL and pixel behavior cloning
    tabular     exact finite-MDP occupancy tools
    cli         the ``ditto`` command-line pipeline
"""

__version__ = "0.1.0"

from .config import TrainConfig
from .envsim import Episode, collect_episodes, make_env

__all__ = ["TrainConfig", "Episode", "collect_episodes", "make_env", "__version__"]
