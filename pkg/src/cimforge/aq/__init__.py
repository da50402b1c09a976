from cimforge.aq.ddpg import DDPGAgent, ReplayBuffer
from cimforge.aq.enumeration import Optimum, cached_optimum, enumerate_optimum
from cimforge.aq.env import (
    QuantEnv,
    SearchResult,
    accuracy_target,
    action_to_bits,
    observations,
    reward,
    run_episode,
    search,
)
from cimforge.aq.oracles import SyntheticOracle, ToyQatOracle, synthetic_layers, toy_layers

__all__ = [
    "DDPGAgent", "ReplayBuffer", "Optimum", "cached_optimum", "enumerate_optimum",
    "QuantEnv", "SearchResult", "accuracy_target", "action_to_bits", "observations", "reward",
    "run_episode", "search", "SyntheticOracle", "ToyQatOracle", "synthetic_layers", "toy_layers",
]
