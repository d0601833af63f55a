"""Construction, cloning, and checkpointing of the agent's networks.

The state encoder is shared between the policy and the critic; its
parameters are updated by the critic loss only. The decoder is the policy's
own head, the critic owns the action compression and the Q head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actor import Decoder
from .autodiff import ParameterSet, load_checkpoint, save_checkpoint
from .config import RunConfig
from .critic import Critic
from .encoder import StateEncoder

__all__ = ["AgentNetworks", "build_networks", "clone_networks", "save_networks", "load_networks"]


@dataclass
class AgentNetworks:
    config: RunConfig
    encoder: StateEncoder
    decoder: Decoder
    critic: Critic

    def __post_init__(self):
        self.encoder_params = self.encoder.params()
        self.decoder_params = ParameterSet(self.decoder.params())
        self.critic_params = self.critic.params()
        self.all_params = self.encoder_params.merged(self.decoder_params, self.critic_params)

    def clear_all_grads(self) -> None:
        self.all_params.clear_grads()


def build_networks(config: RunConfig, seed: int) -> AgentNetworks:
    """Initialize all networks from one seeded stream; deterministic."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    encoder = StateEncoder(config, rng)
    decoder = Decoder(config, rng)
    critic = Critic(config, rng)
    return AgentNetworks(config=config, encoder=encoder, decoder=decoder, critic=critic)


def clone_networks(nets: AgentNetworks) -> AgentNetworks:
    """A structural copy with independent parameter storage."""
    clone = build_networks(nets.config, seed=0)
    clone.all_params.copy_data_from(nets.all_params)
    return clone


def save_networks(path, nets: AgentNetworks, seed: int) -> None:
    save_checkpoint(path, nets.all_params, seed)


def load_networks(path, config: RunConfig) -> tuple[AgentNetworks, int]:
    """Rebuild networks for the config and load checkpointed weights."""
    arrays, seed, _ = load_checkpoint(path)
    nets = build_networks(config, seed=0)
    expected = nets.all_params.names()
    if list(arrays) != expected:
        raise ValueError(
            "checkpoint parameters do not match the configured networks; "
            f"got {len(arrays)} entries, expected {len(expected)} "
            "(was the checkpoint written with different ablation flags?)"
        )
    for name, tensor in nets.all_params.items():
        if arrays[name].shape != tensor.shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape {arrays[name].shape}, expected {tensor.shape}")
        tensor.data[...] = arrays[name]
    return nets, seed
