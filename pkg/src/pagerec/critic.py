"""Action-value head: compress a page grid into a dense action vector via a
small convolution stack, then score (state, action) with a dense network.

Every op on the action path is differentiable, since the policy gradient is
taken through the action input.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ParameterSet, ShapeError, Tensor, concat, reshape
from .config import RunConfig
from .layers import Dense, PageConv

__all__ = ["Critic"]


class Critic:
    def __init__(self, config: RunConfig, rng: np.random.Generator):
        self.config = config
        self.compressor = PageConv(
            config.page_rows, config.page_cols, config.item_dim, rng, out_dim=config.hidden_dim
        )
        width = config.critic_hidden_dim
        self.hidden1 = Dense(2 * config.hidden_dim, width, rng, activation="tanh")
        self.hidden2 = Dense(width, width, rng, activation="tanh")
        self.output = Dense(width, 1, rng, activation=None)

    def compress_action(self, page_grid) -> Tensor:
        """Dense action vector for one page grid or a batch of grids.

        Applied identically to decoder proto grids and to grids rebuilt
        from the real items of executed pages.
        """
        grid = page_grid if isinstance(page_grid, Tensor) else Tensor(np.asarray(page_grid, dtype=np.float64))
        return self.compressor(grid)

    def q_value(self, state: Tensor, action: Tensor) -> Tensor:
        """Scalar score per (state, action) pair; batched inputs give (B, 1)."""
        single = state.ndim == 1
        if single != (action.ndim == 1):
            raise ShapeError(
                f"q_value: state shape {state.shape} and action shape {action.shape} disagree on batching"
            )
        if single:
            state = reshape(state, (1, state.shape[0]))
            action = reshape(action, (1, action.shape[0]))
        if state.shape[0] != action.shape[0]:
            raise ShapeError(
                f"q_value: batch sizes differ, state {state.shape[0]} vs action {action.shape[0]}"
            )
        joint = concat([state, action], axis=1)
        score = self.output(self.hidden2(self.hidden1(joint)))
        if single:
            return reshape(score, ())
        return score

    def params(self) -> ParameterSet:
        pairs = self.compressor.params("critic/compress")
        pairs += self.hidden1.params("critic/q1")
        pairs += self.hidden2.params("critic/q2")
        pairs += self.output.params("critic/out")
        return ParameterSet(pairs)
