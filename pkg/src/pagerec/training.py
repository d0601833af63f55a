"""Deterministic-policy actor-critic training with replay and target
networks, in an online (simulated user) and an offline (logged sessions)
variant.

The offline variant closes the gap between what the decoder proposes and
the pages that were actually shown: each batch first takes a gradient step
on the squared difference between the proto page and the logged page, then
runs the usual critic and policy updates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .actor import map_to_valid, recall_pool, top_neighbors
from .autodiff import (
    GradientError,
    ParameterSet,
    Tensor,
    backward,
    frobenius_sq,
    mul,
    no_grad,
    reduce_sum,
    sgd_step,
)
from .config import RunConfig
from .encoder import REWARD_VALUES, Feedback, PageObservation, StateSnapshot
from .environment import Catalog, SessionRecord, SimUser, sample_history, user_feedback
from .networks import AgentNetworks, build_networks, clone_networks
from .runtime import single_threaded_blas

logger = logging.getLogger(__name__)

__all__ = [
    "Transition",
    "ReplayBuffer",
    "Trainer",
    "CurvePoint",
    "compute_reward",
    "soft_update",
    "alignment_loss",
]


def compute_reward(page, feedback_codes: Sequence[int]) -> float:
    """Page reward: sum of per-item rewards under the 0/1/5 scheme."""
    n_items = len(page.items)
    codes = list(feedback_codes)
    if len(codes) != n_items:
        raise ValueError(f"feedback grid has {len(codes)} entries for {n_items} slots")
    return float(sum(REWARD_VALUES[code] for code in codes))


def soft_update(target: ParameterSet, online: ParameterSet, tau: float) -> None:
    """Blend online weights into the target copy: t <- tau*o + (1-tau)*t."""
    if target.names() != online.names():
        raise ValueError("soft_update: parameter sets have different names")
    for name, t in target.items():
        o = online[name]
        if o.shape != t.shape:
            raise ValueError(f"soft_update: shape mismatch for {name!r}: {t.shape} vs {o.shape}")
        t.data[...] = tau * o.data + (1.0 - tau) * t.data


def alignment_loss(proto: Tensor, valid_grids: np.ndarray) -> Tensor:
    """Squared Frobenius distance between proto and executed pages, summed
    over the batch."""
    target = np.asarray(valid_grids, dtype=np.float64)
    if proto.shape != target.shape:
        raise ValueError(f"alignment_loss: proto shape {proto.shape} != valid shape {target.shape}")
    return frobenius_sq(proto - Tensor(target))


@dataclass(frozen=True)
class Transition:
    """One replayable interaction; states are observation snapshots."""

    state: StateSnapshot
    action_grid: np.ndarray
    reward: float
    next_state: StateSnapshot


class ReplayBuffer:
    """Bounded FIFO of transitions with seeded uniform sampling."""

    def __init__(self, capacity: int, seed: int):
        if capacity < 1:
            raise ValueError("replay capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
        self._storage: list[Transition] = []
        self._cursor = 0

    def add(self, transition: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(transition)
        else:
            self._storage[self._cursor] = transition
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int) -> list[Transition]:
        if not self._storage:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = self.rng.integers(0, len(self._storage), size=batch_size)
        return [self._storage[i] for i in idx]

    def __len__(self) -> int:
        return len(self._storage)


@dataclass(frozen=True)
class CurvePoint:
    session: int
    cumulative_reward: float
    moving_average: float


class Trainer:
    """Owns the online networks, their target copies, and the replay buffer."""

    def __init__(self, config: RunConfig, catalog: Catalog, seed: int | None = None):
        self.config = config
        self.catalog = catalog
        self.seed = config.seed if seed is None else seed
        self.nets = build_networks(config, self.seed)
        self.targets = clone_networks(self.nets)
        self.buffer = ReplayBuffer(config.buffer_capacity, self.seed)
        self.noise_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(13,))
        )
        # critic updates move the shared encoder as well
        self.critic_side = self.nets.encoder_params.merged(self.nets.critic_params)
        self.target_critic_side = self.targets.encoder_params.merged(self.targets.critic_params)
        self.curve: list[CurvePoint] = []

    # -- shared plumbing ------------------------------------------------------

    def _encode_batch(self, nets: AgentNetworks, snapshots: Sequence[StateSnapshot]):
        states, order = nets.encoder.encode_states(snapshots)
        return states, order

    def _batch_arrays(self, batch: Sequence[Transition], order: Sequence[int]):
        grids = np.stack([batch[i].action_grid for i in order])
        rewards = np.array([batch[i].reward for i in order])
        return grids, rewards

    def _target_values(self, batch: Sequence[Transition], order: Sequence[int]) -> np.ndarray:
        """y = r + gamma * Q'(s', f'(s')), computed outside the graph."""
        with no_grad():
            next_snaps = [batch[i].next_state for i in order]
            s2, order2 = self._encode_batch(self.targets, next_snaps)
            proto2 = self.targets.decoder.decode(s2)
            a2 = self.targets.critic.compress_action(proto2)
            q2 = self.targets.critic.q_value(s2, a2).data.ravel()
        # order2 permutes next_snaps; map Q values back to `order` positions
        q_next = np.empty(len(batch))
        for row, idx in enumerate(order2):
            q_next[idx] = q2[row]
        rewards = np.array([batch[i].reward for i in order])
        return rewards + self.config.gamma * q_next

    # -- losses and updates ---------------------------------------------------

    def critic_loss(self, batch: Sequence[Transition]) -> Tensor:
        """Mean squared temporal-difference error against fixed targets."""
        return self._critic_loss_with_states(batch)[0]

    def _critic_loss_with_states(self, batch: Sequence[Transition]) -> tuple[Tensor, np.ndarray]:
        if not batch:
            raise ValueError("critic_loss: empty batch")
        states, order = self._encode_batch(self.nets, [t.state for t in batch])
        grids, _ = self._batch_arrays(batch, order)
        actions = self.nets.critic.compress_action(grids)
        q = self.nets.critic.q_value(states, actions)
        y = self._target_values(batch, order).reshape(-1, 1)
        diff = q - Tensor(y)
        loss = mul(frobenius_sq(diff), Tensor(1.0 / len(batch)))
        return loss, states.data

    def critic_update(self, batch: Sequence[Transition]) -> tuple[float, np.ndarray]:
        """One critic step; returns the loss and the encoded state values."""
        self.nets.clear_all_grads()
        self.critic_side.zero_grads()
        loss, state_values = self._critic_loss_with_states(batch)
        backward(loss)
        sgd_step(self.critic_side, self.config.lr_critic)
        return loss.item(), state_values

    def actor_update(self, batch: Sequence[Transition], state_values: np.ndarray | None = None) -> float:
        """Ascend the critic's score of the decoder's own proposals.

        The shared encoder is treated as a constant here; only the decoder
        moves. ``state_values`` lets the step reuse states encoded by the
        critic update on the same batch. Returns the pre-step mean Q value.
        """
        if not batch:
            raise ValueError("actor_update: empty batch")
        self.nets.clear_all_grads()
        if state_values is None:
            with no_grad():
                encoded, _ = self._encode_batch(self.nets, [t.state for t in batch])
            state_values = encoded.data
        states = Tensor(state_values)
        self.nets.decoder_params.zero_grads()
        proto = self.nets.decoder.decode(states)
        actions = self.nets.critic.compress_action(proto)
        q = self.nets.critic.q_value(states, actions)
        mean_q = mul(reduce_sum(q), Tensor(1.0 / len(batch)))
        loss = mul(mean_q, Tensor(-1.0))
        backward(loss)
        sgd_step(self.nets.decoder_params, self.config.lr_actor)
        return mean_q.item()

    def alignment_update(self, batch: Sequence[Transition]) -> float:
        """One step on the proto-vs-executed-page gap; decoder only."""
        if not batch:
            raise ValueError("alignment_update: empty batch")
        self.nets.clear_all_grads()
        with no_grad():
            states, order = self._encode_batch(self.nets, [t.state for t in batch])
        states = Tensor(states.data)
        grids, _ = self._batch_arrays(batch, order)
        self.nets.decoder_params.zero_grads()
        proto = self.nets.decoder.decode(states)
        loss = alignment_loss(proto, grids)
        scaled = mul(loss, Tensor(1.0 / len(batch)))
        backward(scaled)
        sgd_step(self.nets.decoder_params, self.config.lr_alignment)
        return loss.item() / len(batch)

    def soft_update_targets(self) -> None:
        soft_update(self.target_critic_side, self.critic_side, self.config.tau)
        soft_update(self.targets.decoder_params, self.nets.decoder_params, self.config.tau)

    def ddpg_step(self, batch: Sequence[Transition]) -> tuple[float, float]:
        critic, state_values = self.critic_update(batch)
        mean_q = self.actor_update(batch, state_values=state_values)
        self.soft_update_targets()
        return critic, mean_q

    # -- online training ------------------------------------------------------

    def _noise_sigma(self, session: int, total_sessions: int) -> float:
        cfg = self.config
        if total_sessions <= 1:
            return cfg.noise_sigma_start
        frac = session / (total_sessions - 1)
        return cfg.noise_sigma_start + frac * (cfg.noise_sigma_end - cfg.noise_sigma_start)

    def train_online(self, n_sessions: int, env_seed: int | None = None) -> list[CurvePoint]:
        """Alternate transition generation and parameter updates (one update
        per environment step, after a one-batch warm-up)."""
        with single_threaded_blas():
            return self._train_online(n_sessions, env_seed)

    def _train_online(self, n_sessions: int, env_seed: int | None) -> list[CurvePoint]:
        cfg = self.config
        env_seed = self.seed if env_seed is None else env_seed
        self.curve = []
        reward_window: list[float] = []
        for session in range(n_sessions):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=env_seed, spawn_key=(session,))
            )
            user = SimUser.sample(self.catalog, rng, cfg.page_rows, cfg.page_cols)
            user.reset_session()
            history = tuple(sample_history(user, self.catalog, cfg.history_length, rng))
            with no_grad():
                state = self.nets.encoder.encode_initial(history)
            pool = recall_pool(history, [], self.catalog.items, cfg.recall_neighbors)
            snapshot = StateSnapshot(history, ())
            sigma = self._noise_sigma(session, n_sessions)
            total = 0.0
            for _ in range(cfg.steps_per_session):
                with no_grad():
                    proto = self.nets.decoder.decode(state.s_cur)
                noise = self.noise_rng.normal(scale=sigma, size=proto.shape) if sigma > 0 else 0.0
                page = map_to_valid(proto.data + noise, pool, cfg.page_rows, cfg.page_cols)
                codes = user_feedback(user, page)
                observation = PageObservation(
                    items=page.items, feedback=codes, rows=page.rows, cols=page.cols
                )
                reward = compute_reward(page, codes)
                total += reward
                next_snapshot = snapshot.advanced(observation)
                self.buffer.add(
                    Transition(
                        state=snapshot,
                        action_grid=page.embedding_grid(),
                        reward=reward,
                        next_state=next_snapshot,
                    )
                )
                with no_grad():
                    state = self.nets.encoder.advance(state, observation)
                snapshot = next_snapshot
                for item, code in zip(page.items, codes):
                    if code != Feedback.SKIP:
                        pool.extend(top_neighbors(item, self.catalog.items, cfg.recall_neighbors))
                if len(self.buffer) >= cfg.batch_size:
                    self.ddpg_step(self.buffer.sample(cfg.batch_size))
            reward_window.append(total)
            if len(reward_window) > 50:
                reward_window.pop(0)
            self.curve.append(
                CurvePoint(
                    session=session,
                    cumulative_reward=total,
                    moving_average=float(np.mean(reward_window)),
                )
            )
            if (session + 1) % 100 == 0:
                logger.info(
                    "session %d/%d reward %.1f (avg50 %.1f)",
                    session + 1,
                    n_sessions,
                    total,
                    self.curve[-1].moving_average,
                )
        return self.curve

    # -- offline training -----------------------------------------------------

    @staticmethod
    def transitions_from_sessions(records: Sequence[SessionRecord]) -> list[Transition]:
        """Unroll logged sessions; the logged page is the behavior action."""
        transitions = []
        for record in records:
            snapshot = StateSnapshot(tuple(record.history), ())
            for step in record.steps:
                nxt = snapshot.advanced(step.page)
                dim = step.page.embedding_matrix.shape[1]
                grid = step.page.embedding_matrix.reshape(step.page.rows, step.page.cols, dim)
                transitions.append(
                    Transition(
                        state=snapshot, action_grid=grid, reward=step.reward, next_state=nxt
                    )
                )
                snapshot = nxt
        return transitions

    def train_offline(
        self, records: Sequence[SessionRecord], epochs: int | None = None
    ) -> list[dict]:
        """Epochs of shuffled minibatches; per batch: alignment step first,
        then the critic, policy, and target updates."""
        with single_threaded_blas():
            return self._train_offline(records, epochs)

    def _train_offline(self, records: Sequence[SessionRecord], epochs: int | None) -> list[dict]:
        if not records:
            raise ValueError("train_offline: empty session log")
        cfg = self.config
        transitions = self.transitions_from_sessions(records)
        if not transitions:
            raise ValueError("train_offline: sessions contain no steps")
        epochs = cfg.offline_epochs if epochs is None else epochs
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(23,))
        )
        history = []
        for epoch in range(epochs):
            order = shuffle_rng.permutation(len(transitions))
            align_losses, critic_losses = [], []
            for start in range(0, len(order), cfg.batch_size):
                batch = [transitions[i] for i in order[start : start + cfg.batch_size]]
                align_losses.append(self.alignment_update(batch))
                critic_value, state_values = self.critic_update(batch)
                critic_losses.append(critic_value)
                self.actor_update(batch, state_values=state_values)
                self.soft_update_targets()
            entry = {
                "epoch": epoch,
                "alignment_loss": float(np.mean(align_losses)),
                "critic_loss": float(np.mean(critic_losses)),
            }
            history.append(entry)
            logger.info(
                "offline epoch %d alignment %.4f critic %.4f",
                epoch,
                entry["alignment_loss"],
                entry["critic_loss"],
            )
        return history


def write_learning_curve(path, curve: Sequence[CurvePoint]) -> None:
    """Comma-separated (session, cumulative_reward, moving_average) lines."""
    with open(path, "w") as fh:
        fh.write("session,cumulative_reward,moving_average\n")
        for point in curve:
            fh.write(f"{point.session},{point.cumulative_reward!r},{point.moving_average!r}\n")
