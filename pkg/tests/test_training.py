import itertools

import numpy as np
import pytest

from factories import make_items, make_page, tiny_config
from pagerec.actor import ValidPage
from pagerec.autodiff import GradientError, Tensor, no_grad, parameter
from pagerec.encoder import PageObservation, StateSnapshot
from pagerec.environment import SessionRecord, SessionStep, generate_catalog, generate_logs
from pagerec.networks import build_networks, clone_networks, load_networks, save_networks
from pagerec.training import (
    CurvePoint,
    ReplayBuffer,
    Trainer,
    Transition,
    alignment_loss,
    compute_reward,
    soft_update,
)


def small_world(seed=0, **overrides):
    config = tiny_config(**overrides)
    catalog = generate_catalog(config.catalog_size, config.category_count, seed=seed, dim=config.item_dim)
    return config, catalog


def make_transitions(config, catalog, n, seed=0):
    rng = np.random.default_rng(seed)
    transitions = []
    items = list(catalog.items)
    for i in range(n):
        history = tuple(items[j] for j in rng.choice(len(items), config.history_length, replace=False))
        n_pages = int(rng.integers(0, 3))
        pages = []
        for _ in range(n_pages + 1):
            chosen = [items[j] for j in rng.choice(len(items), config.page_size, replace=False)]
            feedback = tuple(int(rng.integers(0, 3)) for _ in range(config.page_size))
            pages.append(
                PageObservation(
                    items=tuple(chosen),
                    feedback=feedback,
                    rows=config.page_rows,
                    cols=config.page_cols,
                )
            )
        state = StateSnapshot(history, tuple(pages[:-1]))
        action_page = pages[-1]
        grid = action_page.embedding_matrix.reshape(
            config.page_rows, config.page_cols, config.item_dim
        )
        transitions.append(
            Transition(
                state=state,
                action_grid=grid,
                reward=action_page.reward,
                next_state=state.advanced(action_page),
            )
        )
    return transitions


# ---------------------------------------------------------------------------
# compute_reward


def test_reward_all_skip_is_zero():
    items = make_items(6)
    page = ValidPage(items=tuple(items), rows=3, cols=2)
    assert compute_reward(page, [0] * 6) == 0.0


def test_reward_click_purchase_mix():
    items = make_items(10, dim=50, seed=1)
    page = ValidPage(items=tuple(items), rows=5, cols=2)
    feedback = [1, 2] + [0] * 8
    assert compute_reward(page, feedback) == 6.0


def test_reward_all_purchase_full_page():
    items = make_items(10, dim=50, seed=2)
    page = ValidPage(items=tuple(items), rows=5, cols=2)
    assert compute_reward(page, [2] * 10) == 50.0


def test_reward_rejects_mismatched_grid():
    items = make_items(6, seed=3)
    page = ValidPage(items=tuple(items), rows=3, cols=2)
    with pytest.raises(ValueError, match="6 slots"):
        compute_reward(page, [0] * 5)


def test_reward_exhaustive_small_grid():
    items = make_items(6, seed=4)
    page = ValidPage(items=tuple(items), rows=3, cols=2)
    values = (0.0, 1.0, 5.0)
    for combo in itertools.product((0, 1, 2), repeat=6):
        assert compute_reward(page, combo) == sum(values[c] for c in combo)


# ---------------------------------------------------------------------------
# soft_update


def test_soft_update_tau_one_copies():
    nets = build_networks(tiny_config(), seed=1)
    other = build_networks(tiny_config(), seed=2)
    soft_update(other.all_params, nets.all_params, tau=1.0)
    for name, t in nets.all_params.items():
        np.testing.assert_array_equal(other.all_params[name].data, t.data)


def test_soft_update_small_tau_value():
    target = parameter(np.zeros(3))
    online = parameter(np.ones(3))
    from pagerec.autodiff import ParameterSet

    tset, oset = ParameterSet([("w", target)]), ParameterSet([("w", online)])
    soft_update(tset, oset, tau=0.01)
    np.testing.assert_allclose(target.data, 0.01 * np.ones(3))


def test_soft_update_geometric_convergence():
    from pagerec.autodiff import ParameterSet

    rng = np.random.default_rng(5)
    target = parameter(rng.normal(size=(4, 3)))
    online = parameter(rng.normal(size=(4, 3)))
    tset, oset = ParameterSet([("w", target)]), ParameterSet([("w", online)])
    gap0 = target.data - online.data
    tau = 0.01
    for n in (1, 10, 100, 500):
        t = parameter(gap0 + online.data)
        ts = ParameterSet([("w", t)])
        for _ in range(n):
            soft_update(ts, oset, tau)
        expected_gap = (1 - tau) ** n * gap0
        np.testing.assert_allclose(t.data - online.data, expected_gap, atol=1e-10)


def test_soft_update_stays_on_segment():
    from pagerec.autodiff import ParameterSet

    rng = np.random.default_rng(6)
    target = parameter(rng.normal(size=5))
    online = parameter(rng.normal(size=5))
    before = target.data.copy()
    soft_update(ParameterSet([("w", target)]), ParameterSet([("w", online)]), tau=0.3)
    lo = np.minimum(before, online.data) - 1e-12
    hi = np.maximum(before, online.data) + 1e-12
    assert np.all(target.data >= lo) and np.all(target.data <= hi)


def test_soft_update_rejects_name_mismatch():
    from pagerec.autodiff import ParameterSet

    a = ParameterSet([("x", parameter([1.0]))])
    b = ParameterSet([("y", parameter([1.0]))])
    with pytest.raises(ValueError, match="different names"):
        soft_update(a, b, 0.5)


# ---------------------------------------------------------------------------
# alignment loss


def test_alignment_identical_grids_zero():
    grid = np.random.default_rng(7).normal(size=(2, 3, 2, 4))
    assert alignment_loss(Tensor(grid), grid).item() == 0.0


def test_alignment_two_unit_differences():
    base = np.zeros((1, 3, 2, 4))
    other = base.copy()
    other[0, 0, 0, 0] = 1.0
    other[0, 2, 1, 3] = 1.0
    assert alignment_loss(Tensor(other), base).item() == 2.0


def test_alignment_matches_elementwise_oracle():
    rng = np.random.default_rng(8)
    proto = rng.normal(size=(3, 3, 2, 4))
    valid = rng.normal(size=(3, 3, 2, 4))
    expected = float(sum((p - v) ** 2 for p, v in zip(proto.ravel(), valid.ravel())))
    assert alignment_loss(Tensor(proto), valid).item() == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# Replay buffer


def test_buffer_fifo_eviction():
    config, catalog = small_world()
    buf = ReplayBuffer(capacity=5, seed=0)
    transitions = make_transitions(config, catalog, 8, seed=9)
    for t in transitions:
        buf.add(t)
    assert len(buf) == 5
    stored_rewards = {id(t) for t in buf._storage}
    assert stored_rewards == {id(t) for t in transitions[3:]}


def test_buffer_sampling_reproducible_and_uniform():
    config, catalog = small_world()
    transitions = make_transitions(config, catalog, 10, seed=10)
    a = ReplayBuffer(capacity=64, seed=3)
    b = ReplayBuffer(capacity=64, seed=3)
    for t in transitions:
        a.add(t)
        b.add(t)
    sample_a = a.sample(32)
    sample_b = b.sample(32)
    assert [id(t) for t in sample_a] == [id(t) for t in sample_b]
    # chi-square sanity on uniformity over 10 cells
    counts = np.zeros(10)
    lookup = {id(t): i for i, t in enumerate(transitions)}
    for t in a.sample(5000):
        counts[lookup[id(t)]] += 1
    expected = 5000 / 10
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 27.9  # p ~ 0.001 for 9 dof


def test_buffer_rejects_empty_sampling():
    with pytest.raises(ValueError, match="empty replay buffer"):
        ReplayBuffer(capacity=3, seed=0).sample(1)


# ---------------------------------------------------------------------------
# Critic loss


def test_critic_loss_gamma_zero_constant_q():
    config, catalog = small_world(seed=11)
    trainer = Trainer(config.replace(gamma=0.0), catalog, seed=4)
    # force Q to a constant 0.5
    trainer.nets.critic.output.weight.data[...] = 0.0
    trainer.nets.critic.output.bias.data[...] = 0.5
    batch = make_transitions(config, catalog, 4, seed=12)
    batch = [
        Transition(t.state, t.action_grid, 1.0, t.next_state) for t in batch
    ]
    loss = trainer.critic_loss(batch)
    assert loss.item() == pytest.approx(0.25, abs=1e-12)


def test_critic_loss_zero_when_q_equals_target():
    config, catalog = small_world(seed=13)
    trainer = Trainer(config.replace(gamma=0.0), catalog, seed=5)
    trainer.nets.critic.output.weight.data[...] = 0.0
    trainer.nets.critic.output.bias.data[...] = 2.0
    batch = [
        Transition(t.state, t.action_grid, 2.0, t.next_state)
        for t in make_transitions(config, catalog, 3, seed=14)
    ]
    assert trainer.critic_loss(batch).item() == pytest.approx(0.0, abs=1e-15)


def test_critic_loss_matches_hand_summed_oracle():
    config, catalog = small_world(seed=15)
    trainer = Trainer(config, catalog, seed=6)
    batch = make_transitions(config, catalog, 5, seed=16)
    loss = trainer.critic_loss(batch).item()
    with no_grad():
        total = 0.0
        for t in batch:
            s = trainer.nets.encoder.encode_snapshot(t.state).s_cur
            a = trainer.nets.critic.compress_action(t.action_grid)
            q = trainer.nets.critic.q_value(s, a).item()
            s2 = trainer.targets.encoder.encode_snapshot(t.next_state).s_cur
            proto2 = trainer.targets.decoder.decode(s2)
            a2 = trainer.targets.critic.compress_action(proto2)
            q2 = trainer.targets.critic.q_value(s2, a2).item()
            y = t.reward + config.gamma * q2
            total += (y - q) ** 2
    assert loss == pytest.approx(total / len(batch), rel=1e-9)


def test_critic_loss_rejects_empty_batch():
    config, catalog = small_world(seed=17)
    trainer = Trainer(config, catalog, seed=7)
    with pytest.raises(ValueError, match="empty batch"):
        trainer.critic_loss([])


def test_target_values_ignore_online_graph():
    """Targets must come from the shadow networks, never the online ones."""
    config, catalog = small_world(seed=18)
    trainer = Trainer(config, catalog, seed=8)
    batch = make_transitions(config, catalog, 3, seed=19)
    order = list(range(len(batch)))
    y_before = trainer._target_values(batch, order)
    for _, t in trainer.nets.all_params.items():
        t.data += 0.37  # moving online weights must not move y
    y_after = trainer._target_values(batch, order)
    np.testing.assert_array_equal(y_before, y_after)


# ---------------------------------------------------------------------------
# Actor update


def test_actor_update_zero_critic_leaves_decoder():
    config, catalog = small_world(seed=20)
    trainer = Trainer(config, catalog, seed=9)
    for _, t in trainer.nets.critic_params.items():
        t.data[...] = 0.0
    before = {n: t.data.copy() for n, t in trainer.nets.decoder_params.items()}
    batch = make_transitions(config, catalog, 4, seed=21)
    trainer.actor_update(batch)
    for name, t in trainer.nets.decoder_params.items():
        np.testing.assert_array_equal(t.data, before[name])


def test_actor_gradient_matches_finite_difference():
    config, catalog = small_world(seed=22)
    trainer = Trainer(config, catalog, seed=10)
    batch = make_transitions(config, catalog, 3, seed=23)

    with no_grad():
        states, _ = trainer._encode_batch(trainer.nets, [t.state for t in batch])
    states = Tensor(states.data)

    def mean_q():
        proto = trainer.nets.decoder.decode(states)
        actions = trainer.nets.critic.compress_action(proto)
        q = trainer.nets.critic.q_value(states, actions)
        from pagerec.autodiff import mul, reduce_sum

        return mul(reduce_sum(q), Tensor(1.0 / len(batch)))

    from gradcheck import check_gradients

    weight = trainer.nets.decoder_params["decoder/dense/W"]
    check_gradients(mean_q, [weight], max_coords=8, rng=np.random.default_rng(24))


def test_actor_step_increases_mean_q():
    config, catalog = small_world(seed=25)
    trainer = Trainer(config, catalog, seed=11)
    batch = make_transitions(config, catalog, 6, seed=26)
    q_before = trainer.actor_update(batch)
    q_after = trainer.actor_update(batch)
    assert q_after > q_before


def test_actor_update_does_not_move_critic_or_encoder():
    config, catalog = small_world(seed=27)
    trainer = Trainer(config, catalog, seed=12)
    batch = make_transitions(config, catalog, 4, seed=28)
    critic_before = {n: t.data.copy() for n, t in trainer.nets.critic_params.items()}
    encoder_before = {n: t.data.copy() for n, t in trainer.nets.encoder_params.items()}
    trainer.actor_update(batch)
    for name, t in trainer.nets.critic_params.items():
        np.testing.assert_array_equal(t.data, critic_before[name])
    for name, t in trainer.nets.encoder_params.items():
        np.testing.assert_array_equal(t.data, encoder_before[name])


# ---------------------------------------------------------------------------
# Offline training


def sessions_from_transitions(config, catalog, n_sessions, steps, seed):
    rng = np.random.default_rng(seed)
    records = []
    items = list(catalog.items)
    for s in range(n_sessions):
        history = tuple(items[j] for j in rng.choice(len(items), config.history_length, replace=False))
        step_list = []
        for _ in range(steps):
            chosen = tuple(items[j] for j in rng.choice(len(items), config.page_size, replace=False))
            feedback = tuple(int(rng.integers(0, 3)) for _ in range(config.page_size))
            page = PageObservation(
                items=chosen, feedback=feedback, rows=config.page_rows, cols=config.page_cols
            )
            step_list.append(SessionStep(page=page, reward=page.reward))
        records.append(SessionRecord(history=history, steps=tuple(step_list)))
    return records


def test_offline_rejects_empty_log():
    config, catalog = small_world(seed=29)
    trainer = Trainer(config, catalog, seed=13)
    with pytest.raises(ValueError, match="empty session log"):
        trainer.train_offline([])


def test_offline_repeated_pair_alignment_monotone():
    config, catalog = small_world(seed=30)
    trainer = Trainer(config, catalog, seed=14)
    records = sessions_from_transitions(config, catalog, 1, 1, seed=31)
    records = records * 8  # one (state, page) pair, repeated
    history = trainer.train_offline(records, epochs=12)
    losses = [h["alignment_loss"] for h in history]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_offline_two_epoch_determinism():
    config, catalog = small_world(seed=32)
    records = sessions_from_transitions(config, catalog, 4, 3, seed=33)

    def run():
        trainer = Trainer(config, catalog, seed=15)
        trainer.train_offline(records, epochs=2)
        return {n: t.data.copy() for n, t in trainer.nets.all_params.items()}

    a, b = run(), run()
    for name in a:
        assert a[name].tobytes() == b[name].tobytes()


def test_transitions_from_sessions_chain():
    config, catalog = small_world(seed=34)
    records = sessions_from_transitions(config, catalog, 2, 3, seed=35)
    transitions = Trainer.transitions_from_sessions(records)
    assert len(transitions) == 6
    for i in range(3):
        assert len(transitions[i].state.pages) == i
        assert len(transitions[i].next_state.pages) == i + 1
    assert transitions[1].state.pages[-1] is transitions[0].next_state.pages[-1]


# ---------------------------------------------------------------------------
# Online training mechanics


def test_online_zero_sessions_keeps_initialization():
    config, catalog = small_world(seed=36)
    trainer = Trainer(config, catalog, seed=16)
    init = {n: t.data.copy() for n, t in trainer.nets.all_params.items()}
    curve = trainer.train_online(0)
    assert curve == []
    for name, t in trainer.nets.all_params.items():
        np.testing.assert_array_equal(t.data, init[name])


def test_online_buffer_respects_capacity():
    config, catalog = small_world(seed=37)
    config = config.replace(buffer_capacity=12, steps_per_session=4)
    trainer = Trainer(config, catalog, seed=17)
    trainer.train_online(8)
    assert len(trainer.buffer) <= 12


def test_online_curve_and_determinism():
    config, catalog = small_world(seed=38)
    config = config.replace(steps_per_session=3)

    def run():
        trainer = Trainer(config, catalog, seed=18)
        curve = trainer.train_online(6)
        return curve, {n: t.data.copy() for n, t in trainer.nets.all_params.items()}

    (curve_a, params_a), (curve_b, params_b) = run(), run()
    assert len(curve_a) == 6
    assert all(isinstance(p, CurvePoint) for p in curve_a)
    assert [p.cumulative_reward for p in curve_a] == [p.cumulative_reward for p in curve_b]
    for name in params_a:
        assert params_a[name].tobytes() == params_b[name].tobytes()


def test_online_noise_zero_reproducible():
    config, catalog = small_world(seed=39)
    config = config.replace(noise_sigma_start=0.0, noise_sigma_end=0.0, steps_per_session=3)

    def run():
        trainer = Trainer(config, catalog, seed=19)
        return trainer.train_online(4)

    a, b = run(), run()
    assert [p.cumulative_reward for p in a] == [p.cumulative_reward for p in b]


# ---------------------------------------------------------------------------
# Networks


def test_clone_networks_independent():
    config, _ = small_world(seed=40)
    nets = build_networks(config, seed=20)
    clone = clone_networks(nets)
    for name, t in nets.all_params.items():
        np.testing.assert_array_equal(clone.all_params[name].data, t.data)
    clone.all_params["decoder/dense/W"].data += 1.0
    assert not np.array_equal(
        nets.all_params["decoder/dense/W"].data, clone.all_params["decoder/dense/W"].data
    )


def test_networks_checkpoint_round_trip(tmp_path):
    config, _ = small_world(seed=41)
    nets = build_networks(config, seed=21)
    path = tmp_path / "net.ckpt"
    save_networks(path, nets, seed=21)
    loaded, seed = load_networks(path, config)
    assert seed == 21
    for name, t in nets.all_params.items():
        np.testing.assert_array_equal(loaded.all_params[name].data, t.data)


def test_load_networks_rejects_config_mismatch(tmp_path):
    config, _ = small_world(seed=42)
    nets = build_networks(config, seed=22)
    path = tmp_path / "net.ckpt"
    save_networks(path, nets, seed=22)
    with pytest.raises(ValueError, match="do not match"):
        load_networks(path, config.replace(no_attention=True))
